//! Exercises the C ABI through the exported extern "C" functions.

use std::ffi::CString;

use depthvol_capi::*;

fn set(cfg: *mut DvConfig, key: &str, value: &str) {
    let k = CString::new(key).unwrap();
    let v = CString::new(value).unwrap();
    let status = unsafe { dv_config_set(cfg, k.as_ptr(), v.as_ptr()) };
    assert_eq!(status, DvStatus::Ok, "set {key}={value}");
}

fn last_error() -> String {
    let mut buf = vec![0i8; 256];
    let n = unsafe { dv_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn fit_through_the_c_abi() {
    let cfg = dv_config_default();
    assert!(!cfg.is_null());
    set(cfg, "scene_width", "16");
    set(cfg, "scene_height", "16");
    set(cfg, "k_planes", "6");
    set(cfg, "steps", "30");
    set(cfg, "eval_every", "30");
    set(cfg, "seed", "9");

    let mut pair: *mut DvPair = std::ptr::null_mut();
    let status = unsafe { dv_pair_from_config(cfg, &mut pair) };
    assert_eq!(status, DvStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { dv_pair_width(pair) }, 16);
    assert_eq!(unsafe { dv_pair_height(pair) }, 16);

    let mut report: *mut DvReport = std::ptr::null_mut();
    let status = unsafe { dv_fit(cfg, pair, &mut report) };
    assert_eq!(status, DvStatus::Ok, "{}", last_error());

    let steps = unsafe { dv_report_steps(report) };
    assert_eq!(steps, 30);

    let mut trace = vec![0.0f64; steps];
    let status = unsafe { dv_report_loss_trace(report, trace.as_mut_ptr(), trace.len()) };
    assert_eq!(status, DvStatus::Ok);
    assert!(trace.iter().all(|v| v.is_finite()));

    let mut breakdown = [0.0f64; 5];
    let status = unsafe { dv_report_breakdown_at(report, 0, breakdown.as_mut_ptr()) };
    assert_eq!(status, DvStatus::Ok);
    let weighted =
        breakdown[0] + 1e-3 * breakdown[1] + 2e-3 * breakdown[2] + 0.01 * breakdown[3];
    assert!((weighted - breakdown[4]).abs() < 1e-12);

    let mut metrics = [0.0f64; 7];
    let status = unsafe { dv_report_final_metrics(report, metrics.as_mut_ptr()) };
    assert_eq!(status, DvStatus::Ok, "{}", last_error());
    assert!(metrics[0] >= 0.0);

    let mut pose = [0.0f64; 2];
    let status = unsafe { dv_report_pose_error(report, pose.as_mut_ptr()) };
    assert_eq!(status, DvStatus::Ok);
    assert!(pose[0] >= 0.0 && pose[1] >= 0.0);

    // Depth buffer: query the shape first, then fetch.
    let (mut w, mut h) = (0usize, 0usize);
    let status =
        unsafe { dv_report_depth(report, 0, std::ptr::null_mut(), 0, &mut w, &mut h) };
    assert_eq!(status, DvStatus::Ok);
    assert_eq!((w, h), (16, 16));
    let mut depth = vec![0.0f64; w * h];
    let status = unsafe { dv_report_depth(report, 0, depth.as_mut_ptr(), depth.len(), &mut w, &mut h) };
    assert_eq!(status, DvStatus::Ok);
    assert!(depth.iter().all(|v| v.is_finite() && *v >= 0.0));

    unsafe {
        dv_report_free(report);
        dv_pair_free(pair);
        dv_config_free(cfg);
    }
}

#[test]
fn error_paths_report_codes_and_messages() {
    // Unknown key.
    let cfg = dv_config_default();
    let k = CString::new("not_a_key").unwrap();
    let v = CString::new("1").unwrap();
    let status = unsafe { dv_config_set(cfg, k.as_ptr(), v.as_ptr()) };
    assert_eq!(status, DvStatus::Parse);
    assert!(last_error().contains("not_a_key"));

    // Null arguments.
    let status = unsafe { dv_config_set(std::ptr::null_mut(), k.as_ptr(), v.as_ptr()) };
    assert_eq!(status, DvStatus::NullArgument);
    let mut pair: *mut DvPair = std::ptr::null_mut();
    let status = unsafe { dv_pair_from_config(std::ptr::null(), &mut pair) };
    assert_eq!(status, DvStatus::NullArgument);

    // Degenerate scene surfaces as InvalidArgument.
    set(cfg, "scene_texture", "stripes");
    set(cfg, "scene_texture_scale", "1000000");
    let status = unsafe { dv_pair_from_config(cfg, &mut pair) };
    assert_eq!(status, DvStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    // Missing file.
    let path = CString::new("/nonexistent/path.cfg").unwrap();
    let mut loaded: *mut DvConfig = std::ptr::null_mut();
    let status = unsafe { dv_config_load(path.as_ptr(), &mut loaded) };
    assert_eq!(status, DvStatus::Io);

    unsafe { dv_config_free(cfg) };
}

#[test]
fn buffer_too_small_is_detected() {
    let cfg = dv_config_default();
    set(cfg, "scene_width", "16");
    set(cfg, "scene_height", "16");
    set(cfg, "k_planes", "4");
    set(cfg, "steps", "5");
    let mut pair: *mut DvPair = std::ptr::null_mut();
    assert_eq!(
        unsafe { dv_pair_from_config(cfg, &mut pair) },
        DvStatus::Ok
    );
    let mut report: *mut DvReport = std::ptr::null_mut();
    assert_eq!(unsafe { dv_fit(cfg, pair, &mut report) }, DvStatus::Ok);
    let mut tiny = [0.0f64; 2];
    let status = unsafe { dv_report_loss_trace(report, tiny.as_mut_ptr(), tiny.len()) };
    assert_eq!(status, DvStatus::BufferTooSmall);
    unsafe {
        dv_report_free(report);
        dv_pair_free(pair);
        dv_config_free(cfg);
    }
}
