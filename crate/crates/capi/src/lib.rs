//! C ABI over the depth-volume fitting engine.
//!
//! Every object crosses the boundary as an opaque handle created and freed
//! here; functions return a status code and report details through
//! [`dv_last_error_message`]. The header is generated into
//! `include/depthvol.h` by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use depthvol::harness::config::apply_overrides;
use depthvol::harness::{fit_pair, parse_experiment_config, resolve_pair, ExperimentConfig, FitReport};
use depthvol::metrics::PoseError;
use depthvol::rendering::{compute_weights, midpoint_planes, render_depth_with};
use depthvol::synthscene::FramePair;
use depthvol::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> DvStatus {
    match err {
        Error::InvalidArgument(_) | Error::EmptyValidSet(_) | Error::DegenerateScene(_) => {
            DvStatus::InvalidArgument
        }
        Error::NonFinite { .. } => DvStatus::NonFinite,
        Error::Parse { .. } => DvStatus::Parse,
        Error::Io { .. } => DvStatus::Io,
    }
}

fn fail(err: Error) -> DvStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

fn guard<F: FnOnce() -> DvStatus>(f: F) -> DvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            DvStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    unsafe { CStr::from_ptr(p) }.to_str().ok()
}

/// Opaque experiment configuration.
pub struct DvConfig(ExperimentConfig);

/// Opaque frame pair.
pub struct DvPair(FramePair);

/// Opaque fit report.
pub struct DvReport(FitReport);

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (then only the
/// length is returned).
#[no_mangle]
pub unsafe extern "C" fn dv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// A configuration filled with the built-in defaults. Never fails.
#[no_mangle]
pub extern "C" fn dv_config_default() -> *mut DvConfig {
    Box::into_raw(Box::new(DvConfig(ExperimentConfig::default())))
}

/// Loads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dv_config_load(path: *const c_char, out: *mut *mut DvConfig) -> DvStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return DvStatus::NullArgument;
        }
        let Some(path) = (unsafe { cstr(path) }) else {
            set_error("path is null or not UTF-8");
            return DvStatus::NullArgument;
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(Error::io(PathBuf::from(path), e)),
        };
        match parse_experiment_config(std::path::Path::new(path), &text) {
            Ok(cfg) => {
                unsafe { *out = Box::into_raw(Box::new(DvConfig(cfg))) };
                DvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Sets one configuration key, same keys as the configuration file.
///
/// # Safety
/// `cfg` must be a live handle from this library; `key`/`value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dv_config_set(
    cfg: *mut DvConfig,
    key: *const c_char,
    value: *const c_char,
) -> DvStatus {
    guard(|| {
        let (Some(key), Some(value)) = (unsafe { cstr(key) }, unsafe { cstr(value) }) else {
            set_error("key or value is null or not UTF-8");
            return DvStatus::NullArgument;
        };
        let Some(cfg) = (unsafe { cfg.as_mut() }) else {
            set_error("config handle is null");
            return DvStatus::NullArgument;
        };
        match apply_overrides(&mut cfg.0, &[(key.to_string(), value.to_string())]) {
            Ok(()) => DvStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `cfg` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dv_config_free(cfg: *mut DvConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Generates or ingests the pair the configuration describes.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_pair_from_config(
    cfg: *const DvConfig,
    out: *mut *mut DvPair,
) -> DvStatus {
    guard(|| {
        let (Some(cfg), false) = (unsafe { cfg.as_ref() }, out.is_null()) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        match resolve_pair(&cfg.0) {
            Ok(pair) => {
                unsafe { *out = Box::into_raw(Box::new(DvPair(pair))) };
                DvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `pair` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dv_pair_free(pair: *mut DvPair) {
    if !pair.is_null() {
        drop(unsafe { Box::from_raw(pair) });
    }
}

/// Image width of a pair; zero on a null handle.
///
/// # Safety
/// `pair` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dv_pair_width(pair: *const DvPair) -> usize {
    unsafe { pair.as_ref() }.map_or(0, |p| p.0.width())
}

/// Image height of a pair; zero on a null handle.
///
/// # Safety
/// `pair` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dv_pair_height(pair: *const DvPair) -> usize {
    unsafe { pair.as_ref() }.map_or(0, |p| p.0.height())
}

/// Fits the pair under the configuration.
///
/// # Safety
/// `cfg` and `pair` must be live handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_fit(
    cfg: *const DvConfig,
    pair: *const DvPair,
    out: *mut *mut DvReport,
) -> DvStatus {
    guard(|| {
        let (Some(cfg), Some(pair), false) = (
            unsafe { cfg.as_ref() },
            unsafe { pair.as_ref() },
            out.is_null(),
        ) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        match fit_pair(&pair.0, &cfg.0.fit) {
            Ok(report) => {
                unsafe { *out = Box::into_raw(Box::new(DvReport(report))) };
                DvStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dv_report_free(report: *mut DvReport) {
    if !report.is_null() {
        drop(unsafe { Box::from_raw(report) });
    }
}

/// Number of optimization steps the report covers.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dv_report_steps(report: *const DvReport) -> usize {
    unsafe { report.as_ref() }.map_or(0, |r| r.0.trace.len())
}

/// Copies the total-loss trace into `buf`.
///
/// # Safety
/// `report` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_report_loss_trace(
    report: *const DvReport,
    buf: *mut f64,
    len: usize,
) -> DvStatus {
    guard(|| {
        let (Some(report), false) = (unsafe { report.as_ref() }, buf.is_null()) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        let trace = &report.0.trace;
        if len < trace.len() {
            set_error(format!("buffer holds {len}, trace needs {}", trace.len()));
            return DvStatus::BufferTooSmall;
        }
        for (i, l) in trace.iter().enumerate() {
            unsafe { *buf.add(i) = l.total };
        }
        DvStatus::Ok
    })
}

/// Writes the loss breakdown of one step as five doubles: photometric,
/// smoothness, depth consistency, brightness prior, total.
///
/// # Safety
/// `report` must be live; `out5` must hold five doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_report_breakdown_at(
    report: *const DvReport,
    step: usize,
    out5: *mut f64,
) -> DvStatus {
    guard(|| {
        let (Some(report), false) = (unsafe { report.as_ref() }, out5.is_null()) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        let Some(l) = report.0.trace.get(step) else {
            set_error(format!(
                "step {step} out of range ({})",
                report.0.trace.len()
            ));
            return DvStatus::InvalidArgument;
        };
        let vals = [
            l.photometric,
            l.smoothness,
            l.depth_consistency,
            l.brightness_reg,
            l.total,
        ];
        for (i, v) in vals.iter().enumerate() {
            unsafe { *out5.add(i) = *v };
        }
        DvStatus::Ok
    })
}

/// Writes the final target-frame depth metrics as seven doubles: abs_rel,
/// sq_rel, rmse, rmse_log, d1, d2, d3. Fails when the pair carried no
/// ground-truth depth.
///
/// # Safety
/// `report` must be live; `out7` must hold seven doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_report_final_metrics(
    report: *const DvReport,
    out7: *mut f64,
) -> DvStatus {
    guard(|| {
        let (Some(report), false) = (unsafe { report.as_ref() }, out7.is_null()) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        let Some(m) = report.0.final_metrics_t() else {
            set_error("report has no depth metrics (no ground truth)");
            return DvStatus::InvalidArgument;
        };
        let vals = [
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3,
        ];
        for (i, v) in vals.iter().enumerate() {
            unsafe { *out7.add(i) = *v };
        }
        DvStatus::Ok
    })
}

/// Writes the final pose error as two doubles: translation distance and
/// rotation angle in degrees.
///
/// # Safety
/// `report` must be live; `out2` must hold two doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_report_pose_error(
    report: *const DvReport,
    out2: *mut f64,
) -> DvStatus {
    guard(|| {
        let (Some(report), false) = (unsafe { report.as_ref() }, out2.is_null()) else {
            set_error("null argument");
            return DvStatus::NullArgument;
        };
        let Some(PoseError {
            translation,
            rotation_deg,
        }) = report.0.final_pose_error()
        else {
            set_error("report has no pose error (no ground-truth pose)");
            return DvStatus::InvalidArgument;
        };
        unsafe {
            *out2 = translation;
            *out2.add(1) = rotation_deg;
        }
        DvStatus::Ok
    })
}

/// Renders the fitted depth of one frame (0 = target, 1 = source) into
/// `buf`, row-major. `out_width`/`out_height` receive the image shape and
/// may be null. Call with `buf == NULL` to query the needed length.
///
/// # Safety
/// `report` must be live; `buf`, when non-null, must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_report_depth(
    report: *const DvReport,
    frame: c_int,
    buf: *mut f64,
    len: usize,
    out_width: *mut usize,
    out_height: *mut usize,
) -> DvStatus {
    guard(|| {
        let Some(report) = (unsafe { report.as_ref() }) else {
            set_error("report handle is null");
            return DvStatus::NullArgument;
        };
        let fit = &report.0.config;
        let raw = match frame {
            0 => &report.0.final_params.raw_density_t,
            1 => &report.0.final_params.raw_density_s,
            other => {
                set_error(format!("frame must be 0 or 1, got {other}"));
                return DvStatus::InvalidArgument;
            }
        };
        let planes = match midpoint_planes(fit.k_planes, fit.z_min, fit.z_max) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        let depth = render_depth_with(
            &compute_weights(&depthvol::rendering::activate_density(raw), &planes),
            &planes,
            fit.normalize_depth,
        );
        let n = depth.z.len();
        if !out_width.is_null() {
            unsafe { *out_width = depth.width() };
        }
        if !out_height.is_null() {
            unsafe { *out_height = depth.height() };
        }
        if buf.is_null() {
            return DvStatus::Ok;
        }
        if len < n {
            set_error(format!("buffer holds {len}, depth needs {n}"));
            return DvStatus::BufferTooSmall;
        }
        for (i, v) in depth.z.data().iter().enumerate() {
            unsafe { *buf.add(i) = *v };
        }
        DvStatus::Ok
    })
}
