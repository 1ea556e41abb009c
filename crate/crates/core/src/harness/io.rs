//! File formats: PFM depth maps, PNG images, plain-text sidecars, and the
//! density volume container.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::grid::{DepthMap, Field2, ImageRgb};
use crate::regularization::{BrightnessParams, OcclusionMask};
use crate::rendering::{DensityVolume, PlaneSet};
use crate::synthscene::FramePair;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

/// Writes a grayscale PFM (little-endian, scale header -1.0, bottom-up
/// raster). Invalid pixels are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut buf = Vec::with_capacity(32 + w * h * 4);
    buf.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if depth.valid[i] {
                depth.z.data()[i] as f32
            } else {
                0.0
            };
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads a grayscale PFM; non-positive or non-finite entries are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut lines_end = 0usize;
    let mut header = Vec::new();
    // Three whitespace-delimited header tokens groups: type, dims, scale.
    let mut token_start = None;
    let mut tokens: Vec<(usize, String)> = Vec::new();
    for (i, &b) in data.iter().enumerate() {
        let ws = b == b' ' || b == b'\n' || b == b'\r' || b == b'\t';
        match (token_start, ws) {
            (None, false) => token_start = Some(i),
            (Some(s), true) => {
                tokens.push((s, String::from_utf8_lossy(&data[s..i]).into_owned()));
                token_start = None;
                if tokens.len() == 4 {
                    lines_end = i + 1;
                    break;
                }
            }
            _ => {}
        }
    }
    header.extend(tokens.iter().map(|(_, t)| t.clone()));
    if header.len() != 4 {
        return Err(Error::parse(path, 1, "truncated PFM header"));
    }
    if header[0] != "Pf" {
        return Err(Error::parse(
            path,
            1,
            format!("expected grayscale `Pf`, got `{}`", header[0]),
        ));
    }
    let w: usize = header[1]
        .parse()
        .map_err(|_| Error::parse(path, 2, format!("bad width `{}`", header[1])))?;
    let h: usize = header[2]
        .parse()
        .map_err(|_| Error::parse(path, 2, format!("bad height `{}`", header[2])))?;
    let scale: f64 = header[3]
        .parse()
        .map_err(|_| Error::parse(path, 3, format!("bad scale `{}`", header[3])))?;
    let little_endian = scale < 0.0;
    let need = w * h * 4;
    if data.len() < lines_end + need {
        return Err(Error::parse(
            path,
            4,
            format!(
                "raster truncated at byte {} of {}",
                data.len(),
                lines_end + need
            ),
        ));
    }
    let mut z = Field2::zeros(w, h);
    let mut valid = vec![false; w * h];
    for y_file in 0..h {
        let y = h - 1 - y_file;
        for x in 0..w {
            let off = lines_end + (y_file * w + x) * 4;
            let bytes: [u8; 4] = data[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            } as f64;
            let i = y * w + x;
            z.data_mut()[i] = v;
            valid[i] = v.is_finite() && v > 0.0;
        }
    }
    Ok(DepthMap { z, valid })
}

/// Writes an 8-bit RGB PNG from [0, 1] intensities.
pub fn write_png_rgb(path: &Path, img: &ImageRgb) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

pub fn read_png_rgb(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageRgb::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(
                x,
                y,
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Reads a 16-bit grayscale PNG as depth = value / scale; zeros are invalid.
pub fn read_png_depth16(path: &Path, scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let img = image::open(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut z = Field2::zeros(w, h);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let raw = img.get_pixel(x as u32, y as u32)[0];
            let i = y * w + x;
            if raw > 0 {
                z.data_mut()[i] = raw as f64 / scale;
                valid[i] = true;
            }
        }
    }
    Ok(DepthMap { z, valid })
}

/// Grayscale preview normalized by the 95th percentile of valid depths.
pub fn depth_preview(depth: &DepthMap) -> ImageRgb {
    let mut vals: Vec<f64> = depth
        .z
        .data()
        .iter()
        .zip(depth.valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&z, _)| z)
        .collect();
    let norm = if vals.is_empty() {
        1.0
    } else {
        vals.sort_by(|a, b| a.total_cmp(b));
        let idx = ((vals.len() - 1) as f64 * 0.95).round() as usize;
        vals[idx].max(1e-12)
    };
    let (w, h) = (depth.width(), depth.height());
    let mut img = ImageRgb::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = if depth.valid[i] {
                (depth.z.data()[i] / norm).clamp(0.0, 1.0)
            } else {
                0.0
            };
            img.set_pixel(x, y, [v, v, v]);
        }
    }
    img
}

pub fn write_mask_png(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let mut img = ImageRgb::zeros(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let v = if mask.m[y * mask.width + x] { 1.0 } else { 0.0 };
            img.set_pixel(x, y, [v, v, v]);
        }
    }
    write_png_rgb(path, &img)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    fs::write(
        path,
        format!(
            "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ),
    )
    .map_err(|e| io_err(path, e))
}

fn numeric_tokens(path: &Path, text: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(path, ln + 1, format!("expected a number, got `{tok}`"))
            })?;
            out.push((ln + 1, v));
        }
    }
    Ok(out)
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let toks = numeric_tokens(path, &text)?;
    if toks.len() != 6 {
        return Err(Error::parse(
            path,
            1,
            format!("expected 6 intrinsics numbers, found {}", toks.len()),
        ));
    }
    Intrinsics::new(
        toks[0].1,
        toks[1].1,
        toks[2].1,
        toks[3].1,
        toks[4].1 as usize,
        toks[5].1 as usize,
    )
}

/// Pose sidecar: three rows of `r r r t`.
pub fn write_pose(path: &Path, t: &RigidTransform) -> Result<()> {
    let mut s = String::from("# rotation | translation, row-major\n");
    for r in 0..3 {
        s.push_str(&format!(
            "{} {} {} {}\n",
            t.rotation[(r, 0)],
            t.rotation[(r, 1)],
            t.rotation[(r, 2)],
            t.translation[r]
        ));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let toks = numeric_tokens(path, &text)?;
    if toks.len() != 12 {
        return Err(Error::parse(
            path,
            1,
            format!("expected 12 pose numbers, found {}", toks.len()),
        ));
    }
    let mut rot = nalgebra::Matrix3::zeros();
    let mut trans = nalgebra::Vector3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            rot[(r, c)] = toks[r * 4 + c].1;
        }
        trans[r] = toks[r * 4 + 3].1;
    }
    let t = RigidTransform::new(rot, trans);
    if t.orthonormality_error() > 1e-6 {
        return Err(Error::parse(
            path,
            1,
            "rotation block is not orthonormal".to_string(),
        ));
    }
    Ok(t)
}

pub fn write_brightness(path: &Path, p: &BrightnessParams) -> Result<()> {
    fs::write(path, format!("# a b\n{} {}\n", p.a, p.b)).map_err(|e| io_err(path, e))
}

pub fn read_brightness(path: &Path) -> Result<BrightnessParams> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let toks = numeric_tokens(path, &text)?;
    if toks.len() != 2 {
        return Err(Error::parse(
            path,
            1,
            format!("expected 2 brightness numbers, found {}", toks.len()),
        ));
    }
    Ok(BrightnessParams {
        a: toks[0].1,
        b: toks[1].1,
    })
}

/// Density volume container: text header (magic, shape, depth range, plane
/// depths), then the raw grid as little-endian f64, plane-major.
pub fn write_volume(path: &Path, vol: &DensityVolume) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"DVOL 1\n");
    buf.extend_from_slice(
        format!(
            "{} {} {}\n{} {}\n",
            vol.raw.planes(),
            vol.raw.width(),
            vol.raw.height(),
            vol.planes.z_min(),
            vol.planes.z_max()
        )
        .as_bytes(),
    );
    let depths: Vec<String> = vol.planes.depths().iter().map(|d| d.to_string()).collect();
    buf.extend_from_slice(format!("{}\n", depths.join(" ")).as_bytes());
    for v in vol.raw.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_volume(path: &Path) -> Result<DensityVolume> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    // Header is the first four newline-terminated lines.
    let mut line_starts = vec![0usize];
    for (i, &b) in data.iter().enumerate() {
        if b == b'\n' {
            line_starts.push(i + 1);
            if line_starts.len() == 5 {
                break;
            }
        }
    }
    if line_starts.len() < 5 {
        return Err(Error::parse(path, 1, "truncated volume header"));
    }
    let line = |i: usize| -> &str {
        std::str::from_utf8(&data[line_starts[i]..line_starts[i + 1] - 1]).unwrap_or("")
    };
    if line(0) != "DVOL 1" {
        return Err(Error::parse(path, 1, "missing DVOL magic"));
    }
    let dims: Vec<usize> = line(1)
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, 2, "bad shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::parse(path, 2, "expected `planes width height`"));
    }
    let range: Vec<f64> = line(2)
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, 3, "bad range")))
        .collect::<Result<_>>()?;
    if range.len() != 2 {
        return Err(Error::parse(path, 3, "expected `z_min z_max`"));
    }
    let depths: Vec<f64> = line(3)
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, 4, "bad depth")))
        .collect::<Result<_>>()?;
    if depths.len() != dims[0] {
        return Err(Error::parse(path, 4, "plane depth count mismatch"));
    }
    let planes = PlaneSet::from_depths(depths, range[0], range[1])?;
    let (k, w, h) = (dims[0], dims[1], dims[2]);
    let start = line_starts[4];
    let need = k * w * h * 8;
    if data.len() < start + need {
        return Err(Error::parse(
            path,
            5,
            format!("raster truncated at byte {}", data.len()),
        ));
    }
    let mut raw = Vec::with_capacity(k * w * h);
    for i in 0..k * w * h {
        let off = start + i * 8;
        raw.push(f64::from_le_bytes(data[off..off + 8].try_into().unwrap()));
    }
    Ok(DensityVolume::new(
        crate::grid::Field3::from_vec(k, w, h, raw),
        planes,
    ))
}

/// Optional companions of an ingested image pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestPaths {
    pub depth_t: Option<PathBuf>,
    pub depth_s: Option<PathBuf>,
    /// Divisor converting 16-bit PNG values to scene units.
    pub depth_scale: Option<f64>,
    pub pose: Option<PathBuf>,
    pub brightness: Option<PathBuf>,
}

/// Loads two RGB frames plus whatever ground truth sits next to them.
/// Missing companions simply disable metric reporting downstream.
pub fn ingest_pair(
    target: &Path,
    source: &Path,
    intrinsics: &Path,
    extra: &IngestPaths,
) -> Result<FramePair> {
    let i_t = read_png_rgb(target)?;
    let i_s = read_png_rgb(source)?;
    if !i_t.same_shape(&i_s) {
        return Err(Error::InvalidArgument(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            i_t.width(),
            i_t.height(),
            i_s.width(),
            i_s.height()
        )));
    }
    let k = read_intrinsics(intrinsics)?;
    if k.width != i_t.width() || k.height != i_t.height() {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{}, frames are {}x{}",
            k.width,
            k.height,
            i_t.width(),
            i_t.height()
        )));
    }
    let load_depth = |p: &PathBuf| -> Result<DepthMap> {
        let d = match p.extension().and_then(|e| e.to_str()) {
            Some("pfm") => read_pfm(p)?,
            _ => read_png_depth16(p, extra.depth_scale.unwrap_or(256.0))?,
        };
        if d.width() != k.width || d.height() != k.height {
            return Err(Error::InvalidArgument(format!(
                "{}: depth size {}x{} does not match frames",
                p.display(),
                d.width(),
                d.height()
            )));
        }
        Ok(d)
    };
    let gt_depth_t = extra.depth_t.as_ref().map(&load_depth).transpose()?;
    let gt_depth_s = extra.depth_s.as_ref().map(&load_depth).transpose()?;
    let gt_t_ts = extra.pose.as_ref().map(|p| read_pose(p)).transpose()?;
    let gt_brightness = extra
        .brightness
        .as_ref()
        .map(|p| read_brightness(p))
        .transpose()?;
    Ok(FramePair {
        i_t,
        i_s,
        intrinsics: k,
        gt_depth_t,
        gt_depth_s,
        gt_t_ts,
        gt_brightness,
        scene: None,
    })
}

/// Writes the canonical export of a pair into a directory: frames as PNG,
/// depths as PFM, pose/intrinsics/brightness as plain-text sidecars.
pub fn export_pair(dir: &Path, pair: &FramePair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_png_rgb(&dir.join("target.png"), &pair.i_t)?;
    write_png_rgb(&dir.join("source.png"), &pair.i_s)?;
    write_intrinsics(&dir.join("intrinsics.txt"), &pair.intrinsics)?;
    if let Some(d) = &pair.gt_depth_t {
        write_pfm(&dir.join("depth_target.pfm"), d)?;
    }
    if let Some(d) = &pair.gt_depth_s {
        write_pfm(&dir.join("depth_source.pfm"), d)?;
    }
    if let Some(t) = &pair.gt_t_ts {
        write_pose(&dir.join("pose.txt"), t)?;
    }
    if let Some(b) = &pair.gt_brightness {
        write_brightness(&dir.join("brightness.txt"), b)?;
    }
    Ok(())
}

/// Convenience for tests and the CLI: a small text file writer.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_string(&mut s)
        .map_err(|e| io_err(path, e))?;
    Ok(s)
}
