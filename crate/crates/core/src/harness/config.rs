//! Plain-text `key = value` configuration with strict key checking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SmoothnessTarget};
use crate::metrics::EvalClamp;
use crate::rendering::PlaneMode;
use crate::synthscene::{Layout, SceneSpec, Texture};

use super::io::IngestPaths;

/// Runtime configuration of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub k_planes: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub plane_mode: PlaneMode,
    pub loss_weights: LossWeights,
    /// Occlusion threshold; `None` resolves to 1% of the depth range.
    pub gamma: Option<f64>,
    pub lr_density: f64,
    pub lr_pose: f64,
    pub lr_brightness: f64,
    /// Final/initial learning-rate ratio, applied exponentially over the
    /// run; 1.0 keeps the rates constant.
    pub lr_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub freeze_pose: bool,
    pub freeze_density: bool,
    pub freeze_brightness: bool,
    /// Start the pose at the pair's ground truth instead of identity.
    pub init_pose_from_gt: bool,
    /// Build near-opaque density volumes from the ground-truth depths.
    pub init_density_from_gt: bool,
    /// Per-interval optical depth of the constant density initialization.
    pub init_optical_depth: f64,
    /// Steps at the start of a fit with the identity auto-mask disabled; at
    /// an identity pose estimate the mask would otherwise reject every
    /// pixel and freeze the optimization.
    pub identity_mask_warmup: usize,
    pub median_scale: bool,
    pub eval_clamp: EvalClamp,
    pub smoothness_target: SmoothnessTarget,
    pub normalize_depth: bool,
    pub disable_occlusion_mask: bool,
    /// Positional depth-embedding width exposed through the CLI.
    pub embed_dim: usize,
    /// Threshold enforced by `--assert` on the final target abs_rel.
    pub assert_abs_rel_below: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_planes: 24,
            z_min: 1.0,
            z_max: 10.0,
            plane_mode: PlaneMode::StratifiedRandom,
            loss_weights: LossWeights::default(),
            gamma: None,
            lr_density: 0.02,
            lr_pose: 1e-3,
            lr_brightness: 1e-3,
            lr_decay: 1.0,
            steps: 2000,
            seed: 1,
            eval_every: 250,
            freeze_pose: false,
            freeze_density: false,
            freeze_brightness: false,
            init_pose_from_gt: false,
            init_density_from_gt: false,
            init_optical_depth: 0.1,
            identity_mask_warmup: 200,
            median_scale: true,
            eval_clamp: EvalClamp::default(),
            smoothness_target: SmoothnessTarget::MeanNormalizedDisparity,
            normalize_depth: false,
            disable_occlusion_mask: false,
            embed_dim: 16,
            assert_abs_rel_below: Some(0.10),
            out_dir: None,
        }
    }
}

impl FitConfig {
    pub fn resolved_gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.01 * (self.z_max - self.z_min))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_planes < 1 || self.steps < 1 {
            return Err(Error::InvalidArgument(
                "k_planes and steps must be >= 1".into(),
            ));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < z_min < z_max, got [{}, {}]",
                self.z_min, self.z_max
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        for (name, lr) in [
            ("lr_density", self.lr_density),
            ("lr_pose", self.lr_pose),
            ("lr_brightness", self.lr_brightness),
        ] {
            if !(lr > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive; freeze a block with its freeze_* flag instead"
                )));
            }
        }
        if !(self.resolved_gamma() > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(
                "embed_dim must be even and >= 2".into(),
            ));
        }
        self.loss_weights.validate()
    }
}

/// Where the pair being fitted comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSource {
    Synthetic(SceneSpec),
    Ingest {
        target: PathBuf,
        source: PathBuf,
        intrinsics: PathBuf,
        extra: IngestPaths,
    },
}

/// A whole experiment: the fit settings plus the pair source.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fit: FitConfig,
    pub source: PairSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fit: FitConfig::default(),
            source: PairSource::Synthetic(default_scene(1)),
        }
    }
}

pub fn default_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        layout: Layout::SinglePlane { depth: 4.0 },
        texture: Texture::Checker { scale: 1.5 },
        depth_range: (1.0, 10.0),
        rotation_mag: 1.0_f64.to_radians(),
        translation_mag: 0.12,
        illumination: (1.0, 0.0),
        width: 64,
        height: 64,
        seed,
    }
}

fn parse_key<T: std::str::FromStr>(path: &Path, line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::parse(
            path,
            line,
            format!("bad value `{v}` for key `{key}`"),
        )
    })
}

fn parse_list(path: &Path, line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|t| parse_key::<f64>(path, line, key, t.trim()))
        .collect()
}

/// Parses `key = value` lines (with `#` comments) into an experiment
/// configuration. Unknown keys are errors that name the key.
pub fn parse_experiment_config(path: &Path, text: &str) -> Result<ExperimentConfig> {
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        kv.insert(
            key.trim().to_string(),
            (idx + 1, value.trim().to_string()),
        );
    }
    build_experiment_config(path, kv)
}

pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    overrides: &[(String, String)],
) -> Result<()> {
    let path = Path::new("--set");
    let mut kv = BTreeMap::new();
    for (k, v) in overrides {
        kv.insert(k.clone(), (0usize, v.clone()));
    }
    apply_keys(path, kv, cfg)
}

fn build_experiment_config(
    path: &Path,
    kv: BTreeMap<String, (usize, String)>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply_keys(path, kv, &mut cfg)?;
    Ok(cfg)
}

fn apply_keys(
    path: &Path,
    kv: BTreeMap<String, (usize, String)>,
    cfg: &mut ExperimentConfig,
) -> Result<()> {
    // Scene keys are collected first so the layout can be assembled from
    // several of them.
    let mut scene = match &cfg.source {
        PairSource::Synthetic(s) => s.clone(),
        PairSource::Ingest { .. } => default_scene(cfg.fit.seed),
    };
    let mut scene_touched = false;
    let mut layout_kind: Option<String> = None;
    let mut texture_kind: Option<String> = None;
    let mut texture_scale: Option<f64> = None;
    let mut depth: Option<f64> = None;
    let mut near_depth: Option<f64> = None;
    let mut far_depth: Option<f64> = None;
    let mut rect: Option<Vec<f64>> = None;
    let mut steps_list: Option<Vec<f64>> = None;
    let mut edges_list: Option<Vec<f64>> = None;
    let mut spheres: Option<Vec<f64>> = None;
    let mut background_depth: Option<f64> = None;

    let mut ingest_target: Option<PathBuf> = None;
    let mut ingest_source: Option<PathBuf> = None;
    let mut ingest_intrinsics: Option<PathBuf> = None;
    let mut ingest_extra = IngestPaths::default();

    for (key, (line, v)) in &kv {
        let line = *line;
        match key.as_str() {
            "k_planes" => cfg.fit.k_planes = parse_key(path, line, key, v)?,
            "z_min" => cfg.fit.z_min = parse_key(path, line, key, v)?,
            "z_max" => cfg.fit.z_max = parse_key(path, line, key, v)?,
            "plane_mode" => {
                cfg.fit.plane_mode = match v.as_str() {
                    "stratified" => PlaneMode::StratifiedRandom,
                    "midpoint" => PlaneMode::Midpoint,
                    other => {
                        return Err(Error::parse(
                            path,
                            line,
                            format!("plane_mode must be stratified|midpoint, got `{other}`"),
                        ))
                    }
                }
            }
            "alpha" => cfg.fit.loss_weights.alpha = parse_key(path, line, key, v)?,
            "beta" => cfg.fit.loss_weights.beta = parse_key(path, line, key, v)?,
            "eta" => cfg.fit.loss_weights.eta = parse_key(path, line, key, v)?,
            "gamma" => {
                cfg.fit.gamma = if v == "auto" {
                    None
                } else {
                    Some(parse_key(path, line, key, v)?)
                }
            }
            "lr_density" => cfg.fit.lr_density = parse_key(path, line, key, v)?,
            "lr_pose" => cfg.fit.lr_pose = parse_key(path, line, key, v)?,
            "lr_brightness" => cfg.fit.lr_brightness = parse_key(path, line, key, v)?,
            "lr_decay" => cfg.fit.lr_decay = parse_key(path, line, key, v)?,
            "steps" => cfg.fit.steps = parse_key(path, line, key, v)?,
            "seed" => cfg.fit.seed = parse_key(path, line, key, v)?,
            "eval_every" => cfg.fit.eval_every = parse_key(path, line, key, v)?,
            "freeze_pose" => cfg.fit.freeze_pose = parse_key(path, line, key, v)?,
            "freeze_density" => cfg.fit.freeze_density = parse_key(path, line, key, v)?,
            "freeze_brightness" => cfg.fit.freeze_brightness = parse_key(path, line, key, v)?,
            "init_pose_from_gt" => cfg.fit.init_pose_from_gt = parse_key(path, line, key, v)?,
            "init_density_from_gt" => {
                cfg.fit.init_density_from_gt = parse_key(path, line, key, v)?
            }
            "init_optical_depth" => cfg.fit.init_optical_depth = parse_key(path, line, key, v)?,
            "identity_mask_warmup" => {
                cfg.fit.identity_mask_warmup = parse_key(path, line, key, v)?
            }
            "median_scale" => cfg.fit.median_scale = parse_key(path, line, key, v)?,
            "eval_min_depth" => cfg.fit.eval_clamp.min_depth = parse_key(path, line, key, v)?,
            "eval_max_depth" => cfg.fit.eval_clamp.max_depth = parse_key(path, line, key, v)?,
            "smoothness" => {
                cfg.fit.smoothness_target = match v.as_str() {
                    "disparity" => SmoothnessTarget::MeanNormalizedDisparity,
                    "depth" => SmoothnessTarget::MeanNormalizedDepth,
                    other => {
                        return Err(Error::parse(
                            path,
                            line,
                            format!("smoothness must be disparity|depth, got `{other}`"),
                        ))
                    }
                }
            }
            "normalize_depth" => cfg.fit.normalize_depth = parse_key(path, line, key, v)?,
            "disable_occlusion_mask" => {
                cfg.fit.disable_occlusion_mask = parse_key(path, line, key, v)?
            }
            "embed_dim" => cfg.fit.embed_dim = parse_key(path, line, key, v)?,
            "assert_abs_rel_below" => {
                cfg.fit.assert_abs_rel_below = if v == "none" {
                    None
                } else {
                    Some(parse_key(path, line, key, v)?)
                }
            }
            "out_dir" => cfg.fit.out_dir = Some(PathBuf::from(v)),

            "scene_layout" => {
                layout_kind = Some(v.clone());
                scene_touched = true;
            }
            "scene_texture" => {
                texture_kind = Some(v.clone());
                scene_touched = true;
            }
            "scene_texture_scale" => {
                texture_scale = Some(parse_key(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_width" => {
                scene.width = parse_key(path, line, key, v)?;
                scene_touched = true;
            }
            "scene_height" => {
                scene.height = parse_key(path, line, key, v)?;
                scene_touched = true;
            }
            "scene_depth" => {
                depth = Some(parse_key(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_near_depth" => {
                near_depth = Some(parse_key(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_far_depth" => {
                far_depth = Some(parse_key(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_rect" => {
                rect = Some(parse_list(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_steps" => {
                steps_list = Some(parse_list(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_edges" => {
                edges_list = Some(parse_list(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_spheres" => {
                spheres = Some(parse_list(path, line, key, &v.replace(';', ","))?);
                scene_touched = true;
            }
            "scene_background_depth" => {
                background_depth = Some(parse_key(path, line, key, v)?);
                scene_touched = true;
            }
            "scene_rotation_deg" => {
                scene.rotation_mag = parse_key::<f64>(path, line, key, v)?.to_radians();
                scene_touched = true;
            }
            "scene_translation" => {
                scene.translation_mag = parse_key(path, line, key, v)?;
                scene_touched = true;
            }
            "scene_gain" => {
                scene.illumination.0 = parse_key(path, line, key, v)?;
                scene_touched = true;
            }
            "scene_bias" => {
                scene.illumination.1 = parse_key(path, line, key, v)?;
                scene_touched = true;
            }
            "scene_seed" => {
                scene.seed = parse_key(path, line, key, v)?;
                scene_touched = true;
            }

            "ingest_target" => ingest_target = Some(PathBuf::from(v)),
            "ingest_source" => ingest_source = Some(PathBuf::from(v)),
            "ingest_intrinsics" => ingest_intrinsics = Some(PathBuf::from(v)),
            "ingest_depth_target" => ingest_extra.depth_t = Some(PathBuf::from(v)),
            "ingest_depth_source" => ingest_extra.depth_s = Some(PathBuf::from(v)),
            "ingest_depth_scale" => {
                ingest_extra.depth_scale = Some(parse_key(path, line, key, v)?)
            }
            "ingest_pose" => ingest_extra.pose = Some(PathBuf::from(v)),
            "ingest_brightness" => ingest_extra.brightness = Some(PathBuf::from(v)),

            other => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("unknown configuration key `{other}`"),
                ))
            }
        }
    }

    if let Some(kind) = &layout_kind {
        scene.layout = match kind.as_str() {
            "single-plane" => Layout::SinglePlane {
                depth: depth.unwrap_or(4.0),
            },
            "two-plane-occluder" => {
                let r = rect.unwrap_or(vec![-1.0, 0.6, -1.0, 0.6]);
                if r.len() != 4 {
                    return Err(Error::parse(
                        path,
                        0,
                        "scene_rect needs 4 comma-separated numbers",
                    ));
                }
                Layout::TwoPlaneOccluder {
                    near_depth: near_depth.unwrap_or(3.0),
                    far_depth: far_depth.unwrap_or(6.0),
                    rect: [r[0], r[1], r[2], r[3]],
                }
            }
            "staircase" => {
                let depths = steps_list.clone().unwrap_or(vec![3.0, 4.5, 6.0]);
                let edges = edges_list.clone().unwrap_or_else(|| {
                    // Evenly split the central field of view.
                    let n = depths.len() - 1;
                    (1..=n)
                        .map(|i| -0.3 + 0.6 * i as f64 / (n as f64 + 1.0))
                        .collect()
                });
                Layout::Staircase { depths, edges }
            }
            "sphere-field" => {
                let flat = spheres.unwrap_or(vec![0.0, 0.0, 4.0, 1.0]);
                if flat.len() % 4 != 0 || flat.is_empty() {
                    return Err(Error::parse(
                        path,
                        0,
                        "scene_spheres needs groups of `x,y,z,r`",
                    ));
                }
                Layout::SphereField {
                    spheres: flat
                        .chunks(4)
                        .map(|c| ([c[0], c[1], c[2]], c[3]))
                        .collect(),
                    background_depth: background_depth.unwrap_or(8.0),
                }
            }
            other => {
                return Err(Error::parse(
                    path,
                    0,
                    format!("unknown scene_layout `{other}`"),
                ))
            }
        };
    } else if depth.is_some() {
        scene.layout = Layout::SinglePlane {
            depth: depth.unwrap(),
        };
    }
    if let Some(kind) = &texture_kind {
        let s = texture_scale.unwrap_or(1.5);
        scene.texture = match kind.as_str() {
            "checker" => Texture::Checker { scale: s },
            "noise" => Texture::ValueNoise { scale: s },
            "stripes" => Texture::Stripes { scale: s },
            other => {
                return Err(Error::parse(
                    path,
                    0,
                    format!("unknown scene_texture `{other}`"),
                ))
            }
        };
    } else if let Some(s) = texture_scale {
        scene.texture = match scene.texture {
            Texture::Checker { .. } => Texture::Checker { scale: s },
            Texture::ValueNoise { .. } => Texture::ValueNoise { scale: s },
            Texture::Stripes { .. } => Texture::Stripes { scale: s },
        };
    }
    scene.depth_range = (cfg.fit.z_min, cfg.fit.z_max);
    // The scene seed follows the master seed unless pinned explicitly.
    if kv.contains_key("seed") && !kv.contains_key("scene_seed") {
        scene.seed = cfg.fit.seed;
    }

    let ingesting =
        ingest_target.is_some() || ingest_source.is_some() || ingest_intrinsics.is_some();
    if ingesting {
        let (Some(target), Some(source), Some(intrinsics)) =
            (ingest_target, ingest_source, ingest_intrinsics)
        else {
            return Err(Error::parse(
                path,
                0,
                "ingest needs ingest_target, ingest_source, and ingest_intrinsics",
            ));
        };
        if scene_touched {
            return Err(Error::parse(
                path,
                0,
                "scene_* keys conflict with ingest_* keys",
            ));
        }
        cfg.source = PairSource::Ingest {
            target,
            source,
            intrinsics,
            extra: ingest_extra,
        };
    } else {
        match &cfg.source {
            PairSource::Ingest { .. } if scene_touched => {
                return Err(Error::parse(
                    path,
                    0,
                    "scene_* keys conflict with the configured ingest source",
                ));
            }
            // Overrides without source keys leave an ingest source alone.
            PairSource::Ingest { .. } => {}
            PairSource::Synthetic(_) => cfg.source = PairSource::Synthetic(scene),
        }
    }
    Ok(())
}

/// Echo of the effective configuration, parseable by `parse_experiment_config`.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let f = &cfg.fit;
    let mut s = String::new();
    s.push_str(&format!("k_planes = {}\n", f.k_planes));
    s.push_str(&format!("z_min = {}\n", f.z_min));
    s.push_str(&format!("z_max = {}\n", f.z_max));
    s.push_str(&format!(
        "plane_mode = {}\n",
        match f.plane_mode {
            PlaneMode::StratifiedRandom => "stratified",
            PlaneMode::Midpoint => "midpoint",
        }
    ));
    s.push_str(&format!("alpha = {}\n", f.loss_weights.alpha));
    s.push_str(&format!("beta = {}\n", f.loss_weights.beta));
    s.push_str(&format!("eta = {}\n", f.loss_weights.eta));
    match f.gamma {
        Some(g) => s.push_str(&format!("gamma = {g}\n")),
        None => s.push_str("gamma = auto\n"),
    }
    s.push_str(&format!("lr_density = {}\n", f.lr_density));
    s.push_str(&format!("lr_pose = {}\n", f.lr_pose));
    s.push_str(&format!("lr_brightness = {}\n", f.lr_brightness));
    s.push_str(&format!("lr_decay = {}\n", f.lr_decay));
    s.push_str(&format!("steps = {}\n", f.steps));
    s.push_str(&format!("seed = {}\n", f.seed));
    s.push_str(&format!("eval_every = {}\n", f.eval_every));
    s.push_str(&format!("freeze_pose = {}\n", f.freeze_pose));
    s.push_str(&format!("freeze_density = {}\n", f.freeze_density));
    s.push_str(&format!("freeze_brightness = {}\n", f.freeze_brightness));
    s.push_str(&format!("init_pose_from_gt = {}\n", f.init_pose_from_gt));
    s.push_str(&format!(
        "init_density_from_gt = {}\n",
        f.init_density_from_gt
    ));
    s.push_str(&format!("init_optical_depth = {}\n", f.init_optical_depth));
    s.push_str(&format!(
        "identity_mask_warmup = {}\n",
        f.identity_mask_warmup
    ));
    s.push_str(&format!("median_scale = {}\n", f.median_scale));
    s.push_str(&format!("eval_min_depth = {}\n", f.eval_clamp.min_depth));
    s.push_str(&format!("eval_max_depth = {}\n", f.eval_clamp.max_depth));
    s.push_str(&format!(
        "smoothness = {}\n",
        match f.smoothness_target {
            SmoothnessTarget::MeanNormalizedDisparity => "disparity",
            SmoothnessTarget::MeanNormalizedDepth => "depth",
        }
    ));
    s.push_str(&format!("normalize_depth = {}\n", f.normalize_depth));
    s.push_str(&format!(
        "disable_occlusion_mask = {}\n",
        f.disable_occlusion_mask
    ));
    s.push_str(&format!("embed_dim = {}\n", f.embed_dim));
    match f.assert_abs_rel_below {
        Some(t) => s.push_str(&format!("assert_abs_rel_below = {t}\n")),
        None => s.push_str("assert_abs_rel_below = none\n"),
    }
    if let Some(dir) = &f.out_dir {
        s.push_str(&format!("out_dir = {}\n", dir.display()));
    }
    if let PairSource::Synthetic(scene) = &cfg.source {
        match &scene.layout {
            Layout::SinglePlane { depth } => {
                s.push_str("scene_layout = single-plane\n");
                s.push_str(&format!("scene_depth = {depth}\n"));
            }
            Layout::TwoPlaneOccluder {
                near_depth,
                far_depth,
                rect,
            } => {
                s.push_str("scene_layout = two-plane-occluder\n");
                s.push_str(&format!("scene_near_depth = {near_depth}\n"));
                s.push_str(&format!("scene_far_depth = {far_depth}\n"));
                s.push_str(&format!(
                    "scene_rect = {},{},{},{}\n",
                    rect[0], rect[1], rect[2], rect[3]
                ));
            }
            Layout::Staircase { depths, edges } => {
                s.push_str("scene_layout = staircase\n");
                let d: Vec<String> = depths.iter().map(|v| v.to_string()).collect();
                let e: Vec<String> = edges.iter().map(|v| v.to_string()).collect();
                s.push_str(&format!("scene_steps = {}\n", d.join(",")));
                s.push_str(&format!("scene_edges = {}\n", e.join(",")));
            }
            Layout::SphereField {
                spheres,
                background_depth,
            } => {
                s.push_str("scene_layout = sphere-field\n");
                let flat: Vec<String> = spheres
                    .iter()
                    .map(|(c, r)| format!("{},{},{},{}", c[0], c[1], c[2], r))
                    .collect();
                s.push_str(&format!("scene_spheres = {}\n", flat.join(";")));
                s.push_str(&format!("scene_background_depth = {background_depth}\n"));
            }
        }
        let (kind, sc) = match scene.texture {
            Texture::Checker { scale } => ("checker", scale),
            Texture::ValueNoise { scale } => ("noise", scale),
            Texture::Stripes { scale } => ("stripes", scale),
        };
        s.push_str(&format!("scene_texture = {kind}\n"));
        s.push_str(&format!("scene_texture_scale = {sc}\n"));
        s.push_str(&format!("scene_width = {}\n", scene.width));
        s.push_str(&format!("scene_height = {}\n", scene.height));
        s.push_str(&format!(
            "scene_rotation_deg = {}\n",
            scene.rotation_mag.to_degrees()
        ));
        s.push_str(&format!("scene_translation = {}\n", scene.translation_mag));
        s.push_str(&format!("scene_gain = {}\n", scene.illumination.0));
        s.push_str(&format!("scene_bias = {}\n", scene.illumination.1));
        s.push_str(&format!("scene_seed = {}\n", scene.seed));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = parse_experiment_config(Path::new("x.cfg"), "bogus_key = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
    }

    #[test]
    fn defaults_round_trip_through_render_and_parse() {
        let cfg = ExperimentConfig::default();
        let text = render_config(&cfg);
        let back = parse_experiment_config(Path::new("echo.cfg"), &text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn scene_keys_assemble_layouts() {
        let text = "scene_layout = two-plane-occluder\nscene_near_depth = 3.5\n\
                    scene_far_depth = 7\nscene_rect = -1,0.5,-1,0.5\nscene_gain = 1.1\n";
        let cfg = parse_experiment_config(Path::new("x.cfg"), text).unwrap();
        match cfg.source {
            PairSource::Synthetic(s) => {
                assert_eq!(s.illumination.0, 1.1);
                match s.layout {
                    Layout::TwoPlaneOccluder {
                        near_depth,
                        far_depth,
                        rect,
                    } => {
                        assert_eq!(near_depth, 3.5);
                        assert_eq!(far_depth, 7.0);
                        assert_eq!(rect, [-1.0, 0.5, -1.0, 0.5]);
                    }
                    other => panic!("wrong layout {other:?}"),
                }
            }
            other => panic!("wrong source {other:?}"),
        }
    }

    #[test]
    fn ingest_and_scene_keys_conflict() {
        let text = "ingest_target = t.png\ningest_source = s.png\n\
                    ingest_intrinsics = k.txt\nscene_gain = 1.2\n";
        assert!(parse_experiment_config(Path::new("x.cfg"), text).is_err());
    }

    #[test]
    fn bad_values_name_the_line() {
        let err =
            parse_experiment_config(Path::new("x.cfg"), "steps = 10\nalpha = zebra\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("alpha"), "{msg}");
    }
}
