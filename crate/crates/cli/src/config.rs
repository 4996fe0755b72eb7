//! Run configuration: INI-style sections of `key = value` lines.
//!
//! Keys and section names are case-insensitive. Unknown sections or keys
//! are rejected so that typos fail loudly. Relative paths are resolved
//! against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use mcball::detector::DetectorConfig;
use mcball::sim::{LookAtPolicy, SimConfig};
use mcball::tracker::{Strategy, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Oracle,
    Template,
}

impl FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" => Ok(Self::Oracle),
            "template" => Ok(Self::Template),
            other => Err(format!("unknown detector '{other}' (expected oracle or template)")),
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::Template => "template",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset directory: written by `simulate`, read by the other commands.
    pub dataset: PathBuf,
    /// Rig file overriding the dataset's own `rig.txt`.
    pub rig: Option<PathBuf>,
    pub strategy: Strategy,
    pub detector: DetectorKind,
    /// Seed of the oracle detector's noise streams; defaults to the
    /// simulation seed.
    pub detector_seed: Option<u64>,
    /// Template radius range in pixels; derived from ground truth if unset.
    pub template_radius: Option<(f64, f64)>,
    pub sim: SimConfig,
    pub tracker: TrackerConfig,
    /// 3D match radius for evaluation, in meters.
    pub eval_distance_m: f64,
    /// Training-loss weight from the original parameter table. Parsed and
    /// reported, never used.
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            rig: None,
            strategy: Strategy::M3,
            detector: DetectorKind::Oracle,
            detector_seed: None,
            template_radius: None,
            sim: SimConfig::default(),
            tracker: TrackerConfig::default(),
            eval_distance_m: 0.5,
            alpha: 0.5,
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("[{section}] {key} = {value}: {e}"))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(format!("[{section}] {key} = {value}: expected a boolean")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| e.to_string())?;
        let mut c = Self::default();
        let mut interval = None;
        for (section, props) in &ini {
            let section = section.unwrap_or("").trim().to_ascii_lowercase();
            for (key, value) in props.iter() {
                let k = key.trim().to_ascii_lowercase();
                c.set(&section, &k, value, base, &mut interval)?;
            }
        }
        if let Some(i) = interval {
            c.strategy = c.strategy.with_interval(i);
        }
        c.validate()?;
        Ok(c)
    }

    fn set(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        base: &Path,
        interval: &mut Option<usize>,
    ) -> Result<(), String> {
        let s = section;
        let sim = &mut self.sim;
        let layout = &mut sim.layout;
        let tr = &mut self.tracker;
        let det: &mut DetectorConfig = &mut tr.detector;
        match (s, key) {
            ("dataset", "dir") => self.dataset = base.join(value.trim()),
            ("dataset", "rig") => self.rig = Some(base.join(value.trim())),

            ("sim", "seed") => sim.seed = parse(s, key, value)?,
            ("sim", "fps") => sim.fps = parse(s, key, value)?,
            ("sim", "n_frames") => sim.n_frames = parse(s, key, value)?,
            ("sim", "render") => sim.render = parse_bool(s, key, value)?,
            ("sim", "ball_radius_m") => sim.ball_radius_m = parse(s, key, value)?,
            ("sim", "occlusion_fraction") => sim.occlusion_fraction = parse(s, key, value)?,
            ("sim", "occlusion_min_len") => sim.occlusion_min_len = parse(s, key, value)?,
            ("sim", "occlusion_max_len") => sim.occlusion_max_len = parse(s, key, value)?,
            ("sim", "distractors") => sim.distractors = parse(s, key, value)?,

            ("rig", "court_length") => layout.court_length = parse(s, key, value)?,
            ("rig", "court_width") => layout.court_width = parse(s, key, value)?,
            ("rig", "n_cameras") => layout.n_cameras = parse(s, key, value)?,
            ("rig", "mount_height") => layout.mount_height = parse(s, key, value)?,
            ("rig", "mount_offset") => layout.mount_offset = parse(s, key, value)?,
            ("rig", "focal_px") => layout.focal_px = parse(s, key, value)?,
            ("rig", "image_width") => layout.image_width = parse(s, key, value)?,
            ("rig", "image_height") => layout.image_height = parse(s, key, value)?,
            ("rig", "min_coverage") => layout.min_coverage = parse(s, key, value)?,
            ("rig", "look_at") => {
                layout.look_at = match value.trim().to_ascii_lowercase().as_str() {
                    "center" => LookAtPolicy::CourtCenter,
                    "zones" => LookAtPolicy::Zones,
                    _ => return Err(format!("[rig] look_at = {value}: expected center or zones")),
                }
            }

            ("noise", "sigma_px") => sim.noise.sigma_px = parse(s, key, value)?,
            ("noise", "p_miss") => sim.noise.p_miss = parse(s, key, value)?,
            ("noise", "lambda_fp") => sim.noise.lambda_fp = parse(s, key, value)?,
            ("noise", "fp_conf_min") => sim.noise.fp_conf_min = parse(s, key, value)?,

            ("detector", "kind") => self.detector = parse(s, key, value)?,
            ("detector", "seed") => self.detector_seed = Some(parse(s, key, value)?),
            ("detector", "det_conf") => det.det_conf = parse(s, key, value)?,
            ("detector", "iou_thd") => det.iou_thd = parse(s, key, value)?,
            ("detector", "resize") => det.input_size = parse(s, key, value)?,
            ("detector", "radius_min") => {
                let r = parse(s, key, value)?;
                self.template_radius = Some((r, self.template_radius.map_or(r, |t| t.1.max(r))));
            }
            ("detector", "radius_max") => {
                let r = parse(s, key, value)?;
                self.template_radius = Some((self.template_radius.map_or(r, |t| t.0.min(r)), r));
            }

            ("tracker", "strategy") => self.strategy = parse(s, key, value)?,
            ("tracker", "interval") => *interval = Some(parse(s, key, value)?),
            ("tracker", "dist_thd") => tr.dist_thd_m = parse(s, key, value)?,
            ("tracker", "near_max_lost") => tr.tiers.near_max_lost = parse(s, key, value)?,
            ("tracker", "far_max_lost") => tr.tiers.far_max_lost = parse(s, key, value)?,
            ("tracker", "near_scale") => tr.tiers.near_scale = parse(s, key, value)?,
            ("tracker", "far_scale") => tr.tiers.far_scale = parse(s, key, value)?,
            ("tracker", "min_window_px") => tr.tiers.min_side_px = parse(s, key, value)?,
            ("tracker", "v_max") => tr.smooth.v_max = parse(s, key, value)?,
            ("tracker", "a_max") => tr.smooth.a_max = parse(s, key, value)?,
            ("tracker", "buffer") => tr.buffer_capacity = parse(s, key, value)?,
            ("tracker", "reproject_scale") => tr.reproject_scale = parse(s, key, value)?,

            ("prefilter", "k_sigma") => tr.prefilter.k_sigma = parse(s, key, value)?,
            ("prefilter", "min_area") => tr.prefilter.min_area = parse(s, key, value)?,
            ("prefilter", "pad") => tr.prefilter.pad = parse(s, key, value)?,
            ("prefilter", "alpha") => tr.prefilter.alpha = parse(s, key, value)?,
            ("prefilter", "refresh_period") => tr.prefilter.refresh_period = parse(s, key, value)?,

            ("eval", "distance") => {
                let cm: f64 = parse(s, key, value)?;
                self.eval_distance_m = cm / 100.0;
            }

            ("training", "alpha") => self.alpha = parse(s, key, value)?,

            ("", _) => return Err(format!("key '{key}' outside any section")),
            _ => return Err(format!("unknown key '{key}' in section [{section}]")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sim.validate().map_err(|e| e.to_string())?;
        let d = &self.tracker.detector;
        if !(0.0..=1.0).contains(&d.det_conf) || !(0.0..=1.0).contains(&d.iou_thd) || d.input_size == 0 {
            return Err("detector: det_conf and iou_thd must lie in [0, 1], resize must be positive".into());
        }
        let t = &self.tracker;
        if !(t.dist_thd_m > 0.0 && self.eval_distance_m > 0.0) {
            return Err("distances must be positive".into());
        }
        if t.tiers.near_max_lost > t.tiers.far_max_lost || !(t.tiers.near_scale > 0.0 && t.tiers.far_scale > 0.0) {
            return Err("tracker: window tiers must satisfy near_max_lost <= far_max_lost and positive scales".into());
        }
        if !(t.smooth.v_max > 0.0 && t.smooth.a_max > 0.0) || t.buffer_capacity < 2 {
            return Err("tracker: v_max and a_max must be positive and buffer at least 2".into());
        }
        if !(t.prefilter.alpha > 0.0 && t.prefilter.alpha <= 1.0) || t.prefilter.refresh_period == 0 {
            return Err("prefilter: alpha must lie in (0, 1] and refresh_period be positive".into());
        }
        if let Some((lo, hi)) = self.template_radius {
            if !(lo > 0.0 && hi >= lo) {
                return Err("detector: template radius range must satisfy 0 < radius_min <= radius_max".into());
            }
        }
        Ok(())
    }
}
