//! Flat `key = value` run configuration.
//!
//! Defaults < config file < command-line overrides. Every resolved config can
//! be dumped back to the same format and re-parsed to an identical value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::error_recycling::{ErrorChannel, InjectionConfig};
use crate::flow_matching::TimestepSchedule;
use crate::rollout::ReferenceMode;
use crate::synth_data::ClipSpec;
use crate::velocity_net::NetDims;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ERFT_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Baseline,
    Erft,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Erft => "erft",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "erft" => Ok(TrainMode::Erft),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    /// Error channels whose injection is disabled (ablation).
    pub drop_errors: Vec<ErrorChannel>,
    pub injection: InjectionConfig,
    pub max_errors_per_grid: usize,
    pub schedule: TimestepSchedule,
    pub warmup_iterations: usize,
    pub workers: usize,
    pub motion_frames: usize,
    pub reference_mode: ReferenceMode,
    pub learning_rate: f64,
    /// Error-free steps run before `steps`, shared by every mode.
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub clip: ClipSpec,
    pub hidden_layers: usize,
    pub width: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Baseline,
            drop_errors: Vec::new(),
            injection: InjectionConfig::default(),
            max_errors_per_grid: 500,
            schedule: TimestepSchedule::default(),
            warmup_iterations: 20,
            workers: 4,
            motion_frames: 5,
            reference_mode: ReferenceMode::LastFrame,
            learning_rate: 1e-3,
            pretrain_steps: 0,
            steps: 5000,
            batch_size: 16,
            clip: ClipSpec::default(),
            hidden_layers: 2,
            width: 64,
            seed: 0,
            output_dir: std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "mode",
    "drop_errors",
    "noise_error_p",
    "latent_error_p",
    "image_error_p",
    "clean_input_p",
    "max_errors_per_grid",
    "timestep_grids",
    "train_timesteps",
    "warmup_iterations",
    "workers",
    "motion_frames",
    "reference_mode",
    "learning_rate",
    "pretrain_steps",
    "steps",
    "batch_size",
    "frames",
    "dim",
    "angle",
    "data_noise",
    "hidden_layers",
    "width",
    "seed",
    "output_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("cannot parse `{value}`"),
    })
}

impl RunConfig {
    pub fn dims(&self) -> NetDims {
        NetDims {
            frames: self.clip.frames,
            dim: self.clip.dim,
            cond_dim: 0,
            hidden_layers: self.hidden_layers,
            width: self.width,
        }
    }

    /// Injection probabilities after applying `drop_errors`.
    pub fn effective_injection(&self) -> InjectionConfig {
        self.injection.without(&self.drop_errors)
    }

    /// Method label used in metrics files: `baseline`, `erft`, or
    /// `erft-no-img` style for ablations.
    pub fn label(&self) -> String {
        match (self.mode, self.drop_errors.is_empty()) {
            (TrainMode::Erft, false) => {
                let names: Vec<_> = self.drop_errors.iter().map(|c| c.name()).collect();
                format!("erft-no-{}", names.join("-"))
            }
            (mode, _) => mode.name().to_string(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = parse_value(key, value)?,
            "drop_errors" => {
                let mut drop = Vec::new();
                for part in value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty() && *p != "none")
                {
                    drop.push(parse_value::<ErrorChannel>(key, part)?);
                }
                drop.sort();
                drop.dedup();
                self.drop_errors = drop;
            }
            "noise_error_p" => self.injection.p_noi = parse_value(key, value)?,
            "latent_error_p" => self.injection.p_vid = parse_value(key, value)?,
            "image_error_p" => self.injection.p_img = parse_value(key, value)?,
            "clean_input_p" => self.injection.p_clean = parse_value(key, value)?,
            "max_errors_per_grid" => self.max_errors_per_grid = parse_value(key, value)?,
            "timestep_grids" => self.schedule.n_test = parse_value(key, value)?,
            "train_timesteps" => self.schedule.n_train = parse_value(key, value)?,
            "warmup_iterations" => self.warmup_iterations = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "motion_frames" => self.motion_frames = parse_value(key, value)?,
            "reference_mode" => self.reference_mode = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "frames" => self.clip.frames = parse_value(key, value)?,
            "dim" => self.clip.dim = parse_value(key, value)?,
            "angle" => self.clip.angle = parse_value(key, value)?,
            "data_noise" => self.clip.data_noise = parse_value(key, value)?,
            "hidden_layers" => self.hidden_layers = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.name().into(),
            "drop_errors" => {
                let names: Vec<_> = self.drop_errors.iter().map(|c| c.name()).collect();
                names.join(",")
            }
            "noise_error_p" => self.injection.p_noi.to_string(),
            "latent_error_p" => self.injection.p_vid.to_string(),
            "image_error_p" => self.injection.p_img.to_string(),
            "clean_input_p" => self.injection.p_clean.to_string(),
            "max_errors_per_grid" => self.max_errors_per_grid.to_string(),
            "timestep_grids" => self.schedule.n_test.to_string(),
            "train_timesteps" => self.schedule.n_train.to_string(),
            "warmup_iterations" => self.warmup_iterations.to_string(),
            "workers" => self.workers.to_string(),
            "motion_frames" => self.motion_frames.to_string(),
            "reference_mode" => self.reference_mode.name().into(),
            "learning_rate" => self.learning_rate.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "frames" => self.clip.frames.to_string(),
            "dim" => self.clip.dim.to_string(),
            "angle" => self.clip.angle.to_string(),
            "data_noise" => self.clip.data_noise.to_string(),
            "hidden_layers" => self.hidden_layers.to_string(),
            "width" => self.width.to_string(),
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        for (key, p) in [
            ("noise_error_p", self.injection.p_noi),
            ("latent_error_p", self.injection.p_vid),
            ("image_error_p", self.injection.p_img),
            ("clean_input_p", self.injection.p_clean),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(err(key, format!("{p} is outside [0, 1]")));
            }
        }
        let positive = [
            ("max_errors_per_grid", self.max_errors_per_grid),
            ("timestep_grids", self.schedule.n_test),
            ("workers", self.workers),
            ("batch_size", self.batch_size),
            ("motion_frames", self.motion_frames),
            ("hidden_layers", self.hidden_layers),
            ("width", self.width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(err(key, "must be >= 1".into()));
            }
        }
        if self.schedule.n_train < 2 {
            return Err(err("train_timesteps", "must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(err(
                "learning_rate",
                format!("{} must be > 0", self.learning_rate),
            ));
        }
        if self.clip.frames < 2 {
            return Err(err("frames", "must be >= 2".into()));
        }
        if self.clip.dim < 2 || !self.clip.dim.is_multiple_of(2) {
            return Err(err("dim", "must be even and >= 2".into()));
        }
        if !self.clip.angle.is_finite() {
            return Err(err("angle", "must be finite".into()));
        }
        if !(self.clip.data_noise >= 0.0 && self.clip.data_noise.is_finite()) {
            return Err(err("data_noise", "must be finite and >= 0".into()));
        }
        if self.motion_frames > self.clip.frames {
            return Err(err(
                "motion_frames",
                format!(
                    "{} exceeds frames = {}",
                    self.motion_frames, self.clip.frames
                ),
            ));
        }
        if !self.drop_errors.is_empty() && self.mode != TrainMode::Erft {
            return Err(err(
                "drop_errors",
                "only meaningful with mode = erft".into(),
            ));
        }
        Ok(())
    }

    /// The resolved config in the file format, one key per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }
}

/// Applies `key = value` lines from `text` onto `config`.
pub fn apply_text(config: &mut RunConfig, text: &str, path: &Path) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        config.set(key.trim(), value)?;
    }
    Ok(())
}

/// Resolves defaults, then the optional config file, then `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "config".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        apply_text(&mut config, &text, path)?;
    }
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config {
            key: s.into(),
            reason: "override must look like key=value".into(),
        })
}
