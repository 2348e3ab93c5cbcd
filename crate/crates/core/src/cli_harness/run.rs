//! File-producing entry points behind the CLI subcommands.
//!
//! A training run owns `<output_dir>/<run_id>/` and writes, once:
//! `config.txt`, `losses.csv`, `checkpoint.bin` and, for error-recycled
//! runs, `bank.bin` (worker 0's bank).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::rollout::{generate_long, rollout_initial_frame, RolloutConfig, RolloutTrace};
use crate::synth_data::{generate_clip, random_unit_frame};
use crate::velocity_net::VelocityNetParams;

use super::config::{apply_text, RunConfig, TrainMode};
use super::train::train;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BANK_FILE: &str = "bank.bin";

/// Header of every metrics CSV.
pub const METRICS_HEADER: &str = "run_id,mode,seed,clip_index,norm_drift,step_drift,loss_final";

/// Opens `path` for writing, refusing to touch an existing file.
pub(crate) fn create_new(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create_new(path)?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn default_run_id(config: &RunConfig) -> String {
    format!("{}-s{}", config.label(), config.seed)
}

fn check_run_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && id != "."
        && id != "..";
    if !ok {
        return Err(Error::invalid(format!(
            "run id `{id}` must be non-empty and use only [A-Za-z0-9._-]"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

/// Trains per `config` and writes the run directory.
pub fn run_train(config: &RunConfig, run_id: Option<&str>) -> Result<TrainArtifacts> {
    config.validate()?;
    let run_id = run_id.map_or_else(|| default_run_id(config), str::to_string);
    check_run_id(&run_id)?;
    let run_dir = config.output_dir.join(&run_id);
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    std::fs::create_dir(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_new(&run_dir.join(CONFIG_FILE), config.dump().as_bytes())?;

    let outcome = train(config)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_new(&run_dir.join(LOSSES_FILE), csv.as_bytes())?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    write_new(&checkpoint, &outcome.params.to_bytes())?;
    if config.mode == TrainMode::Erft {
        let bank = match outcome.banks.first() {
            Some(b) => b.clone(),
            None => crate::error_bank::ErrorBank::new(config.schedule, config.max_errors_per_grid)?,
        };
        write_new(&run_dir.join(BANK_FILE), &bank.to_bytes())?;
    }
    Ok(TrainArtifacts {
        run_dir,
        checkpoint,
        losses: outcome.losses,
    })
}

/// Reads the `config.txt` stored next to a checkpoint.
pub fn load_run_config(checkpoint: &Path) -> Result<RunConfig> {
    let path = checkpoint
        .parent()
        .map(|p| p.join(CONFIG_FILE))
        .unwrap_or_else(|| PathBuf::from(CONFIG_FILE));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut config = RunConfig::default();
    apply_text(&mut config, &text, &path)?;
    config.validate()?;
    Ok(config)
}

/// Final training loss recorded next to a checkpoint, if any.
fn final_loss(checkpoint: &Path) -> Option<f64> {
    let path = checkpoint.parent()?.join(LOSSES_FILE);
    let text = std::fs::read_to_string(path).ok()?;
    let last = text.lines().skip(1).filter(|l| !l.is_empty()).last()?;
    last.split_once(',')?.1.parse().ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    /// 1-based.
    pub clip_index: usize,
    pub norm_drift: f64,
    pub step_drift: f64,
    pub loss_final: Option<f64>,
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            self.mode,
            self.seed,
            self.clip_index,
            self.norm_drift,
            self.step_drift,
            self.loss_final.map(|l| l.to_string()).unwrap_or_default()
        )
    }
}

/// Rolls out `clips` clips for every seed and writes the metrics CSV to `out`.
pub fn run_rollout(
    config: &RunConfig,
    checkpoint: &Path,
    clips: usize,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<MetricRow>> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("at least one rollout seed is required"));
    }
    let params = VelocityNetParams::load(checkpoint)?;
    if params.dims() != config.dims() {
        return Err(Error::invalid(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            params.dims(),
            config.dims()
        )));
    }
    let run_id = checkpoint
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let loss_final = final_loss(checkpoint);
    let rc = RolloutConfig {
        num_clips: clips,
        motion_frames: config.motion_frames,
        reference_mode: config.reference_mode,
        schedule: config.schedule,
    };
    let mut rows = Vec::with_capacity(clips * seeds.len());
    for &seed in seeds {
        let trace = rollout_one(&params, config, &rc, seed)?;
        rows.extend(trace.metrics.iter().enumerate().map(|(i, m)| MetricRow {
            run_id: run_id.clone(),
            mode: config.label(),
            seed,
            clip_index: i + 1,
            norm_drift: m.norm_drift,
            step_drift: m.step_drift,
            loss_final,
        }));
    }
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv_line());
        text.push('\n');
    }
    write_new(out, text.as_bytes())?;
    Ok(rows)
}

/// One rollout from the seed's canonical initial frame.
pub fn rollout_one(
    params: &VelocityNetParams,
    config: &RunConfig,
    rc: &RolloutConfig,
    seed: u64,
) -> Result<RolloutTrace> {
    let init = rollout_initial_frame(config.clip.dim, seed)?;
    generate_long(params, &config.clip, &init, None, rc, seed)
}

/// Dumps `count` clips as CSV (`clip,frame,x0,...`).
pub fn gen_data(config: &RunConfig, count: usize, out: &Path) -> Result<()> {
    config.validate()?;
    let mut rng = RngState::stream(config.seed, 2);
    let mut text = String::from("clip,frame");
    for d in 0..config.clip.dim {
        text.push_str(&format!(",x{d}"));
    }
    text.push('\n');
    for c in 0..count {
        let init = random_unit_frame(config.clip.dim, &mut rng)?;
        let clip = generate_clip(&config.clip, &init, &mut rng)?;
        for f in 0..config.clip.frames {
            text.push_str(&format!("{c},{f}"));
            for v in clip.frames.row_slice(f) {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
    }
    write_new(out, text.as_bytes())
}
