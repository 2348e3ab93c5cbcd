//! Autoregressive multi-clip generation and drift statistics.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::error_recycling::ErrorChannel;
use crate::flow_matching::{euler_sample, TimestepSchedule};
use crate::numerics::{gaussian_sample, RngState, Tensor};
use crate::synth_data::{drift_metric, rotate, ClipSpec, DriftMetrics};
use crate::velocity_net::{NetInput, VelocityField, VelocityNetParams};

/// How the next clip's reference frame is taken from the previous clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    LastFrame,
    /// Mean of the trailing motion frames.
    MotionFrames,
    /// Always the initial frame; no chaining.
    FixedAnchor,
}

impl ReferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceMode::LastFrame => "last_frame",
            ReferenceMode::MotionFrames => "motion_frames",
            ReferenceMode::FixedAnchor => "fixed_anchor",
        }
    }
}

impl FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_frame" => Ok(ReferenceMode::LastFrame),
            "motion_frames" => Ok(ReferenceMode::MotionFrames),
            "fixed_anchor" => Ok(ReferenceMode::FixedAnchor),
            other => Err(Error::invalid(format!("unknown reference mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub num_clips: usize,
    pub motion_frames: usize,
    pub reference_mode: ReferenceMode,
    pub schedule: TimestepSchedule,
}

impl RolloutConfig {
    fn validate(&self, spec: &ClipSpec) -> Result<()> {
        if self.num_clips == 0 {
            return Err(Error::invalid("num_clips must be >= 1"));
        }
        if self.motion_frames == 0 || self.motion_frames > spec.frames {
            return Err(Error::invalid(format!(
                "motion_frames = {} must be in 1..={}",
                self.motion_frames, spec.frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub clips: Vec<Tensor>,
    pub metrics: Vec<DriftMetrics>,
    pub seed: u64,
}

/// Noise-free initial frame for rollout `seed`.
pub fn rollout_initial_frame(dim: usize, seed: u64) -> Result<Tensor> {
    crate::synth_data::random_unit_frame(dim, &mut RngState::stream(seed, 0))
}

/// Next reference frame taken from a finished clip.
pub fn next_reference(clip: &Tensor, initial: &Tensor, config: &RolloutConfig) -> Result<Tensor> {
    let frames = clip.rows();
    match config.reference_mode {
        ReferenceMode::LastFrame => clip.row(frames - 1),
        ReferenceMode::FixedAnchor => Ok(initial.clone()),
        ReferenceMode::MotionFrames => {
            let m = config.motion_frames.min(frames);
            let dim = clip.shape()[1];
            let mut mean = vec![0.0; dim];
            for i in frames - m..frames {
                for (acc, v) in mean.iter_mut().zip(clip.row_slice(i)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            Tensor::new(vec![dim], mean)
        }
    }
}

/// Generates `num_clips` clips, each conditioned on a frame of the previous
/// one. Clip `i` integrates from noise drawn on stream `i + 1` of `seed`.
pub fn generate_long(
    field: &dyn VelocityField,
    spec: &ClipSpec,
    initial_frame: &Tensor,
    condition: Option<&Tensor>,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutTrace> {
    config.validate(spec)?;
    if initial_frame.shape() != [spec.dim] {
        return Err(Error::invalid(format!(
            "initial frame shape {:?} does not match dim {}",
            initial_frame.shape(),
            spec.dim
        )));
    }
    let reference_norm = initial_frame.norm();
    let mut reference = initial_frame.clone();
    let mut clips = Vec::with_capacity(config.num_clips);
    let mut metrics = Vec::with_capacity(config.num_clips);
    for i in 0..config.num_clips {
        let mut rng = RngState::stream(seed, i as u64 + 1);
        let x0 = gaussian_sample(&spec.clip_shape(), &mut rng)?;
        let clip = euler_sample(field, &x0, &reference, condition, &config.schedule).map_err(
            |e| match e {
                Error::SamplingDiverged { reason, .. } => Error::SamplingDiverged {
                    clip: Some(i),
                    reason,
                },
                other => other,
            },
        )?;
        metrics.push(drift_metric(&clip, reference_norm, spec)?);
        reference = next_reference(&clip, initial_frame, config)?;
        clips.push(clip);
    }
    Ok(RolloutTrace {
        clips,
        metrics,
        seed,
    })
}

/// Exact velocity field of the noise-free rotation task: every state is
/// pushed straight at the clip that starts at the reference frame.
#[derive(Clone, Copy, Debug)]
pub struct OracleVelocity {
    pub spec: ClipSpec,
}

impl OracleVelocity {
    pub fn target_clip(&self, reference: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.spec.frames * self.spec.dim);
        let mut frame = reference.data().to_vec();
        for _ in 0..self.spec.frames {
            data.extend_from_slice(&frame);
            frame = rotate(&frame, self.spec.angle);
        }
        Tensor::new(vec![self.spec.frames, self.spec.dim], data)
    }
}

impl VelocityField for OracleVelocity {
    fn velocity(&self, input: &NetInput<'_>) -> Result<Tensor> {
        if input.t >= 1.0 {
            return Err(Error::invalid("oracle velocity is undefined at t = 1"));
        }
        let target = self.target_clip(input.reference)?;
        target.sub(input.noisy_clip)?.scale(1.0 / (1.0 - input.t))
    }
}

/// Per-seed drift curves, the part of a trace the statistics need.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftCurve {
    pub seed: u64,
    pub norm: Vec<f64>,
    pub step: Vec<f64>,
}

impl From<&RolloutTrace> for DriftCurve {
    fn from(t: &RolloutTrace) -> Self {
        DriftCurve {
            seed: t.seed,
            norm: t.metrics.iter().map(|m| m.norm_drift).collect(),
            step: t.metrics.iter().map(|m| m.step_drift).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodStats {
    pub mean_norm: Vec<f64>,
    pub mean_step: Vec<f64>,
    pub terminal_norm: f64,
    pub terminal_step: f64,
    pub norm_slope: f64,
    pub step_slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunComparison {
    pub a: MethodStats,
    pub b: MethodStats,
    /// Seeds where `a` ends with lower norm drift than `b`.
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (num, den) = ys
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (i, y)| {
            let dx = i as f64 - x_mean;
            (num + dx * (y - y_mean), den + dx * dx)
        });
    num / den
}

pub fn method_stats(curves: &[DriftCurve]) -> Result<MethodStats> {
    let k = curves.first().map(|c| c.norm.len()).unwrap_or(0);
    if k == 0
        || curves
            .iter()
            .any(|c| c.norm.len() != k || c.step.len() != k)
    {
        return Err(Error::invalid(
            "curves must be non-empty and share one length",
        ));
    }
    let mean_of = |pick: fn(&DriftCurve) -> &Vec<f64>| -> Vec<f64> {
        (0..k)
            .map(|i| curves.iter().map(|c| pick(c)[i]).sum::<f64>() / curves.len() as f64)
            .collect()
    };
    let mean_norm = mean_of(|c| &c.norm);
    let mean_step = mean_of(|c| &c.step);
    Ok(MethodStats {
        terminal_norm: mean_norm[k - 1],
        terminal_step: mean_step[k - 1],
        norm_slope: ls_slope(&mean_norm),
        step_slope: ls_slope(&mean_step),
        mean_norm,
        mean_step,
    })
}

/// Compares two methods whose curves are paired by position.
pub fn compare_curves(a: &[DriftCurve], b: &[DriftCurve]) -> Result<RunComparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("both methods need at least one run"));
    }
    let (ka, kb) = (a[0].norm.len(), b[0].norm.len());
    if ka != kb {
        return Err(Error::invalid(format!("clip count mismatch: {ka} vs {kb}")));
    }
    let sa = method_stats(a)?;
    let sb = method_stats(b)?;
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        let (ta, tb) = (x.norm[ka - 1], y.norm[kb - 1]);
        if ta < tb {
            wins_a += 1;
        } else if tb < ta {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    Ok(RunComparison {
        a: sa,
        b: sb,
        wins_a,
        wins_b,
        ties,
    })
}

pub fn compare_runs(traces_a: &[RolloutTrace], traces_b: &[RolloutTrace]) -> Result<RunComparison> {
    let a: Vec<DriftCurve> = traces_a.iter().map(DriftCurve::from).collect();
    let b: Vec<DriftCurve> = traces_b.iter().map(DriftCurve::from).collect();
    compare_curves(&a, &b)
}

/// Error-recycled training with the given channels' injection switched off.
pub fn ablate(
    config: &crate::cli_harness::RunConfig,
    drop: &[ErrorChannel],
) -> Result<VelocityNetParams> {
    let mut cfg = config.clone();
    cfg.mode = crate::cli_harness::TrainMode::Erft;
    cfg.drop_errors = drop.to_vec();
    Ok(crate::cli_harness::train(&cfg)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_net::{init_params, NetDims};

    fn noiseless() -> ClipSpec {
        ClipSpec {
            data_noise: 0.0,
            ..ClipSpec::default()
        }
    }

    fn config(k: usize, mode: ReferenceMode) -> RolloutConfig {
        RolloutConfig {
            num_clips: k,
            motion_frames: 5,
            reference_mode: mode,
            schedule: TimestepSchedule::default(),
        }
    }

    struct RepeatReference;
    impl VelocityField for RepeatReference {
        fn velocity(&self, input: &NetInput<'_>) -> Result<Tensor> {
            let frames = input.noisy_clip.rows();
            let target = Tensor::new(
                input.noisy_clip.shape().to_vec(),
                input.reference.data().repeat(frames),
            )?;
            target.sub(input.noisy_clip)?.scale(1.0 / (1.0 - input.t))
        }
    }

    #[test]
    fn single_clip_is_one_euler_call() {
        let spec = ClipSpec::default();
        let p = init_params(NetDims::default(), &mut RngState::new(0)).unwrap();
        let init = rollout_initial_frame(8, 3).unwrap();
        let cfg = config(1, ReferenceMode::LastFrame);
        let trace = generate_long(&p, &spec, &init, None, &cfg, 3).unwrap();
        let x0 = gaussian_sample(&[8, 8], &mut RngState::stream(3, 1)).unwrap();
        let direct = euler_sample(&p, &x0, &init, None, &cfg.schedule).unwrap();
        assert_eq!(trace.clips, vec![direct]);
        assert_eq!(trace.metrics.len(), 1);
    }

    #[test]
    fn identity_chaining_keeps_initial_frame() {
        let spec = noiseless();
        let init = rollout_initial_frame(8, 1).unwrap();
        let trace = generate_long(
            &RepeatReference,
            &spec,
            &init,
            None,
            &config(6, ReferenceMode::LastFrame),
            1,
        )
        .unwrap();
        for clip in &trace.clips {
            for i in 0..clip.rows() {
                for (a, b) in clip.row_slice(i).iter().zip(init.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn last_frame_chaining_is_bit_exact() {
        let spec = ClipSpec::default();
        let p = init_params(NetDims::default(), &mut RngState::new(5)).unwrap();
        let init = rollout_initial_frame(8, 2).unwrap();
        let cfg = config(4, ReferenceMode::LastFrame);
        let trace = generate_long(&p, &spec, &init, None, &cfg, 2).unwrap();
        for i in 1..4 {
            let reference = trace.clips[i - 1].row(7).unwrap();
            let x0 = gaussian_sample(&[8, 8], &mut RngState::stream(2, i as u64 + 1)).unwrap();
            let again = euler_sample(&p, &x0, &reference, None, &cfg.schedule).unwrap();
            assert_eq!(again, trace.clips[i]);
        }
        assert_eq!(
            trace,
            generate_long(&p, &spec, &init, None, &cfg, 2).unwrap()
        );
    }

    #[test]
    fn oracle_field_has_no_drift() {
        let spec = noiseless();
        for mode in [ReferenceMode::LastFrame, ReferenceMode::FixedAnchor] {
            let init = rollout_initial_frame(8, 4).unwrap();
            let trace = generate_long(
                &OracleVelocity { spec },
                &spec,
                &init,
                None,
                &config(20, mode),
                4,
            )
            .unwrap();
            for m in &trace.metrics {
                assert!(m.norm_drift < 1e-6 && m.step_drift < 1e-6, "{m:?}");
            }
        }
    }

    #[test]
    fn motion_frames_reference_is_trailing_mean() {
        let clip = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let init = Tensor::vector(&[9.0, 9.0]).unwrap();
        let mut cfg = config(1, ReferenceMode::MotionFrames);
        cfg.motion_frames = 2;
        assert_eq!(
            next_reference(&clip, &init, &cfg).unwrap().data(),
            &[2.0, 3.0]
        );
        cfg.reference_mode = ReferenceMode::FixedAnchor;
        assert_eq!(next_reference(&clip, &init, &cfg).unwrap(), init);
        cfg.reference_mode = ReferenceMode::LastFrame;
        assert_eq!(
            next_reference(&clip, &init, &cfg).unwrap().data(),
            &[3.0, 4.0]
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let spec = ClipSpec::default();
        let init = rollout_initial_frame(8, 0).unwrap();
        let mut cfg = config(0, ReferenceMode::LastFrame);
        assert!(generate_long(&OracleVelocity { spec }, &spec, &init, None, &cfg, 0).is_err());
        cfg.num_clips = 1;
        cfg.motion_frames = 9;
        assert!(generate_long(&OracleVelocity { spec }, &spec, &init, None, &cfg, 0).is_err());
    }

    fn curve(seed: u64, norm: Vec<f64>) -> DriftCurve {
        DriftCurve {
            seed,
            step: norm.clone(),
            norm,
        }
    }

    #[test]
    fn self_comparison_ties() {
        let runs: Vec<DriftCurve> = (0..3).map(|s| curve(s, vec![0.1, 0.3, 0.2])).collect();
        let c = compare_curves(&runs, &runs).unwrap();
        assert_eq!(c.a, c.b);
        assert_eq!((c.wins_a, c.wins_b, c.ties), (0, 0, 3));
    }

    #[test]
    fn constant_curves_by_hand() {
        let a: Vec<DriftCurve> = (0..5).map(|s| curve(s, vec![0.1; 20])).collect();
        let b: Vec<DriftCurve> = (0..5).map(|s| curve(s, vec![0.2; 20])).collect();
        let c = compare_curves(&a, &b).unwrap();
        assert!(c.a.norm_slope.abs() < 1e-15 && c.b.norm_slope.abs() < 1e-15);
        assert!((c.a.terminal_norm - 0.1).abs() < 1e-15);
        assert!((c.b.terminal_norm - 0.2).abs() < 1e-15);
        assert_eq!(c.wins_a, 5);
    }

    #[test]
    fn linear_curve_slope() {
        let ys: Vec<f64> = (1..=20).map(|i| 0.01 * i as f64).collect();
        assert!((ls_slope(&ys) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let a = vec![curve(0, vec![0.1; 3])];
        let b = vec![curve(0, vec![0.1; 4])];
        assert!(compare_curves(&a, &b).is_err());
        assert!(compare_curves(&a, &[]).is_err());
    }
}
