//! Error injection, bidirectional one-step error curation and the
//! error-recycled training step.
//!
//! Per training sample: draw errors from the bank, corrupt the clean latent,
//! noise and reference, regress the velocity that points back at the *clean*
//! latent, and turn the prediction made on the corrupted input into fresh
//! latent/noise errors for the bank.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::error_bank::{nearest_grid, Availability, CuratedError, ErrorBank};
use crate::flow_matching::{
    interpolate, regression_step, target_velocity, Regression, TrainBatch, TrainSample,
};
use crate::numerics::{RngState, Tensor};
use crate::velocity_net::{OptimizerState, VelocityNetParams};

/// Injection probabilities. `p_clean` is the chance a sample is left
/// untouched; otherwise each channel is corrupted independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectionConfig {
    pub p_vid: f64,
    pub p_img: f64,
    pub p_noi: f64,
    pub p_clean: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            p_vid: 0.9,
            p_img: 0.9,
            p_noi: 0.01,
            p_clean: 0.5,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_vid", self.p_vid),
            ("p_img", self.p_img),
            ("p_noi", self.p_noi),
            ("p_clean", self.p_clean),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Same config with the given channels switched off.
    pub fn without(&self, drop: &[ErrorChannel]) -> Self {
        let mut out = *self;
        for ch in drop {
            match ch {
                ErrorChannel::Img => out.p_img = 0.0,
                ErrorChannel::Vid => out.p_vid = 0.0,
                ErrorChannel::Noi => out.p_noi = 0.0,
            }
        }
        out
    }
}

/// The three injectable error channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorChannel {
    Img,
    Vid,
    Noi,
}

impl ErrorChannel {
    pub fn name(self) -> &'static str {
        match self {
            ErrorChannel::Img => "img",
            ErrorChannel::Vid => "vid",
            ErrorChannel::Noi => "noi",
        }
    }
}

impl FromStr for ErrorChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "img" => Ok(ErrorChannel::Img),
            "vid" => Ok(ErrorChannel::Vid),
            "noi" => Ok(ErrorChannel::Noi),
            other => Err(Error::invalid(format!("unknown error channel `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Indicators {
    pub vid: bool,
    pub noi: bool,
    pub img: bool,
}

impl Indicators {
    pub const CLEAN: Indicators = Indicators {
        vid: false,
        noi: false,
        img: false,
    };

    pub fn case_tag(self) -> CaseTag {
        match (self.vid, self.noi || self.img) {
            (false, false) => CaseTag::Clean,
            (false, true) => CaseTag::StartInjected,
            (true, false) => CaseTag::EndInjected,
            (true, true) => CaseTag::Mixed,
        }
    }
}

/// Which archetypal corruption a sample falls into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseTag {
    Clean,
    /// Only the noise and/or reference were corrupted.
    StartInjected,
    /// Only the latent was corrupted.
    EndInjected,
    Mixed,
}

/// Draws injection indicators. Always consumes four uniforms so that
/// configs differing only in probabilities stay aligned on one stream.
pub fn sample_indicators(
    config: &InjectionConfig,
    available: Availability,
    rng: &mut RngState,
) -> Indicators {
    let clean = rng.bernoulli(config.p_clean);
    let vid = rng.bernoulli(config.p_vid);
    let noi = rng.bernoulli(config.p_noi);
    let img = rng.bernoulli(config.p_img);
    if clean {
        return Indicators::CLEAN;
    }
    Indicators {
        vid: vid && available.vid,
        noi: noi && available.noi,
        img: img && available.img,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTriple {
    pub e_vid: Tensor,
    pub e_noi: Tensor,
    pub e_img: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionOutcome {
    pub x_vid_tilde: Tensor,
    pub x_noi_tilde: Tensor,
    pub x_img_tilde: Tensor,
    pub indicators: Indicators,
    pub case_tag: CaseTag,
}

fn maybe_add(clean: &Tensor, error: &Tensor, on: bool, what: &str) -> Result<Tensor> {
    if clean.shape() != error.shape() {
        return Err(Error::invalid(format!(
            "{what}: error shape {:?} does not match input {:?}",
            error.shape(),
            clean.shape()
        )));
    }
    if on {
        clean.add(error)
    } else {
        Ok(clean.clone())
    }
}

/// Adds each error whose indicator is set; untouched inputs are copied as is.
pub fn inject(
    x_vid: &Tensor,
    x_noi: &Tensor,
    x_img: &Tensor,
    errors: &ErrorTriple,
    indicators: Indicators,
) -> Result<InjectionOutcome> {
    Ok(InjectionOutcome {
        x_vid_tilde: maybe_add(x_vid, &errors.e_vid, indicators.vid, "latent")?,
        x_noi_tilde: maybe_add(x_noi, &errors.e_noi, indicators.noi, "noise")?,
        x_img_tilde: maybe_add(x_img, &errors.e_img, indicators.img, "reference")?,
        indicators,
        case_tag: indicators.case_tag(),
    })
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// One-step forward and backward integration of a constant velocity:
/// returns the predicted clean latent and the predicted start noise.
pub fn approximate_predictions(
    x_t_tilde: &Tensor,
    v_hat: &Tensor,
    t: f64,
) -> Result<(Tensor, Tensor)> {
    check_t(t)?;
    Ok((
        x_t_tilde.add_scaled(v_hat, 1.0 - t)?,
        x_t_tilde.add_scaled(v_hat, -t)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecycledTargets {
    pub v_rcy: Tensor,
    pub x_rcy_vid: Tensor,
    pub x_rcy_noi: Tensor,
}

/// Velocity pointing at the clean latent, and the endpoints it integrates to.
pub fn recycled_targets(
    x_vid: &Tensor,
    x_noi_tilde: &Tensor,
    x_t_tilde: &Tensor,
    t: f64,
) -> Result<RecycledTargets> {
    check_t(t)?;
    let v_rcy = target_velocity(x_vid, x_noi_tilde)?;
    if x_t_tilde.shape() != x_vid.shape() {
        return Err(Error::invalid(format!(
            "state shape {:?} does not match latent {:?}",
            x_t_tilde.shape(),
            x_vid.shape()
        )));
    }
    let x_rcy_noi = x_t_tilde.add_scaled(&v_rcy, -t)?;
    Ok(RecycledTargets {
        v_rcy,
        x_rcy_vid: x_vid.clone(),
        x_rcy_noi,
    })
}

/// `(x_vid_hat - x_rcy_vid, x_noi_hat - x_rcy_noi)`.
pub fn curate_errors(
    x_vid_hat: &Tensor,
    x_noi_hat: &Tensor,
    x_rcy_vid: &Tensor,
    x_rcy_noi: &Tensor,
) -> Result<(Tensor, Tensor)> {
    Ok((x_vid_hat.sub(x_rcy_vid)?, x_noi_hat.sub(x_rcy_noi)?))
}

/// A uniformly chosen frame of a latent error.
pub fn derive_image_error(e_vid: &Tensor, rng: &mut RngState) -> Result<Tensor> {
    if e_vid.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "latent error must be [frames, dim], got {:?}",
            e_vid.shape()
        )));
    }
    e_vid.row(rng.below(e_vid.rows()))
}

/// A sample after injection, ready for the forward pass.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub regression: Regression,
    pub x_vid: Tensor,
    pub x_rcy_noi: Tensor,
    pub case_tag: CaseTag,
}

/// Draws errors from `bank`, injects them and builds the recycled target.
pub fn prepare_sample(
    sample: &TrainSample,
    bank: &ErrorBank,
    config: &InjectionConfig,
    rng: &mut RngState,
) -> Result<PreparedSample> {
    let n = nearest_grid(sample.t, bank.schedule())?;
    let indicators = sample_indicators(config, bank.availability(n)?, rng);
    let e_vid = if indicators.vid {
        bank.sample_vid(n, rng)?
    } else {
        Tensor::zeros(sample.clip.shape())?
    };
    let e_noi = if indicators.noi {
        bank.sample_noi(n, rng)?
    } else {
        Tensor::zeros(sample.noise.shape())?
    };
    let e_img = if indicators.img {
        bank.sample_img(rng)?
    } else {
        Tensor::zeros(sample.reference.shape())?
    };
    let outcome = inject(
        &sample.clip,
        &sample.noise,
        &sample.reference,
        &ErrorTriple {
            e_vid,
            e_noi,
            e_img,
        },
        indicators,
    )?;
    let x_t_tilde = interpolate(&outcome.x_vid_tilde, &outcome.x_noi_tilde, sample.t)?;
    let targets = recycled_targets(&sample.clip, &outcome.x_noi_tilde, &x_t_tilde, sample.t)?;
    Ok(PreparedSample {
        regression: Regression {
            x_t: x_t_tilde,
            reference: outcome.x_img_tilde,
            condition: sample.condition.clone(),
            t: sample.t,
            target: targets.v_rcy,
        },
        x_vid: targets.x_rcy_vid,
        x_rcy_noi: targets.x_rcy_noi,
        case_tag: outcome.case_tag,
    })
}

/// Errors implied by predicting `v_hat` on a prepared sample.
pub fn curate_prepared(prepared: &PreparedSample, v_hat: &Tensor) -> Result<CuratedError> {
    let r = &prepared.regression;
    let (x_vid_hat, x_noi_hat) = approximate_predictions(&r.x_t, v_hat, r.t)?;
    let (e_vid, e_noi) =
        curate_errors(&x_vid_hat, &x_noi_hat, &prepared.x_vid, &prepared.x_rcy_noi)?;
    Ok(CuratedError {
        t: r.t,
        e_vid,
        e_noi,
    })
}

/// Splits `len` samples over `workers` contiguous shards, earlier shards
/// taking the remainder.
pub fn shard_bounds(len: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / workers;
    let extra = len % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let size = base + usize::from(w < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// One error-recycled optimizer step over a batch sharded across simulated
/// workers. Worker `w` injects from `banks[w]` with `rngs[w]`. Gradients are
/// averaged over the whole batch, like synchronous data parallelism.
///
/// Returns the pre-step loss and each worker's curated errors. Curation uses
/// the same forward pass as the loss.
pub fn erft_train_step_sharded(
    params: &mut VelocityNetParams,
    opt: &mut OptimizerState,
    batch: &TrainBatch,
    banks: &[ErrorBank],
    config: &InjectionConfig,
    lr: f64,
    rngs: &mut [RngState],
) -> Result<(f64, Vec<Vec<CuratedError>>)> {
    config.validate()?;
    if banks.is_empty() || banks.len() != rngs.len() {
        return Err(Error::invalid(format!(
            "{} banks for {} worker rngs",
            banks.len(),
            rngs.len()
        )));
    }
    let shards = shard_bounds(batch.len(), banks.len());
    let mut prepared = Vec::with_capacity(batch.len());
    for ((range, bank), rng) in shards.iter().zip(banks).zip(rngs.iter_mut()) {
        for sample in &batch.samples[range.clone()] {
            prepared.push(prepare_sample(sample, bank, config, rng)?);
        }
    }
    let items: Vec<Regression> = prepared.iter().map(|p| p.regression.clone()).collect();
    let (loss, predictions) = regression_step(params, opt, &items, lr)?;
    let curated = shards
        .iter()
        .map(|range| {
            range
                .clone()
                .map(|i| curate_prepared(&prepared[i], &predictions[i]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, curated))
}

/// Single-worker error-recycled step.
pub fn erft_train_step(
    params: &mut VelocityNetParams,
    opt: &mut OptimizerState,
    batch: &TrainBatch,
    bank: &ErrorBank,
    config: &InjectionConfig,
    lr: f64,
    rng: &mut RngState,
) -> Result<(f64, Vec<CuratedError>)> {
    let (loss, mut curated) = erft_train_step_sharded(
        params,
        opt,
        batch,
        std::slice::from_ref(bank),
        config,
        lr,
        std::slice::from_mut(rng),
    )?;
    Ok((loss, curated.pop().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_bank::Channel;
    use crate::flow_matching::{fm_train_step, sample_batch, TimestepSchedule};
    use crate::numerics::gaussian_sample;
    use crate::synth_data::ClipSpec;
    use crate::velocity_net::{init_params, NetDims, OptimizerKind};

    fn v1(x: f64) -> Tensor {
        Tensor::vector(&[x]).unwrap()
    }

    #[test]
    fn indicator_edge_cases() {
        let mut rng = RngState::new(1);
        let forced_clean = InjectionConfig {
            p_clean: 1.0,
            p_vid: 1.0,
            p_img: 1.0,
            p_noi: 1.0,
        };
        let degenerate = InjectionConfig {
            p_clean: 0.0,
            p_vid: 1.0,
            p_img: 1.0,
            p_noi: 0.0,
        };
        for _ in 0..200 {
            assert_eq!(
                sample_indicators(&forced_clean, Availability::ALL, &mut rng),
                Indicators::CLEAN
            );
            assert_eq!(
                sample_indicators(&degenerate, Availability::NONE, &mut rng),
                Indicators::CLEAN
            );
            assert_eq!(
                sample_indicators(&degenerate, Availability::ALL, &mut rng),
                Indicators {
                    vid: true,
                    noi: false,
                    img: true
                }
            );
        }
    }

    #[test]
    fn clean_probability_frequency() {
        let mut rng = RngState::new(2);
        let cfg = InjectionConfig {
            p_clean: 0.5,
            p_vid: 1.0,
            p_img: 0.0,
            p_noi: 0.0,
        };
        let injected = (0..10_000)
            .filter(|_| sample_indicators(&cfg, Availability::ALL, &mut rng).vid)
            .count();
        assert!((injected as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn inject_examples() {
        let errors = ErrorTriple {
            e_vid: v1(0.5),
            e_noi: v1(0.25),
            e_img: v1(-0.3),
        };
        let clean = inject(&v1(2.0), &v1(0.1), &v1(1.0), &errors, Indicators::CLEAN).unwrap();
        assert_eq!(clean.x_vid_tilde, v1(2.0));
        assert_eq!(clean.x_noi_tilde, v1(0.1));
        assert_eq!(clean.x_img_tilde, v1(1.0));
        assert_eq!(clean.case_tag, CaseTag::Clean);

        let vid = Indicators {
            vid: true,
            ..Indicators::CLEAN
        };
        let out = inject(&v1(2.0), &v1(0.1), &v1(1.0), &errors, vid).unwrap();
        assert_eq!(out.x_vid_tilde, v1(2.5));
        assert_eq!(out.case_tag, CaseTag::EndInjected);

        let img = Indicators {
            img: true,
            ..Indicators::CLEAN
        };
        let out = inject(&v1(2.0), &v1(0.1), &v1(1.0), &errors, img).unwrap();
        assert!((out.x_img_tilde.data()[0] - 0.7).abs() < 1e-15);
        assert_eq!(out.x_vid_tilde, v1(2.0));
        assert_eq!(out.x_noi_tilde, v1(0.1));
        assert_eq!(out.case_tag, CaseTag::StartInjected);

        let all = Indicators {
            vid: true,
            noi: true,
            img: false,
        };
        assert_eq!(all.case_tag(), CaseTag::Mixed);

        let bad = ErrorTriple {
            e_vid: Tensor::vector(&[1.0, 2.0]).unwrap(),
            ..errors
        };
        assert!(inject(&v1(2.0), &v1(0.1), &v1(1.0), &bad, Indicators::CLEAN).is_err());
    }

    #[test]
    fn approximate_predictions_examples() {
        let x = Tensor::vector(&[1.0, -2.0]).unwrap();
        let v = Tensor::vector(&[3.0, 0.5]).unwrap();
        let (vid, _) = approximate_predictions(&x, &v, 1.0).unwrap();
        assert_eq!(vid, x);
        let (_, noi) = approximate_predictions(&x, &v, 0.0).unwrap();
        assert_eq!(noi, x);
        let (vid, noi) = approximate_predictions(&v1(1.0), &v1(3.0), 0.5).unwrap();
        assert_eq!(vid, v1(2.5));
        assert_eq!(noi, v1(-0.5));
        assert!(approximate_predictions(&x, &v, 1.2).is_err());
    }

    #[test]
    fn recycled_target_cases() {
        // (a) clean
        let x_t = interpolate(&v1(2.0), &v1(0.0), 0.3).unwrap();
        let a = recycled_targets(&v1(2.0), &v1(0.0), &x_t, 0.3).unwrap();
        assert_eq!(a.v_rcy, v1(2.0));
        assert_eq!(a.x_rcy_vid, v1(2.0));
        assert!(a.x_rcy_noi.data()[0].abs() < 1e-15);
        // (b) start point injected
        let x_t = interpolate(&v1(2.0), &v1(0.5), 0.5).unwrap();
        let b = recycled_targets(&v1(2.0), &v1(0.5), &x_t, 0.5).unwrap();
        assert!((b.x_rcy_noi.data()[0] - 0.5).abs() < 1e-15);
        // (c) end point injected
        let x_t = interpolate(&v1(2.4), &v1(0.0), 0.5).unwrap();
        assert!((x_t.data()[0] - 1.2).abs() < 1e-15);
        let c = recycled_targets(&v1(2.0), &v1(0.0), &x_t, 0.5).unwrap();
        assert_eq!(c.v_rcy, v1(2.0));
        assert_eq!(c.x_rcy_vid, v1(2.0));
        assert!((c.x_rcy_noi.data()[0] - 0.2).abs() < 1e-15);

        assert!(
            recycled_targets(&v1(2.0), &Tensor::vector(&[0.0, 1.0]).unwrap(), &x_t, 0.5).is_err()
        );
    }

    #[test]
    fn curate_examples() {
        let (e_vid, e_noi) = curate_errors(&v1(2.5), &v1(-0.5), &v1(2.0), &v1(0.0)).unwrap();
        assert_eq!(e_vid, v1(0.5));
        assert_eq!(e_noi, v1(-0.5));
        assert!(curate_errors(
            &v1(1.0),
            &v1(1.0),
            &Tensor::vector(&[1.0, 2.0]).unwrap(),
            &v1(0.0)
        )
        .is_err());
    }

    #[test]
    fn perfect_prediction_curates_zero() {
        let mut rng = RngState::new(6);
        let x_vid = gaussian_sample(&[3, 2], &mut rng).unwrap();
        let x_noi = gaussian_sample(&[3, 2], &mut rng).unwrap();
        let t = 0.37;
        let x_t = interpolate(&x_vid, &x_noi, t).unwrap();
        let v = target_velocity(&x_vid, &x_noi).unwrap();
        let rt = recycled_targets(&x_vid, &x_noi, &x_t, t).unwrap();
        let (vh, nh) = approximate_predictions(&x_t, &v, t).unwrap();
        let (e_vid, e_noi) = curate_errors(&vh, &nh, &rt.x_rcy_vid, &rt.x_rcy_noi).unwrap();
        assert!(e_vid
            .data()
            .iter()
            .chain(e_noi.data())
            .all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn image_error_slices() {
        let single = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            derive_image_error(&single, &mut RngState::new(0))
                .unwrap()
                .data(),
            &[1.0, 2.0, 3.0]
        );
        let zero = Tensor::zeros(&[4, 2]).unwrap();
        assert_eq!(
            derive_image_error(&zero, &mut RngState::new(0)).unwrap(),
            Tensor::zeros(&[2]).unwrap()
        );
        let frames = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut rng = RngState::new(5);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[derive_image_error(&frames, &mut rng).unwrap().data()[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn shards_cover_batch() {
        assert_eq!(shard_bounds(10, 4), vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(shard_bounds(2, 4), vec![0..1, 1..2, 2..2, 2..2]);
    }

    fn setup() -> (ClipSpec, TimestepSchedule, NetDims) {
        let spec = ClipSpec {
            frames: 4,
            dim: 2,
            ..ClipSpec::default()
        };
        let dims = NetDims {
            frames: 4,
            dim: 2,
            cond_dim: 0,
            hidden_layers: 1,
            width: 12,
        };
        (spec, TimestepSchedule::default(), dims)
    }

    #[test]
    fn forced_clean_matches_baseline() {
        let (spec, sched, dims) = setup();
        let p0 = init_params(dims, &mut RngState::new(1)).unwrap();
        let mut fm = p0.clone();
        let mut er = p0;
        let mut opt_fm = OptimizerState::new(OptimizerKind::adam(), fm.len());
        let mut opt_er = OptimizerState::new(OptimizerKind::adam(), er.len());
        let mut bank = ErrorBank::new(sched, 50).unwrap();
        let cfg = InjectionConfig {
            p_clean: 1.0,
            ..InjectionConfig::default()
        };
        let mut data = RngState::new(2);
        let mut inj = RngState::new(3);
        for _ in 0..30 {
            let batch = sample_batch(&spec, &sched, 6, &mut data).unwrap();
            let l_fm = fm_train_step(&mut fm, &mut opt_fm, &batch, 1e-3).unwrap();
            let (l_er, curated) =
                erft_train_step(&mut er, &mut opt_er, &batch, &bank, &cfg, 1e-3, &mut inj).unwrap();
            assert_eq!(l_fm, l_er);
            assert_eq!(curated.len(), 6);
            for c in &curated {
                bank.bank(c).unwrap();
            }
        }
        assert_eq!(fm, er);
    }

    #[test]
    fn zero_lr_still_curates() {
        let (spec, sched, dims) = setup();
        let mut p = init_params(dims, &mut RngState::new(1)).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(OptimizerKind::adam(), p.len());
        let bank = ErrorBank::new(sched, 50).unwrap();
        let batch = sample_batch(&spec, &sched, 5, &mut RngState::new(4)).unwrap();
        let (_, curated) = erft_train_step(
            &mut p,
            &mut opt,
            &batch,
            &bank,
            &InjectionConfig::default(),
            0.0,
            &mut RngState::new(0),
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(curated.len(), 5);
        assert!(curated.iter().all(|c| c.e_vid.norm() > 0.0));
    }

    #[test]
    fn hand_built_sample_end_to_end() {
        // frames = dim = 1, zero network except the output bias = 3 so v_hat = [3].
        let dims = NetDims {
            frames: 1,
            dim: 1,
            cond_dim: 0,
            hidden_layers: 0,
            width: 0,
        };
        let mut values = vec![0.0; dims.param_count()];
        *values.last_mut().unwrap() = 3.0;
        let mut p = VelocityNetParams::from_values(dims, values).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::adam(), p.len());
        let sched = TimestepSchedule::new(1000, 50).unwrap();
        let bank = ErrorBank::new(sched, 5).unwrap();
        // x_vid = 2, x_noi = 0, t = 0.5: x_t = 1, x_vid_hat = 2.5, x_noi_hat = -0.5
        let batch = TrainBatch {
            samples: vec![TrainSample {
                clip: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
                reference: v1(0.0),
                condition: None,
                noise: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
                t: 0.5,
            }],
        };
        let (loss, curated) = erft_train_step(
            &mut p,
            &mut opt,
            &batch,
            &bank,
            &InjectionConfig::default(),
            0.0,
            &mut RngState::new(0),
        )
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert!((curated[0].e_vid.data()[0] - 0.5).abs() < 1e-12);
        assert!((curated[0].e_noi.data()[0] + 0.5).abs() < 1e-12);
        assert_eq!(curated[0].t, 0.5);
    }

    #[test]
    fn injected_samples_use_bank_errors() {
        let (spec, sched, _) = setup();
        let mut bank = ErrorBank::new(sched, 5).unwrap();
        let err = Tensor::new(vec![4, 2], vec![0.25; 8]).unwrap();
        for n in 0..sched.n_test {
            bank.update(Channel::Vid, n, err.clone()).unwrap();
            bank.update(Channel::Noi, n, err.clone()).unwrap();
        }
        let cfg = InjectionConfig {
            p_clean: 0.0,
            p_vid: 1.0,
            p_img: 1.0,
            p_noi: 1.0,
        };
        let batch = sample_batch(&spec, &sched, 3, &mut RngState::new(1)).unwrap();
        for s in &batch.samples {
            let prep = prepare_sample(s, &bank, &cfg, &mut RngState::new(2)).unwrap();
            assert_eq!(prep.case_tag, CaseTag::Mixed);
            let expected_ref = s
                .reference
                .add(&Tensor::vector(&[0.25, 0.25]).unwrap())
                .unwrap();
            assert_eq!(prep.regression.reference, expected_ref);
            // target points at the clean latent from the corrupted noise
            let noise_tilde = s.noise.add(&err).unwrap();
            assert_eq!(prep.regression.target, s.clip.sub(&noise_tilde).unwrap());
            // case (b)/(c) identity: backward integral of the target from x_t
            let back = prep
                .regression
                .x_t
                .add_scaled(&prep.regression.target, -s.t)
                .unwrap();
            assert_eq!(back, prep.x_rcy_noi);
        }
    }
}
