//! Synthetic "video" clips from a norm-preserving rotation system.
//!
//! Each frame is rotated by a fixed angle on consecutive coordinate pairs, so
//! the exact continuation of any frame is known and drift can be measured
//! against it along two axes: magnitude and motion.

use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub dim: usize,
    /// Radians per frame.
    pub angle: f64,
    /// Per-frame additive Gaussian noise std.
    pub data_noise: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 8,
            angle: 0.2,
            data_noise: 0.01,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid(format!(
                "frames must be >= 2, got {}",
                self.frames
            )));
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "dim must be even and >= 2, got {}",
                self.dim
            )));
        }
        if !self.angle.is_finite() {
            return Err(Error::invalid("angle must be finite"));
        }
        if !(self.data_noise >= 0.0 && self.data_noise.is_finite()) {
            return Err(Error::invalid(format!(
                "data_noise must be finite and >= 0, got {}",
                self.data_noise
            )));
        }
        Ok(())
    }

    /// Shape of a clip latent: `[frames, dim]`.
    pub fn clip_shape(&self) -> [usize; 2] {
        [self.frames, self.dim]
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        if frame.shape() != [self.dim] {
            return Err(Error::invalid(format!(
                "frame shape {:?} does not match dim {}",
                frame.shape(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// A generated clip together with the `ClipSpec` that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor,
    pub spec: ClipSpec,
}

/// Rotates consecutive coordinate pairs of `frame` by `angle`.
pub fn rotate(frame: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = vec![0.0; frame.len()];
    for (o, x) in out.chunks_exact_mut(2).zip(frame.chunks_exact(2)) {
        o[0] = c * x[0] - s * x[1];
        o[1] = s * x[0] + c * x[1];
    }
    out
}

/// Noise-free continuation of `frame`.
pub fn oracle_next_frame(spec: &ClipSpec, frame: &Tensor) -> Result<Tensor> {
    spec.check_frame(frame)?;
    Tensor::new(vec![spec.dim], rotate(frame.data(), spec.angle))
}

pub fn generate_clip(spec: &ClipSpec, initial_frame: &Tensor, rng: &mut RngState) -> Result<Clip> {
    spec.validate()?;
    spec.check_frame(initial_frame)?;
    let mut data = Vec::with_capacity(spec.frames * spec.dim);
    data.extend_from_slice(initial_frame.data());
    let mut prev = initial_frame.data().to_vec();
    for _ in 1..spec.frames {
        let mut next = rotate(&prev, spec.angle);
        if spec.data_noise > 0.0 {
            let noise = gaussian_sample(&[spec.dim], rng)?;
            for (v, n) in next.iter_mut().zip(noise.data()) {
                *v += spec.data_noise * n;
            }
        }
        data.extend_from_slice(&next);
        prev = next;
    }
    Ok(Clip {
        frames: Tensor::new(vec![spec.frames, spec.dim], data)?,
        spec: *spec,
    })
}

/// Uniformly random point on the unit sphere in `dim` dimensions.
pub fn random_unit_frame(dim: usize, rng: &mut RngState) -> Result<Tensor> {
    loop {
        let g = gaussian_sample(&[dim], rng)?;
        let n = g.norm();
        if n > 1e-12 {
            return g.scale(1.0 / n);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftMetrics {
    pub norm_drift: f64,
    pub step_drift: f64,
}

/// Magnitude and motion drift of `clip` relative to the oracle dynamics.
pub fn drift_metric(clip: &Tensor, reference_norm: f64, spec: &ClipSpec) -> Result<DriftMetrics> {
    if reference_norm.is_nan() || reference_norm <= 0.0 {
        return Err(Error::invalid(format!(
            "reference_norm must be > 0, got {reference_norm}"
        )));
    }
    if clip.shape().len() != 2 || clip.shape()[1] != spec.dim {
        return Err(Error::invalid(format!(
            "clip shape {:?} does not match dim {}",
            clip.shape(),
            spec.dim
        )));
    }
    let frames = clip.rows();
    let norm_drift = (0..frames)
        .map(|i| {
            let n = clip.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - reference_norm).abs() / reference_norm
        })
        .sum::<f64>()
        / frames as f64;
    let step_drift = if frames < 2 {
        0.0
    } else {
        (0..frames - 1)
            .map(|i| {
                let pred = rotate(clip.row_slice(i), spec.angle);
                crate::numerics::squared_distance(&pred, clip.row_slice(i + 1)).sqrt()
                    / reference_norm
            })
            .sum::<f64>()
            / (frames - 1) as f64
    };
    Ok(DriftMetrics {
        norm_drift,
        step_drift,
    })
}
