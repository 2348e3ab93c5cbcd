//! Fully-connected velocity network with exact reverse-mode gradients.
//!
//! The network sees the flattened noisy clip, the reference frame, an optional
//! condition vector and four sinusoidal features of `t`, and predicts the
//! flattened velocity. Hidden layers use `tanh`; the output layer is linear.
//!
//! Parameters live in one flat `Vec<f64>`. For each layer in order, the weight
//! matrix (row-major, `out x in`) is followed by the bias vector. The same
//! order is used on disk:
//!
//! ```text
//! "ERFT1" | frames, dim, cond_dim, hidden_layers, width (u32 LE) | params (f64 LE)
//! ```

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

const CHECKPOINT_MAGIC: &[u8; 5] = b"ERFT1";
const TIME_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    pub frames: usize,
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 8,
            cond_dim: 0,
            hidden_layers: 2,
            width: 64,
        }
    }
}

impl NetDims {
    pub fn input_len(&self) -> usize {
        self.frames * self.dim + self.dim + self.cond_dim + TIME_FEATURES
    }

    pub fn output_len(&self) -> usize {
        self.frames * self.dim
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.hidden_layers == 0 {
            return vec![(self.input_len(), self.output_len())];
        }
        let mut shapes = vec![(self.input_len(), self.width)];
        shapes.extend(std::iter::repeat_n(
            (self.width, self.width),
            self.hidden_layers - 1,
        ));
        shapes.push((self.width, self.output_len()));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim == 0 || (self.hidden_layers > 0 && self.width == 0) {
            return Err(Error::invalid(format!("degenerate network dims {self:?}")));
        }
        Ok(())
    }
}

/// Network input: `noisy_clip` is `[frames, dim]`, `reference` is `[dim]`.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    pub noisy_clip: &'a Tensor,
    pub reference: &'a Tensor,
    pub condition: Option<&'a Tensor>,
    pub t: f64,
}

/// Anything that can be integrated by the Euler sampler.
pub trait VelocityField {
    fn velocity(&self, input: &NetInput<'_>) -> Result<Tensor>;
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [
        (PI * t).sin(),
        (PI * t).cos(),
        (2.0 * PI * t).sin(),
        (2.0 * PI * t).cos(),
    ]
}

/// Network weights, or a gradient with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNetParams {
    dims: NetDims,
    values: Vec<f64>,
}

/// Result of [`VelocityNetParams::loss_and_grad`].
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: VelocityNetParams,
    /// The forward prediction the loss was computed from.
    pub prediction: Tensor,
}

pub fn init_params(dims: NetDims, rng: &mut RngState) -> Result<VelocityNetParams> {
    dims.validate()?;
    let mut values = Vec::with_capacity(dims.param_count());
    for (fan_in, fan_out) in dims.layer_shapes() {
        let std = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| std * rng.standard_normal()));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(VelocityNetParams { dims, values })
}

impl VelocityNetParams {
    pub fn zeros(dims: NetDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.param_count()],
        })
    }

    pub fn from_values(dims: NetDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn features(&self, input: &NetInput<'_>) -> Result<Vec<f64>> {
        let d = &self.dims;
        if input.noisy_clip.shape() != [d.frames, d.dim] {
            return Err(Error::invalid(format!(
                "noisy clip shape {:?}, network expects [{}, {}]",
                input.noisy_clip.shape(),
                d.frames,
                d.dim
            )));
        }
        if input.reference.shape() != [d.dim] {
            return Err(Error::invalid(format!(
                "reference shape {:?}, network expects [{}]",
                input.reference.shape(),
                d.dim
            )));
        }
        let cond_len = input.condition.map_or(0, Tensor::len);
        if cond_len != d.cond_dim {
            return Err(Error::invalid(format!(
                "condition length {cond_len}, network expects {}",
                d.cond_dim
            )));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::invalid(format!("t = {} outside [0, 1]", input.t)));
        }
        let mut x = Vec::with_capacity(d.input_len());
        x.extend_from_slice(input.noisy_clip.data());
        x.extend_from_slice(input.reference.data());
        if let Some(c) = input.condition {
            x.extend_from_slice(c.data());
        }
        x.extend_from_slice(&time_features(input.t));
        Ok(x)
    }

    /// Runs the network, keeping every layer's activation (input first).
    fn forward_trace(&self, input: &NetInput<'_>) -> Result<Vec<Vec<f64>>> {
        let shapes = self.dims.layer_shapes();
        let last = shapes.len() - 1;
        let mut acts = Vec::with_capacity(shapes.len() + 1);
        acts.push(self.features(input)?);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.values[offset..offset + fan_in * fan_out];
            let b = &self.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let a = &acts[l];
            let mut z: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, &bias)| bias + dot(row, a))
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Ok(acts)
    }

    pub fn forward(&self, input: &NetInput<'_>) -> Result<Tensor> {
        let mut acts = self.forward_trace(input)?;
        let out = acts.pop().expect("network has at least one layer");
        Tensor::new(vec![self.dims.frames, self.dims.dim], out)
    }

    /// Adds `scale * d(mse)/d(params)` into `grads` and returns `(mse, prediction)`.
    pub fn accumulate_grad(
        &self,
        input: &NetInput<'_>,
        target: &Tensor,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<(f64, Tensor)> {
        if target.shape() != [self.dims.frames, self.dims.dim] {
            return Err(Error::invalid(format!(
                "target shape {:?}, network expects [{}, {}]",
                target.shape(),
                self.dims.frames,
                self.dims.dim
            )));
        }
        if grads.len() != self.values.len() {
            return Err(Error::invalid("gradient buffer has the wrong length"));
        }
        let acts = self.forward_trace(input)?;
        let out = acts.last().expect("network has at least one layer");
        let n = out.len() as f64;
        let loss = out
            .iter()
            .zip(target.data())
            .map(|(o, y)| (o - y) * (o - y))
            .sum::<f64>()
            / n;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(target.data())
            .map(|(o, y)| 2.0 * (o - y) / n)
            .collect();

        let shapes = self.dims.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let a_in = &acts[l];
            let (gw, gb) =
                grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for (j, &dj) in delta.iter().enumerate() {
                let sd = scale * dj;
                gb[j] += sd;
                for (g, &a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(a_in) {
                    *g += sd * a;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.values[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                for (p, &wv) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += wv * dj;
                }
            }
            // a_in is tanh of the previous pre-activation here
            for (p, &a) in prev.iter_mut().zip(a_in) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }

        let prediction = Tensor::new(vec![self.dims.frames, self.dims.dim], out.clone())?;
        Ok((loss, prediction))
    }

    pub fn loss_and_grad(&self, input: &NetInput<'_>, target: &Tensor) -> Result<LossAndGrad> {
        let mut grads = Self::zeros(self.dims)?;
        let (loss, prediction) = self.accumulate_grad(input, target, 1.0, &mut grads.values)?;
        Ok(LossAndGrad {
            loss,
            grads,
            prediction,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(5 + 20 + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [d.frames, d.dim, d.cond_dim, d.hidden_layers, d.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        if reader.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch".into()));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = reader.u32()? as usize;
        }
        let dims = NetDims {
            frames: header[0],
            dim: header[1],
            cond_dim: header[2],
            hidden_layers: header[3],
            width: header[4],
        };
        dims.validate().map_err(|e| Error::Format(e.to_string()))?;
        let values = (0..dims.param_count())
            .map(|_| reader.f64())
            .collect::<Result<Vec<_>>>()?;
        reader.finish()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(Self { dims, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl VelocityField for VelocityNetParams {
    fn velocity(&self, input: &NetInput<'_>) -> Result<Tensor> {
        self.forward(input)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Little-endian cursor shared by the checkpoint and bank snapshot readers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for Adam (unused by plain SGD).
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One optimizer update of `params` along `grads`.
pub fn sgd_step(
    params: &mut VelocityNetParams,
    grads: &VelocityNetParams,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    if params.dims != grads.dims || state.m.len() != params.len() {
        return Err(Error::invalid(
            "optimizer/gradient layout does not match params",
        ));
    }
    if let Some(bad) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged(format!(
            "non-finite gradient at parameter {bad}"
        )));
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.values.iter_mut().zip(&grads.values) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for ((p, g), (m, v)) in params
                .values
                .iter_mut()
                .zip(&grads.values)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    if params.values.iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDiverged(
            "non-finite parameter after update".into(),
        ));
    }
    Ok(())
}
