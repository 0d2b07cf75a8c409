//! Multilayer perceptrons with hand-written reverse mode, the Gaussian
//! residual policy, observation normalization and checkpoint I/O.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Final-layer map applied with the per-output `output_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// `scale * z`
    Linear,
    /// `scale * tanh(z)`
    ScaledTanh,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Input to each layer followed by the final output.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> Option<&[f64]> {
        self.acts.last().map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// Per layer: weights `out x in` row-major, then biases.
    params: Vec<f64>,
    offsets: Vec<usize>,
    hidden: Activation,
    output: OutputKind,
    output_scale: Vec<f64>,
}

fn layout(dims: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut n = 0;
    for w in dims.windows(2) {
        offsets.push(n);
        n += w[0] * w[1] + w[1];
    }
    (offsets, n)
}

impl Mlp {
    /// Glorot-uniform hidden layers and a zero final layer.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: OutputKind,
        output_scale: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let mut net = Self::zeros(dims, hidden, output, output_scale)?;
        let last = dims.len() - 2;
        for l in 0..last {
            net.init_layer(l, rng);
        }
        Ok(net)
    }

    /// Same as `new` but with the final layer initialized like the others.
    pub fn new_dense(
        dims: &[usize],
        hidden: Activation,
        output: OutputKind,
        output_scale: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let mut net = Self::new(dims, hidden, output, output_scale, rng)?;
        net.init_layer(dims.len() - 2, rng);
        Ok(net)
    }

    pub fn zeros(
        dims: &[usize],
        hidden: Activation,
        output: OutputKind,
        output_scale: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(PolicyError::InvalidNetwork(format!("bad layer dims {dims:?}")));
        }
        let out = *dims.last().unwrap();
        if output_scale.len() != out || output_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PolicyError::InvalidNetwork("output_scale must have one positive entry per output".into()));
        }
        let (offsets, n) = layout(dims);
        Ok(Self { dims: dims.to_vec(), params: vec![0.0; n], offsets, hidden, output, output_scale })
    }

    fn init_layer(&mut self, l: usize, rng: &mut impl Rng) {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let start = self.offsets[l];
        for w in &mut self.params[start..start + fan_in * fan_out] {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out] {
            *b = 0.0;
        }
    }

    /// Zeroes the final layer's weights and biases.
    pub fn init_zero_last_layer(&mut self) {
        let start = *self.offsets.last().unwrap();
        for v in &mut self.params[start..] {
            *v = 0.0;
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn output_scale(&self) -> &[f64] {
        &self.output_scale
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    /// Weights and biases of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let s = self.offsets[l];
        (&self.params[s..s + i * o], &self.params[s + i * o..s + i * o + o])
    }

    fn check_input(&self, x: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.dims[0] {
            return Err(PolicyError::DimensionMismatch { expected: self.dims[0], got: x.len() });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer(l);
        let n_in = x.len();
        b.iter()
            .enumerate()
            .map(|(r, bias)| {
                let row = &w[r * n_in..(r + 1) * n_in];
                bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    fn finish(&self, z: f64, i: usize) -> f64 {
        match self.output {
            OutputKind::Linear => self.output_scale[i] * z,
            OutputKind::ScaledTanh => self.output_scale[i] * z.tanh(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_input(x)?;
        let n_layers = self.dims.len() - 1;
        let mut h = x.to_vec();
        for l in 0..n_layers {
            let z = self.affine(l, &h);
            h = if l + 1 == n_layers {
                z.iter().enumerate().map(|(i, v)| self.finish(*v, i)).collect()
            } else {
                z.into_iter().map(|v| self.hidden.apply(v)).collect()
            };
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<(Vec<f64>, Trace), PolicyError> {
        self.check_input(x)?;
        let n_layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let z = self.affine(l, &acts[l]);
            let h = if l + 1 == n_layers {
                z.iter().enumerate().map(|(i, v)| self.finish(*v, i)).collect()
            } else {
                z.into_iter().map(|v| self.hidden.apply(v)).collect()
            };
            acts.push(h);
        }
        let out = acts.last().unwrap().clone();
        Ok((out, Trace { acts }))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward_into(&self, trace: &Trace, grad_out: &[f64], grad: &mut [f64]) -> Result<(), PolicyError> {
        let n_layers = self.dims.len() - 1;
        if trace.acts.len() != n_layers + 1 || trace.acts[0].len() != self.dims[0] {
            return Err(PolicyError::NoForwardRecorded);
        }
        if grad_out.len() != self.output_dim() {
            return Err(PolicyError::DimensionMismatch { expected: self.output_dim(), got: grad_out.len() });
        }
        if grad.len() != self.params.len() {
            return Err(PolicyError::DimensionMismatch { expected: self.params.len(), got: grad.len() });
        }
        let out = &trace.acts[n_layers];
        let mut delta: Vec<f64> = match self.output {
            OutputKind::Linear => grad_out.iter().zip(&self.output_scale).map(|(g, s)| g * s).collect(),
            OutputKind::ScaledTanh => grad_out
                .iter()
                .zip(&self.output_scale)
                .zip(out)
                .map(|((g, s), y)| {
                    let t = y / s;
                    g * s * (1.0 - t * t)
                })
                .collect(),
        };
        for l in (0..n_layers).rev() {
            let input = &trace.acts[l];
            let n_in = input.len();
            let start = self.offsets[l];
            let (w, _) = self.layer(l);
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[start + r * n_in..start + (r + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[start + n_in * delta.len() + r] += d;
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &w[r * n_in..(r + 1) * n_in];
                    for (acc, wv) in next.iter_mut().zip(row) {
                        *acc += d * wv;
                    }
                }
                for (v, a) in next.iter_mut().zip(input) {
                    *v *= self.hidden.slope(*a);
                }
                delta = next;
            }
        }
        Ok(())
    }

    pub fn backward(&self, trace: &Trace, grad_out: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(trace, grad_out, &mut grad)?;
        Ok(grad)
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    action
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - half_log_2pi
        })
        .sum()
}

/// Residual policy: bounded MLP mean and state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl Policy {
    pub fn new(dims: &[usize], output_scale: Vec<f64>, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        let net = Mlp::new(dims, Activation::Tanh, OutputKind::ScaledTanh, output_scale, rng)?;
        let log_std = net.output_scale().iter().map(|s| (0.2 * s).ln()).collect();
        Ok(Self { net, log_std })
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// Sets `std_i = factor * output_scale_i`.
    pub fn set_std_factor(&mut self, factor: f64) {
        self.log_std = self.net.output_scale().iter().map(|s| (factor * s).ln()).collect();
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.net.forward(obs)
    }

    /// Draws an action; `std_override` replaces the stored standard deviation.
    pub fn sample(
        &self,
        obs: &[f64],
        std_override: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, f64), PolicyError> {
        let mean = self.mean(obs)?;
        let std = match std_override {
            Some(s) => s.to_vec(),
            None => self.std(),
        };
        let action: Vec<f64> = mean
            .iter()
            .zip(&std)
            .map(|(m, s)| {
                let n: f64 = StandardNormal.sample(rng);
                m + s * n
            })
            .collect();
        let lp = gaussian_log_prob(&action, &mean, &std);
        Ok((action, lp))
    }
}

/// Running mean and variance of observations, merged batch-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub frozen: bool,
}

impl ObsNormalizer {
    pub const CLIP: f64 = 10.0;

    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 0.0, frozen: false }
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) {
        if self.frozen || batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let dim = self.mean.len();
        let mut mean = vec![0.0; dim];
        for row in batch {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in batch {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        if self.count == 0.0 {
            self.mean = mean;
            self.var = var;
            self.count = n;
            return;
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = mean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + var[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((v, m), s)| ((v - m) / s.max(1e-8).sqrt()).clamp(-Self::CLIP, Self::CLIP))
            .collect()
    }
}

const MAGIC: &[u8; 4] = b"ASRP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian writer for checkpoint records.
pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        let mut e = Self { buf: Vec::new() };
        e.buf.extend_from_slice(MAGIC);
        e.u32(CHECKPOINT_VERSION);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn mlp(&mut self, net: &Mlp) {
        self.u32(net.dims.len() as u32);
        for d in &net.dims {
            self.u32(*d as u32);
        }
        self.u8(net.hidden.code());
        self.u8(match net.output {
            OutputKind::Linear => 0,
            OutputKind::ScaledTanh => 1,
        });
        self.f64s(&net.params);
        self.f64s(&net.output_scale);
    }

    pub fn normalizer(&mut self, n: Option<&ObsNormalizer>) {
        match n {
            None => self.u8(0),
            Some(n) => {
                self.u8(1);
                self.u32(n.mean.len() as u32);
                self.f64s(&n.mean);
                self.f64s(&n.var);
                self.f64s(&[n.count]);
            }
        }
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: &str) -> PolicyError {
    PolicyError::CorruptCheckpoint(msg.to_string())
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self, PolicyError> {
        let mut d = Self { buf, pos: 0 };
        let magic = d.take(4)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, PolicyError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PolicyError> {
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(corrupt("unexpected end of file"));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))).collect()
    }

    pub fn mlp(&mut self) -> Result<Mlp, PolicyError> {
        let n = self.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(corrupt("implausible layer count"));
        }
        let dims: Vec<usize> = (0..n).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        if dims.iter().any(|d| *d == 0 || *d > 1 << 20) {
            return Err(corrupt("implausible layer width"));
        }
        let hidden = Activation::from_code(self.u8()?).ok_or_else(|| corrupt("unknown activation"))?;
        let output = match self.u8()? {
            0 => OutputKind::Linear,
            1 => OutputKind::ScaledTanh,
            _ => return Err(corrupt("unknown output kind")),
        };
        let (offsets, count) = layout(&dims);
        let params = self.f64s(count)?;
        let output_scale = self.f64s(*dims.last().unwrap())?;
        if output_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(corrupt("non-positive output scale"));
        }
        Ok(Mlp { dims, params, offsets, hidden, output, output_scale })
    }

    pub fn normalizer(&mut self) -> Result<Option<ObsNormalizer>, PolicyError> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let dim = self.u32()? as usize;
                let mean = self.f64s(dim)?;
                let var = self.f64s(dim)?;
                let count = self.f64s(1)?[0];
                Ok(Some(ObsNormalizer { mean, var, count, frozen: true }))
            }
            _ => Err(corrupt("bad normalizer flag")),
        }
    }

    pub fn finish(&self) -> Result<(), PolicyError> {
        if self.pos != self.buf.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(())
    }
}

/// Policy plus the observation statistics it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub policy: Policy,
    pub normalizer: Option<ObsNormalizer>,
}

impl PolicyCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.mlp(&self.policy.net);
        e.f64s(&self.policy.log_std);
        e.normalizer(self.normalizer.as_ref());
        e.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut d = Decoder::new(bytes)?;
        let net = d.mlp()?;
        let log_std = d.f64s(net.output_dim())?;
        let normalizer = d.normalizer()?;
        d.finish()?;
        if net.output_kind() != OutputKind::ScaledTanh {
            return Err(corrupt("policy network must use a bounded output"));
        }
        if let Some(n) = &normalizer {
            if n.mean.len() != net.input_dim() {
                return Err(corrupt("normalizer width does not match the network input"));
            }
        }
        Ok(Self { policy: Policy { net, log_std }, normalizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Deterministic action for a raw observation.
    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        match &self.normalizer {
            Some(n) => self.policy.mean(&n.normalize(obs)),
            None => self.policy.mean(obs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let p = Policy::new(&[23, 64, 64, 3], vec![0.1, 0.1, 0.2], &mut rng()).unwrap();
        let mut r = rng();
        for _ in 0..100 {
            let x: Vec<f64> = (0..23).map(|_| r.random_range(-5.0..5.0)).collect();
            assert_eq!(p.mean(&x).unwrap(), vec![0.0; 3]);
        }
        let (w, _) = p.net.layer(0);
        assert!(w.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn outputs_respect_bounds() {
        let scale = vec![0.1, 0.1, 0.2];
        let net = Mlp::new_dense(&[23, 64, 64, 3], Activation::Tanh, OutputKind::ScaledTanh, scale.clone(), &mut rng())
            .unwrap();
        let mut net = net;
        for v in net.params_mut() {
            *v *= 20.0;
        }
        let mut r = rng();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..23).map(|_| r.random_range(-10.0..10.0)).collect();
            for (o, s) in net.forward(&x).unwrap().iter().zip(&scale) {
                assert!(o.abs() <= *s);
            }
        }
    }

    #[test]
    fn hand_built_single_neuron() {
        let mut net = Mlp::zeros(&[1, 1, 1], Activation::Tanh, OutputKind::ScaledTanh, vec![2.0]).unwrap();
        net.params_mut().copy_from_slice(&[0.7, -0.2, 1.3, 0.4]);
        let expected = 2.0 * (1.3 * (0.7f64 * 0.5 - 0.2).tanh() + 0.4).tanh();
        assert!((net.forward(&[0.5]).unwrap()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, OutputKind::Linear, vec![1.0, 1.0]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(PolicyError::DimensionMismatch { .. })));
    }

    #[test]
    fn linear_net_gradient_is_outer_product() {
        let mut net = Mlp::zeros(&[3, 2], Activation::Identity, OutputKind::Linear, vec![1.0, 1.0]).unwrap();
        net.params_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5]);
        let x = [0.3, -1.0, 2.0];
        let (_, trace) = net.forward_trace(&x).unwrap();
        let g = net.backward(&trace, &[2.0, -1.0]).unwrap();
        let expected = [0.6, -2.0, 4.0, -0.3, 1.0, -2.0, 2.0, -1.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let net = Mlp::new_dense(&[4, 5, 2], Activation::Tanh, OutputKind::Linear, vec![1.0, 1.0], &mut rng()).unwrap();
        let (_, trace) = net.forward_trace(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(net.backward(&trace, &[0.0, 0.0]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_needs_trace() {
        let net = Mlp::zeros(&[2, 2], Activation::Tanh, OutputKind::Linear, vec![1.0, 1.0]).unwrap();
        assert!(matches!(net.backward(&Trace::default(), &[1.0, 1.0]), Err(PolicyError::NoForwardRecorded)));
    }

    #[test]
    fn log_prob_at_mean() {
        let p = Policy::new(&[2, 4, 3], vec![0.1, 0.1, 0.2], &mut rng()).unwrap();
        let std = p.std();
        let lp = gaussian_log_prob(&[0.0; 3], &[0.0; 3], &std);
        let expected = -std.iter().map(|s| s.ln()).sum::<f64>() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn vanishing_std_returns_mean() {
        let p = Policy::new(&[2, 4, 3], vec![0.1, 0.1, 0.2], &mut rng()).unwrap();
        let (a, _) = p.sample(&[0.3, 0.1], Some(&[1e-300; 3]), &mut rng()).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-290));
    }

    #[test]
    fn normalizer_merge_matches_batch() {
        let mut r = rng();
        let rows: Vec<Vec<f64>> = (0..300).map(|_| vec![r.random_range(-1.0..3.0), r.random_range(5.0..6.0)]).collect();
        let mut merged = ObsNormalizer::new(2);
        for chunk in rows.chunks(70) {
            merged.update(chunk);
        }
        let mut whole = ObsNormalizer::new(2);
        whole.update(&rows);
        for i in 0..2 {
            assert!((merged.mean[i] - whole.mean[i]).abs() < 1e-12);
            assert!((merged.var[i] - whole.var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = Policy::new(&[23, 8, 8, 3], vec![0.1, 0.1, 0.2], &mut rng()).unwrap();
        for (i, v) in p.net.params_mut().iter_mut().enumerate() {
            *v += 1e-3 * i as f64;
        }
        let mut norm = ObsNormalizer::new(23);
        norm.update(&[vec![1.0; 23], vec![2.0; 23]]);
        let ck = PolicyCheckpoint { policy: p, normalizer: Some(norm) };
        let bytes = ck.to_bytes();
        let back = PolicyCheckpoint::from_bytes(&bytes).unwrap();
        let x = vec![0.37; 23];
        assert_eq!(back.act(&x).unwrap(), ck.act(&x).unwrap());
        assert_eq!(back.policy, ck.policy);

        assert!(matches!(
            PolicyCheckpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(PolicyError::CorruptCheckpoint(_))
        ));
        let mut old = bytes.clone();
        old[4] = 0;
        assert!(matches!(PolicyCheckpoint::from_bytes(&old), Err(PolicyError::VersionMismatch { found: 0, .. })));
    }
}
