//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParamVector`]; for each layer the weight
//! matrix (row-major, `out x in`) is followed by its bias. The same layout
//! is written to checkpoints and averaged by the federated aggregator.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"INXW";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Linear,
    Softmax,
}

impl Activation {
    fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation id {id}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl OutputHead {
    fn id(self) -> u8 {
        match self {
            OutputHead::Linear => 0,
            OutputHead::Softmax => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(OutputHead::Linear),
            1 => Ok(OutputHead::Softmax),
            _ => Err(Error::Format(format!("unknown output head id {id}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self> {
        let spec = Self { layer_sizes, activation, output_head };
        spec.validate()?;
        Ok(spec)
    }

    /// `[input, hidden..., output]`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, activation: Activation, output_head: OutputHead) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, activation, output_head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Start of each layer's weight block in the flat vector.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut at = 0;
        for w in self.layer_sizes.windows(2) {
            out.push(at);
            at += (w[0] + 1) * w[1];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// He-uniform weights for relu, Xavier-uniform for tanh; zero biases.
pub fn init(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut r = rng::stream(seed, &[rng::tag::INIT]);
    let mut p = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0] as f64, w[1] as f64);
        let bound = match spec.activation {
            Activation::Relu => (6.0 / fan_in).sqrt(),
            Activation::Tanh => (6.0 / (fan_in + fan_out)).sqrt(),
        };
        p.extend((0..w[0] * w[1]).map(|_| r.random_range(-bound..=bound)));
        p.extend(std::iter::repeat_n(0.0, w[1]));
    }
    ParamVector(p)
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Input followed by every hidden layer's activation output.
    pub activations: Vec<Vec<f64>>,
    /// Pre-head values of the last layer.
    pub logits: Vec<f64>,
    pub output: Vec<f64>,
}

fn check(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape { expected: spec.param_count(), got: params.len() });
    }
    if input.len() != spec.input_dim() {
        return Err(Error::Shape { expected: spec.input_dim(), got: input.len() });
    }
    Ok(())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `log(softmax(z))` computed stably.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub fn forward_trace(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Trace> {
    check(params, spec, input)?;
    let p = &params.0;
    let last = spec.num_layers() - 1;
    let mut activations = Vec::with_capacity(spec.num_layers());
    activations.push(input.to_vec());
    let mut logits = Vec::new();
    for (l, at) in spec.offsets().into_iter().enumerate() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let x = activations.last().expect("non-empty");
        let (w, b) = p[at..at + (n_in + 1) * n_out].split_at(n_in * n_out);
        let z: Vec<f64> = (0..n_out)
            .map(|o| w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o])
            .collect();
        if l == last {
            logits = z;
        } else {
            activations.push(z.into_iter().map(|v| spec.activation.apply(v)).collect());
        }
    }
    let output = match spec.output_head {
        OutputHead::Linear => logits.clone(),
        OutputHead::Softmax => softmax(&logits),
    };
    Ok(Trace { activations, logits, output })
}

pub fn forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    forward_trace(params, spec, input).map(|t| t.output)
}

/// Adds the gradient of `upstream . logits` to `grad`, reusing a trace.
pub fn accumulate_logit_grad(params: &ParamVector, spec: &MlpSpec, trace: &Trace, upstream: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(upstream.len(), spec.output_dim());
    debug_assert_eq!(grad.len(), params.len());
    let p = &params.0;
    let offsets = spec.offsets();
    let mut delta = upstream.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let at = offsets[l];
        let x = &trace.activations[l];
        {
            let (gw, gb) = grad[at..at + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                gb[o] += d;
            }
        }
        if l > 0 {
            let w = &p[at..at + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (pv, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *pv += d * wi;
                    }
                }
            }
            for (pv, y) in prev.iter_mut().zip(x) {
                *pv *= spec.activation.grad_from_output(*y);
            }
            delta = prev;
        }
    }
}

/// Maps a gradient on the head output to one on the logits.
pub fn head_to_logit_grad(spec: &MlpSpec, trace: &Trace, upstream: &[f64]) -> Vec<f64> {
    match spec.output_head {
        OutputHead::Linear => upstream.to_vec(),
        OutputHead::Softmax => {
            let p = &trace.output;
            let dot: f64 = upstream.iter().zip(p).map(|(u, q)| u * q).sum();
            p.iter().zip(upstream).map(|(q, u)| q * (u - dot)).collect()
        }
    }
}

/// Exact gradient of `upstream . forward(input)` with respect to the parameters.
pub fn backward(params: &ParamVector, spec: &MlpSpec, input: &[f64], upstream: &[f64]) -> Result<ParamVector> {
    if upstream.len() != spec.output_dim() {
        return Err(Error::Shape { expected: spec.output_dim(), got: upstream.len() });
    }
    let trace = forward_trace(params, spec, input)?;
    let mut grad = vec![0.0; params.len()];
    let dz = head_to_logit_grad(spec, &trace, upstream);
    accumulate_logit_grad(params, spec, &trace, &dz, &mut grad);
    Ok(ParamVector(grad))
}

/// Rescales `grad` so its norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: Optimizer,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            optimizer: Optimizer::Adam,
        }
    }

    pub fn sgd(len: usize, learning_rate: f64) -> Self {
        Self { optimizer: Optimizer::Sgd, ..Self::new(len, learning_rate) }
    }
}

/// One descent step on `params` in place.
pub fn adam_step(params: &mut ParamVector, grad: &[f64], state: &mut AdamState) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape { expected: params.len(), got: grad.len().min(state.m.len()) });
    }
    state.step += 1;
    let lr = state.learning_rate;
    match state.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.0.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            let (b1, b2) = (state.beta1, state.beta2);
            let c1 = 1.0 - b1.powi(state.step as i32);
            let c2 = 1.0 - b2.powi(state.step as i32);
            for i in 0..grad.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let mh = state.m[i] / c1;
                let vh = state.v[i] / c2;
                params.0[i] -= lr * mh / (vh.sqrt() + state.eps);
            }
        }
    }
    Ok(())
}

/// `target <- (1 - tau) target + tau online`.
pub fn polyak_update(target: &mut ParamVector, online: &ParamVector, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::Shape { expected: target.len(), got: online.len() });
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::domain(format!("polyak tau {tau} outside (0, 1]")));
    }
    if tau == 1.0 {
        target.0.copy_from_slice(&online.0);
    } else {
        for (t, o) in target.0.iter_mut().zip(&online.0) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}

/// Binary checkpoint: magic, version, activation id, head id, a reserved
/// byte, layer count and sizes (u32 LE), parameter count (u64 LE), then
/// the parameters as f64 LE.
pub fn encode_checkpoint(spec: &MlpSpec, params: &ParamVector) -> Result<Vec<u8>> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape { expected: spec.param_count(), got: params.len() });
    }
    let mut out = Vec::with_capacity(16 + 4 * spec.layer_sizes.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, spec.activation.id(), spec.output_head.id(), 0]);
    out.extend_from_slice(&(spec.layer_sizes.len() as u32).to_le_bytes());
    for &s in &spec.layer_sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for x in &params.0 {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<(MlpSpec, ParamVector)> {
    fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if b.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, rest) = b.split_at(n);
        *b = rest;
        Ok(head)
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    if take(&mut bytes, 4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let head = take(&mut bytes, 4)?;
    if head[0] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", head[0])));
    }
    let activation = Activation::from_id(head[1])?;
    let output_head = OutputHead::from_id(head[2])?;
    let layers = u32_at(take(&mut bytes, 4)?);
    if layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let layer_sizes = (0..layers).map(|_| take(&mut bytes, 4).map(u32_at)).collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(layer_sizes, activation, output_head).map_err(|e| Error::Format(e.to_string()))?;
    let count = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    if count != spec.param_count() {
        return Err(Error::Format(format!("parameter count {count} does not match layers ({})", spec.param_count())));
    }
    let body = take(&mut bytes, 8 * count)?;
    if !bytes.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((spec, ParamVector(params)))
}

pub fn write_checkpoint(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    let bytes = encode_checkpoint(spec, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(MlpSpec, ParamVector)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
