//! Small dense-network engine with hand-written reverse-mode gradients.
//!
//! Weights are stored `in x out` so a batch `X` (rows = samples) maps to
//! `X W + b`. Everything is `f64`.

pub mod checkpoint;
pub mod classifier;
pub mod features;
pub mod lipschitz;
pub mod pnn;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub use classifier::SafetyClassifier;
pub use lipschitz::LipschitzCbf;
pub use pnn::{gaussian_nll, Normalizer, Pnn, PnnEnsemble, PnnOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Swish,
    Sigmoid,
    Relu,
}

/// `e^x` by range reduction and a degree-12 polynomial. Branch-free so loops
/// over slices vectorize; relative error below 1e-15.
#[inline]
pub fn exp(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 709.0);
    let y = x * std::f64::consts::LOG2_E + SHIFT;
    let k = y - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ki = y.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(ki.wrapping_add(1023) << 52)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp(-x.abs());
    let num = if x >= 0.0 { 1.0 } else { e };
    num / (1.0 + e)
}

/// `tanh` through a single `exp`; agrees with the library routine to a few ulps.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = exp(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + exp(-x.abs()).ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tanh(x),
            Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Upper bound on |derivative|.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Identity | Activation::Tanh | Activation::Relu => 1.0,
            Activation::Swish => 1.1,
            Activation::Sigmoid => 0.25,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Swish => 2,
            Activation::Sigmoid => 3,
            Activation::Relu => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Swish,
            3 => Activation::Sigmoid,
            4 => Activation::Relu,
            _ => return Err(Error::Checkpoint(format!("unknown activation tag {tag}"))),
        })
    }
}

/// One affine layer. Also used as the gradient / optimizer-moment container.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_in, n_out)),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Per-layer gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Dense::zeros(l.n_in(), l.n_out())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

/// Activations recorded by a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Network output (post-activation of the last layer).
    pub output: Array2<f64>,
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

fn activate_inplace(act: Activation, z: &mut Array2<f64>) {
    let z = z.as_slice_mut().expect("standard layout");
    match act {
        Activation::Identity => {}
        Activation::Tanh => z.iter_mut().for_each(|v| *v = tanh(*v)),
        Activation::Swish => z.iter_mut().for_each(|v| *v *= sigmoid(*v)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
    }
}

const BLOCK: usize = 8;

/// `x W + b` for row-major `x` and `W`. Each row keeps a block of output
/// accumulators in registers while sweeping the inputs; much faster than a
/// general matrix product for the narrow layers used here.
fn affine(x: &Array2<f64>, layer: &Dense) -> Array2<f64> {
    let (rows, n_in) = x.dim();
    let n_out = layer.n_out();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let w = layer.weight.as_standard_layout();
    let ws = w.as_slice().expect("standard layout");
    let b = layer.bias.as_slice().expect("contiguous");
    let mut out = vec![0.0; rows * n_out];
    let full = n_out / BLOCK * BLOCK;
    for (xr, or) in xs.chunks_exact(n_in.max(1)).zip(out.chunks_exact_mut(n_out)) {
        for j0 in (0..full).step_by(BLOCK) {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&b[j0..j0 + BLOCK]);
            for (k, &xv) in xr.iter().enumerate() {
                let wr = &ws[k * n_out + j0..k * n_out + j0 + BLOCK];
                for t in 0..BLOCK {
                    acc[t] += xv * wr[t];
                }
            }
            or[j0..j0 + BLOCK].copy_from_slice(&acc);
        }
        for j in full..n_out {
            let mut a = b[j];
            for (k, &xv) in xr.iter().enumerate() {
                a += xv * ws[k * n_out + j];
            }
            or[j] = a;
        }
    }
    Array2::from_shape_vec((rows, n_out), out).expect("shape")
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut RandomStream) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((n_in, n_out), |_| rng.uniform_range(-bound, bound));
                Dense {
                    weight,
                    bias: Array1::zeros(n_out),
                }
            })
            .collect();
        Self { layers, hidden, output }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in()];
        s.extend(self.layers.iter().map(|l| l.n_out()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.n_out()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&h, layer);
            activate_inplace(self.activation(i), &mut z);
            h = z;
        }
        h
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer);
            let mut y = z.clone();
            activate_inplace(self.activation(i), &mut y);
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Tape { inputs, pre, output: h }
    }

    /// Gradients of a scalar loss given `d_out = dL/d(output)`.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> Grads {
        self.backward_full(tape, d_out).0
    }

    /// Gradients with respect to parameters and to the network input.
    pub fn backward_full(&self, tape: &Tape, d_out: ArrayView2<f64>) -> (Grads, Array2<f64>) {
        let n = self.layers.len();
        let mut layers = Vec::with_capacity(n);
        let last_act = self.output;
        let mut delta = d_out.to_owned();
        if last_act != Activation::Identity {
            ndarray::Zip::from(&mut delta)
                .and(&tape.pre[n - 1])
                .and(&tape.output)
                .for_each(|d, &x, &y| *d *= last_act.derivative(x, y));
        }
        for i in (0..n).rev() {
            let dw = tape.inputs[i].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let d_in = delta.dot(&self.layers[i].weight.t());
            layers.push(Dense { weight: dw, bias: db });
            delta = d_in;
            if i > 0 {
                let act = self.hidden;
                if act != Activation::Identity {
                    ndarray::Zip::from(&mut delta)
                        .and(&tape.pre[i - 1])
                        .and(&tape.inputs[i])
                        .for_each(|d, &x, &y| *d *= act.derivative(x, y));
                }
            }
        }
        layers.reverse();
        (Grads { layers }, delta)
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[k];
                k += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of one parameter block. `t` is the 1-based
/// step index.
/// Subnormals to zero; decaying moments of idle parameters reach them and
/// subnormal arithmetic is very slow.
#[inline]
fn flush(x: f64) -> f64 {
    if x.is_subnormal() {
        0.0
    } else {
        x
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = flush(cfg.beta1 * *mi + (1.0 - cfg.beta1) * g);
        *vi = flush(cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g);
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam state for a [`DenseNet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &DenseNet, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Grads) {
        self.t += 1;
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            adam_step(
                layer.weight.as_slice_mut().expect("contiguous"),
                g.weight.as_standard_layout().as_slice().expect("contiguous"),
                m.weight.as_slice_mut().expect("contiguous"),
                v.weight.as_slice_mut().expect("contiguous"),
                self.t,
                &self.cfg,
            );
            adam_step(
                layer.bias.as_slice_mut().expect("contiguous"),
                g.bias.as_standard_layout().as_slice().expect("contiguous"),
                m.bias.as_slice_mut().expect("contiguous"),
                v.bias.as_slice_mut().expect("contiguous"),
                self.t,
                &self.cfg,
            );
        }
    }
}

/// Build a row-major batch from row slices.
pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R], dim: usize) -> Array2<f64> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        let r = r.as_ref();
        debug_assert_eq!(r.len(), dim);
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), dim), flat).expect("shape")
}
