//! Minimal dense-network substrate: forward pass, reverse-mode gradients with
//! respect to both parameters and inputs, and a bias-corrected adaptive-moment
//! optimizer. All arithmetic is `f64`.
//!
//! Every learned model in the pipeline (the denoiser, the instance encoder and
//! bag classifier of the MIL model, the relevance classifier) is a [`DenseNet`].
//!
//! # Container byte layout
//!
//! [`DenseNet::write_container`] / [`DenseNet::read_container`] use a flat
//! little-endian binary container:
//!
//! ```text
//! magic        4 bytes  "PPGN"
//! version      u32      currently 1
//! layer count  u32
//! per layer:
//!   input dim  u32
//!   output dim u32
//!   activation u8       0 = relu, 1 = tanh, 2 = sigmoid, 3 = identity
//!   weights    out*in f64, row-major (row o holds the fan-in of output o)
//!   biases     out f64
//! ```
//!
//! Round-trips are bit-exact. The initialization seed is provenance only and
//! is not persisted.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Element-wise activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation's *output* `y`.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        })
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One standard normal draw via Box–Muller (two uniform draws per sample;
/// deterministic given the rng stream).
#[inline]
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A dense layer: `y = activation(W x + b)`, weights row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut z = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                z = w.mul_add(*x, z);
            }
            out.push(self.activation.apply(z));
        }
    }
}

/// A feed-forward stack of dense layers with seeded initialization.
///
/// Consecutive layer dimensions chain; construction rejects anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    /// Seed used for initialization; provenance only, not serialized.
    init_seed: u64,
}

impl DenseNet {
    /// Build a net from `dims = [in, h1, ..., out]` and one activation per
    /// layer. Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`, biases
    /// zero, drawn from a ChaCha stream seeded with `seed`.
    pub fn seeded(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a net needs at least one layer (two dims)".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::LengthMismatch {
                context: "one activation per layer".into(),
                left: activations.len(),
                right: dims.len() - 1,
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer dims must be > 0".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, act) in activations.iter().enumerate() {
            let (in_dim, out_dim) = (dims[i], dims[i + 1]);
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let weights: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0))
                .collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                activation: *act,
                weights,
                biases: vec![0.0; out_dim],
            });
        }
        Ok(DenseNet {
            layers,
            init_seed: seed,
        })
    }

    /// Build a net directly from explicit layer parameters (tests, oracles).
    pub fn from_parts(
        parts: Vec<(usize, usize, Activation, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(parts.len());
        let mut prev_out: Option<usize> = None;
        for (in_dim, out_dim, activation, weights, biases) in parts {
            if weights.len() != in_dim * out_dim {
                return Err(Error::ShapeMismatch {
                    context: "layer weights".into(),
                    expected: in_dim * out_dim,
                    got: weights.len(),
                });
            }
            if biases.len() != out_dim {
                return Err(Error::ShapeMismatch {
                    context: "layer biases".into(),
                    expected: out_dim,
                    got: biases.len(),
                });
            }
            if let Some(p) = prev_out {
                if p != in_dim {
                    return Err(Error::ShapeMismatch {
                        context: "consecutive layer dims must chain".into(),
                        expected: p,
                        got: in_dim,
                    });
                }
            }
            prev_out = Some(out_dim);
            layers.push(Layer {
                in_dim,
                out_dim,
                activation,
                weights,
                biases,
            });
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a net needs at least one layer".into()));
        }
        Ok(DenseNet {
            layers,
            init_seed: 0,
        })
    }

    #[inline]
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    #[inline]
    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Total parameter count (weights + biases) over all layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Read a parameter by flat index. Canonical order: layer 0 weights,
    /// layer 0 biases, layer 1 weights, ... Used by gradient-check oracles
    /// and by the optimizer's accumulator layout.
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Write a parameter by flat index (same order as [`DenseNet::param`]).
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                l.weights[idx] = value;
                return;
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                l.biases[idx] = value;
                return;
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|p| p.is_finite()))
    }

    fn tape_key(&self) -> TapeKey {
        let mut shape_hash: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in [l.in_dim as u64, l.out_dim as u64, l.activation.tag() as u64] {
                shape_hash ^= v;
                shape_hash = shape_hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        TapeKey {
            shape_hash,
            first_weight_bits: self.layers[0].weights[0].to_bits(),
        }
    }

    /// Forward pass. Returns the output and a tape of cached activations
    /// sufficient for [`backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "net input".into(),
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut buf = Vec::new();
        for layer in &self.layers {
            layer.forward_into(activations.last().unwrap(), &mut buf);
            activations.push(buf.clone());
        }
        let output = activations.last().unwrap().clone();
        Ok((
            output,
            Tape {
                key: self.tape_key(),
                activations,
            },
        ))
    }

    /// Forward pass without a tape, for inference-only paths.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "net input".into(),
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut cur = input.to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut buf);
            std::mem::swap(&mut cur, &mut buf);
        }
        Ok(cur)
    }

    /// Serialize into the PPGN container (see module docs for the layout).
    pub fn write_container<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"PPGN")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim as u32).to_le_bytes())?;
            w.write_all(&[l.activation.tag()])?;
            for v in &l.weights {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &l.biases {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Deserialize from the PPGN container.
    pub fn read_container<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PPGN" {
            return Err(Error::Format("bad net container magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let layer_count = read_u32(r)? as usize;
        let mut parts = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let in_dim = read_u32(r)? as usize;
            let out_dim = read_u32(r)? as usize;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let activation = Activation::from_tag(tag[0])?;
            let weights = read_f64s(r, in_dim * out_dim)?;
            let biases = read_f64s(r, out_dim)?;
            parts.push((in_dim, out_dim, activation, weights, biases));
        }
        DenseNet::from_parts(parts)
    }
}

pub(crate) fn read_u32<R: std::io::Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: std::io::Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: std::io::Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: std::io::Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TapeKey {
    shape_hash: u64,
    first_weight_bits: u64,
}

/// Cached activations from one forward pass: `activations[0]` is the input,
/// `activations[i]` the output of layer `i-1`.
#[derive(Debug, Clone)]
pub struct Tape {
    key: TapeKey,
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Per-layer parameter gradients, shapes mirroring the net.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weights: vec![0.0; l.weights.len()],
                    d_biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// Accumulate `other` into `self` (mini-batch summation).
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.d_weights.iter_mut().zip(&b.d_weights) {
                *x += y;
            }
            for (x, y) in a.d_biases.iter_mut().zip(&b.d_biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in &mut l.d_weights {
                *x *= s;
            }
            for x in &mut l.d_biases {
                *x *= s;
            }
        }
    }

    /// Flat gradient value by the canonical parameter index.
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.d_weights.len() {
                return l.d_weights[idx];
            }
            idx -= l.d_weights.len();
            if idx < l.d_biases.len() {
                return l.d_biases[idx];
            }
            idx -= l.d_biases.len();
        }
        panic!("gradient index out of range");
    }
}

/// Reverse-mode gradients of a scalar through the net.
///
/// `output_grad` is the gradient of that scalar with respect to the net
/// output; the return value holds gradients with respect to every parameter
/// and with respect to the net input.
pub fn backward(net: &DenseNet, tape: &Tape, output_grad: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
    if tape.key != net.tape_key() || tape.activations.len() != net.layers.len() + 1 {
        return Err(Error::StaleTape(
            "tape was not produced by a forward pass of this net".into(),
        ));
    }
    if output_grad.len() != net.output_dim() {
        return Err(Error::ShapeMismatch {
            context: "output gradient".into(),
            expected: net.output_dim(),
            got: output_grad.len(),
        });
    }

    let mut grads = ParamGrads::zeros_like(net);
    let mut upstream = output_grad.to_vec();

    for (li, layer) in net.layers.iter().enumerate().rev() {
        let input = &tape.activations[li];
        let output = &tape.activations[li + 1];
        let lg = &mut grads.layers[li];
        let mut d_input = vec![0.0; layer.in_dim];

        for o in 0..layer.out_dim {
            let dz = upstream[o] * layer.activation.grad_from_output(output[o]);
            lg.d_biases[o] = dz;
            let row = o * layer.in_dim;
            for i in 0..layer.in_dim {
                lg.d_weights[row + i] = dz * input[i];
                d_input[i] = layer.weights[row + i].mul_add(dz, d_input[i]);
            }
        }
        upstream = d_input;
    }

    Ok((grads, upstream))
}

/// Bias-corrected adaptive-moment optimizer state for one parameter vector.
///
/// Accumulators are flat, laid out in the net's canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a flat parameter vector. The caller guarantees the
    /// gradients are finite; shape mismatches are rejected.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer accumulators".into(),
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            update_one(
                &mut self.m[i],
                &mut self.v[i],
                &mut params[i],
                grads[i],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn update_one(
    m: &mut f64,
    v: &mut f64,
    p: &mut f64,
    g: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// One adaptive-moment step over a whole net.
///
/// Gradients are scanned first; a non-finite value rejects the step and
/// reports the offending layer index.
pub fn adam_step(net: &mut DenseNet, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "gradient layer count".into(),
            expected: net.layers.len(),
            got: grads.layers.len(),
        });
    }
    let mut count = 0;
    for (li, (l, g)) in net.layers.iter().zip(&grads.layers).enumerate() {
        if g.d_weights.len() != l.weights.len() || g.d_biases.len() != l.biases.len() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient shapes in layer {li}"),
                expected: l.weights.len() + l.biases.len(),
                got: g.d_weights.len() + g.d_biases.len(),
            });
        }
        if g.d_weights.iter().chain(&g.d_biases).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: li });
        }
        count += l.weights.len() + l.biases.len();
    }
    if count != state.m.len() {
        return Err(Error::ShapeMismatch {
            context: "optimizer accumulators".into(),
            expected: count,
            got: state.m.len(),
        });
    }

    state.step += 1;
    let c1 = 1.0 - state.beta1.powi(state.step as i32);
    let c2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut off = 0;
    for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (i, p) in l.weights.iter_mut().enumerate() {
            update_one(
                &mut state.m[off + i],
                &mut state.v[off + i],
                p,
                g.d_weights[i],
                state.lr,
                state.beta1,
                state.beta2,
                state.eps,
                c1,
                c2,
            );
        }
        off += l.weights.len();
        for (i, p) in l.biases.iter_mut().enumerate() {
            update_one(
                &mut state.m[off + i],
                &mut state.v[off + i],
                p,
                g.d_biases[i],
                state.lr,
                state.beta1,
                state.beta2,
                state.eps,
                c1,
                c2,
            );
        }
        off += l.biases.len();
    }
    Ok(())
}

/// Central-difference gradient estimate of a scalar function.
///
/// Test oracle for every analytic gradient path in the repo.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Relative error with an absolute floor, as used by all gradient checks.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_net(dims: &[usize], acts: &[Activation], seed: u64) -> DenseNet {
        DenseNet::seeded(dims, acts, seed).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_parts(vec![(
            2,
            2,
            Activation::Identity,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        )])
        .unwrap();
        let (out, _) = net.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = DenseNet::from_parts(vec![(
            2,
            2,
            Activation::Relu,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        )])
        .unwrap();
        let (out, _) = net.forward(&[-1.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 3.0]);
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        // Independent scalar-by-scalar oracle for a 2-layer tanh net.
        let net = seeded_net(&[3, 4, 2], &[Activation::Tanh, Activation::Tanh], 99);
        let input = [0.3, -0.2, 0.7];
        let (out, _) = net.forward(&input).unwrap();

        let mut hidden = [0.0f64; 4];
        for o in 0..4 {
            let mut z = net.layers()[0].biases()[o];
            for i in 0..3 {
                z += net.layers()[0].weights()[o * 3 + i] * input[i];
            }
            hidden[o] = z.tanh();
        }
        let mut expect = [0.0f64; 2];
        for o in 0..2 {
            let mut z = net.layers()[1].biases()[o];
            for i in 0..4 {
                z += net.layers()[1].weights()[o * 4 + i] * hidden[i];
            }
            expect[o] = z.tanh();
        }
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = seeded_net(&[3, 2], &[Activation::Relu], 1);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_identity_net_passes_gradient_through() {
        let net = DenseNet::from_parts(vec![(
            2,
            2,
            Activation::Identity,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        )])
        .unwrap();
        let (_, tape) = net.forward(&[0.5, -0.5]).unwrap();
        let (_, input_grad) = backward(&net, &tape, &[1.0, 0.0]).unwrap();
        assert_eq!(input_grad, vec![1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_stale_tape() {
        let net_a = seeded_net(&[3, 3], &[Activation::Tanh], 1);
        let mut net_b = net_a.clone();
        let (_, tape) = net_a.forward(&[0.1, 0.2, 0.3]).unwrap();
        // Same architecture, updated weights: the tape is stale for net_b.
        net_b.set_param(0, net_b.param(0) + 1.0);
        assert!(matches!(
            backward(&net_b, &tape, &[1.0, 1.0, 1.0]),
            Err(Error::StaleTape(_))
        ));
    }

    /// Scalar loss used by the finite-difference checks: sum of squared outputs.
    fn sq_loss(net: &DenseNet, input: &[f64]) -> f64 {
        net.infer(input).unwrap().iter().map(|y| y * y).sum()
    }

    #[test]
    fn gradients_match_finite_differences_over_seeds() {
        // Param and input gradients vs central differences over 20 seeds.
        for seed in 0..20u64 {
            let net = seeded_net(
                &[4, 6, 5, 3],
                &[Activation::Tanh, Activation::Relu, Activation::Sigmoid],
                seed,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let input: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();

            let (out, tape) = net.forward(&input).unwrap();
            let output_grad: Vec<f64> = out.iter().map(|y| 2.0 * y).collect();
            let (grads, input_grad) = backward(&net, &tape, &output_grad).unwrap();

            let mut max_err = 0.0f64;
            for idx in 0..net.param_count() {
                let mut perturbed = net.clone();
                let f = |v: &[f64]| {
                    let mut n = perturbed.clone();
                    n.set_param(idx, v[0]);
                    sq_loss(&n, &input)
                };
                let fd = finite_diff(f, &[net.param(idx)], 1e-5)[0];
                max_err = max_err.max(rel_error(grads.param(idx), fd));
                perturbed.set_param(idx, net.param(idx));
            }
            let fd_input = finite_diff(|x| sq_loss(&net, x), &input, 1e-5);
            for (a, b) in input_grad.iter().zip(&fd_input) {
                max_err = max_err.max(rel_error(*a, *b));
            }
            assert!(max_err <= 1e-4, "seed {seed}: max rel err {max_err}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut net = seeded_net(&[3, 3], &[Activation::Tanh], 5);
        let before = net.clone();
        let grads = ParamGrads::zeros_like(&net);
        let mut state = AdamState::new(net.param_count(), 1e-3);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        // Closed form: with constant gradient g, the bias-corrected first step
        // is -lr * g / (|g| + eps) ≈ -lr * sign(g).
        let mut params = vec![2.0];
        let mut state = AdamState::new(1, 0.1);
        state.step_flat(&mut params, &[3.7]).unwrap();
        assert!((params[0] - (2.0 - 0.1)).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // 100 steps of the update rule on f(x) = x^2 from x = 1, lr = 0.1.
        let mut params = vec![1.0];
        let mut state = AdamState::new(1, 0.1);
        for _ in 0..100 {
            let g = 2.0 * params[0];
            state.step_flat(&mut params, &[g]).unwrap();
        }
        assert!(params[0].abs() < 0.05, "x = {}", params[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_layer_index() {
        let mut net = seeded_net(&[2, 2, 2], &[Activation::Relu, Activation::Identity], 3);
        let mut grads = ParamGrads::zeros_like(&net);
        grads.layers[1].d_weights[0] = f64::NAN;
        let mut state = AdamState::new(net.param_count(), 1e-3);
        match adam_step(&mut net, &grads, &mut state) {
            Err(Error::NonFiniteGradient { layer }) => assert_eq!(layer, 1),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let g = finite_diff(|x| x.iter().sum(), &[0.3, -1.2, 5.0], 1e-6);
        for v in g {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_of_square_is_analytic() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let a = seeded_net(&[8, 16, 4], &[Activation::Relu, Activation::Identity], 42);
        let b = seeded_net(&[8, 16, 4], &[Activation::Relu, Activation::Identity], 42);
        assert_eq!(a, b);
        let limit0 = (6.0 / (8.0 + 16.0)).sqrt();
        assert!(a.layers()[0].weights().iter().all(|w| w.abs() <= limit0));
        assert!(a.layers()[0].biases().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn training_is_bit_deterministic() {
        // Identical seeds, N steps, bit-identical parameters.
        let run = || {
            let mut net = seeded_net(&[3, 8, 1], &[Activation::Tanh, Activation::Identity], 7);
            let mut state = AdamState::new(net.param_count(), 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..50 {
                let input: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
                let (out, tape) = net.forward(&input).unwrap();
                let (grads, _) = backward(&net, &tape, &[2.0 * out[0]]).unwrap();
                adam_step(&mut net, &grads, &mut state).unwrap();
            }
            net
        };
        let a = run();
        let b = run();
        for idx in 0..a.param_count() {
            assert_eq!(a.param(idx).to_bits(), b.param(idx).to_bits());
        }
    }

    #[test]
    fn shape_closure_under_forward_backward() {
        let mut net = seeded_net(&[5, 7, 2], &[Activation::Sigmoid, Activation::Identity], 9);
        let dims_before: Vec<_> = net.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        let (out, tape) = net.forward(&[0.1; 5]).unwrap();
        let (grads, _) = backward(&net, &tape, &vec![1.0; out.len()]).unwrap();
        let mut state = AdamState::new(net.param_count(), 1e-3);
        adam_step(&mut net, &grads, &mut state).unwrap();
        let dims_after: Vec<_> = net.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(dims_before, dims_after);
        assert!(net.all_finite());
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let net = seeded_net(
            &[4, 9, 3],
            &[Activation::Relu, Activation::Sigmoid],
            123,
        );
        let mut bytes = Vec::new();
        net.write_container(&mut bytes).unwrap();
        let back = DenseNet::read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(net.layers(), back.layers());

        let mut bytes2 = Vec::new();
        back.write_container(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn container_rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(DenseNet::read_container(&mut bytes.as_slice()).is_err());
    }
}
