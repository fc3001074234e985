//! Attention-based multiple-instance learning over trajectory bags.
//!
//! A trajectory is a bag of (observation-chunk, action-chunk) instances with a
//! binary terminal outcome as the bag label. Each instance is encoded, scored
//! by a gated attention head,
//!
//! ```text
//! e_t = wᵀ (tanh(V h_t) ⊙ sigm(U h_t)),    α = softmax(e)
//! ```
//!
//! pooled into a bag embedding `z = Σ_t α_t h_t`, and classified by a sigmoid
//! head. Training minimizes binary cross-entropy against the true outcomes,
//! end to end through the encoder, the attention parameters, and the
//! classifier, with hand-rolled reverse-mode gradients.
//!
//! Bag reductions (the softmax denominator and the pooling sums) run over
//! operands sorted by value, so predictions are exactly invariant to instance
//! order, bit for bit.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::env::Outcome;
use crate::nn::{
    self, backward, read_f64s, read_u32, sigmoid, Activation, AdamState, DenseNet, ParamGrads,
};
use crate::seeding::{self, streams};
use crate::{Error, Result};

/// Instance feature dimensionality: observation chunk (8) + action chunk (16).
pub const INSTANCE_DIM: usize = 24;
/// Instance embedding dimensionality (M).
pub const EMBED_DIM: usize = 64;
/// Gated-attention hidden dimensionality (L).
pub const ATT_DIM: usize = 32;

/// One (observation-chunk, action-chunk) pair, concatenated, plus the episode
/// step index it was sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub step_index: u32,
}

impl Instance {
    pub fn new(features: Vec<f64>, step_index: u32) -> Self {
        debug_assert_eq!(features.len(), INSTANCE_DIM);
        Instance {
            features,
            step_index,
        }
    }
}

/// An ordered bag of instances with its terminal outcome and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub instances: Vec<Instance>,
    pub outcome: Outcome,
    pub checkpoint_epoch: u32,
    pub env_seed: u64,
}

/// Gated-attention MIL model: encoder φ, attention parameters (V, U, w), and
/// bag classifier g.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    encoder: DenseNet,
    /// Row-major `[ATT_DIM × EMBED_DIM]`.
    att_v: Vec<f64>,
    /// Row-major `[ATT_DIM × EMBED_DIM]`.
    att_u: Vec<f64>,
    /// `[ATT_DIM]`.
    att_w: Vec<f64>,
    classifier: DenseNet,
}

impl MilModel {
    /// Fresh model with seeded initialization.
    pub fn seeded(seed: u64) -> Self {
        let encoder = DenseNet::seeded(
            &[INSTANCE_DIM, EMBED_DIM, EMBED_DIM],
            &[Activation::Relu, Activation::Relu],
            seeding::derive_seed2(seed, streams::MIL_INIT, 0),
        )
        .unwrap();
        let classifier = DenseNet::seeded(
            &[EMBED_DIM, 1],
            &[Activation::Sigmoid],
            seeding::derive_seed2(seed, streams::MIL_INIT, 1),
        )
        .unwrap();

        let mut rng = seeding::rng(seed, streams::MIL_INIT);
        let limit_vu = (6.0 / (ATT_DIM + EMBED_DIM) as f64).sqrt();
        let limit_w = (6.0 / (ATT_DIM + 1) as f64).sqrt();
        let uniform = |rng: &mut rand_chacha::ChaCha8Rng, limit: f64| {
            limit * (2.0 * rng.gen::<f64>() - 1.0)
        };
        let att_v = (0..ATT_DIM * EMBED_DIM)
            .map(|_| uniform(&mut rng, limit_vu))
            .collect();
        let att_u = (0..ATT_DIM * EMBED_DIM)
            .map(|_| uniform(&mut rng, limit_vu))
            .collect();
        let att_w = (0..ATT_DIM).map(|_| uniform(&mut rng, limit_w)).collect();

        MilModel {
            encoder,
            att_v,
            att_u,
            att_w,
            classifier,
        }
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn attention_params(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.att_v, &self.att_u, &self.att_w)
    }

    pub fn classifier(&self) -> &DenseNet {
        &self.classifier
    }

    /// Embed one instance: `h_t = φ(x_t)`.
    pub fn encode_instance(&self, instance: &Instance) -> Result<Vec<f64>> {
        self.encoder.infer(&instance.features)
    }

    /// Gated attention score before the softmax.
    fn attention_score(&self, h: &[f64]) -> f64 {
        let mut score = 0.0;
        for l in 0..ATT_DIM {
            let row = l * EMBED_DIM;
            let mut vh = 0.0;
            let mut uh = 0.0;
            for m in 0..EMBED_DIM {
                vh = self.att_v[row + m].mul_add(h[m], vh);
                uh = self.att_u[row + m].mul_add(h[m], uh);
            }
            score = self.att_w[l].mul_add(vh.tanh() * sigmoid(uh), score);
        }
        score
    }

    /// Softmax attention weights over a bag of embeddings. Strictly positive,
    /// summing to one; exactly permutation-equivariant.
    pub fn attention_weights(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Err(Error::InvalidArgument(
                "attention over an empty bag".into(),
            ));
        }
        let scores: Vec<f64> = embeddings.iter().map(|h| self.attention_score(h)).collect();
        Ok(softmax_stable(&scores))
    }

    /// Full bag pipeline: encode, attend, pool, classify. Returns
    /// `P(outcome = success | bag)`.
    pub fn bag_predict(&self, trajectory: &Trajectory) -> Result<f64> {
        if trajectory.instances.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory bag".into()));
        }
        let embeddings: Vec<Vec<f64>> = trajectory
            .instances
            .iter()
            .map(|inst| self.encode_instance(inst))
            .collect::<Result<_>>()?;
        let alpha = self.attention_weights(&embeddings)?;
        let z = bag_embedding(&embeddings, &alpha)?;
        Ok(self.classifier.infer(&z)?[0])
    }

    /// Attention weights for a whole trajectory (encode + attend).
    pub fn trajectory_attention(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        let embeddings: Vec<Vec<f64>> = trajectory
            .instances
            .iter()
            .map(|inst| self.encode_instance(inst))
            .collect::<Result<_>>()?;
        self.attention_weights(&embeddings)
    }

    /// Serialize: header, attention parameters, then the encoder and
    /// classifier net containers.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"PPMI")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(EMBED_DIM as u32).to_le_bytes())?;
        w.write_all(&(ATT_DIM as u32).to_le_bytes())?;
        for v in self.att_v.iter().chain(&self.att_u).chain(&self.att_w) {
            w.write_all(&v.to_le_bytes())?;
        }
        self.encoder.write_container(w)?;
        self.classifier.write_container(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PPMI" {
            return Err(Error::Format("bad MIL model magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported MIL model version {version}")));
        }
        let m = read_u32(r)? as usize;
        let l = read_u32(r)? as usize;
        if m != EMBED_DIM || l != ATT_DIM {
            return Err(Error::Format(format!(
                "MIL dims {m}x{l} do not match build ({EMBED_DIM}x{ATT_DIM})"
            )));
        }
        let att_v = read_f64s(r, l * m)?;
        let att_u = read_f64s(r, l * m)?;
        let att_w = read_f64s(r, l)?;
        let encoder = DenseNet::read_container(r)?;
        let classifier = DenseNet::read_container(r)?;
        Ok(MilModel {
            encoder,
            att_v,
            att_u,
            att_w,
            classifier,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Order-independent sum: operands sorted by value before accumulation.
fn stable_sum(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Softmax with max subtraction and an order-independent denominator.
fn softmax_stable(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom = stable_sum(exps.clone());
    exps.into_iter().map(|e| e / denom).collect()
}

/// Attention-weighted pooling: `z = Σ_t α_t h_t`, with order-independent
/// per-coordinate summation.
pub fn bag_embedding(embeddings: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<f64>> {
    if embeddings.len() != alpha.len() {
        return Err(Error::LengthMismatch {
            context: "bag embedding".into(),
            left: embeddings.len(),
            right: alpha.len(),
        });
    }
    let dim = embeddings[0].len();
    let mut z = Vec::with_capacity(dim);
    let mut terms = Vec::with_capacity(alpha.len());
    for c in 0..dim {
        terms.clear();
        terms.extend(embeddings.iter().zip(alpha).map(|(h, a)| a * h[c]));
        z.push(stable_sum(terms.clone()));
    }
    Ok(z)
}

/// Gradients of one bag's BCE loss with respect to every model parameter.
pub struct MilGrads {
    pub encoder: ParamGrads,
    pub d_v: Vec<f64>,
    pub d_u: Vec<f64>,
    pub d_w: Vec<f64>,
    pub classifier: ParamGrads,
}

/// Forward + reverse pass over one bag. Returns the BCE loss, the predicted
/// success probability, and all parameter gradients.
pub fn bag_loss_and_grads(model: &MilModel, trajectory: &Trajectory) -> Result<(f64, f64, MilGrads)> {
    let n = trajectory.instances.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty trajectory bag".into()));
    }
    let y = match trajectory.outcome {
        Outcome::Success => 1.0,
        Outcome::Failure => 0.0,
    };

    // Forward, keeping tapes and intermediates.
    let mut tapes = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n);
    for inst in &trajectory.instances {
        let (h, tape) = model.encoder.forward(&inst.features)?;
        embeddings.push(h);
        tapes.push(tape);
    }

    // Gated attention intermediates per instance.
    let mut tanh_vh = vec![vec![0.0; ATT_DIM]; n];
    let mut sig_uh = vec![vec![0.0; ATT_DIM]; n];
    let mut scores = vec![0.0; n];
    for t in 0..n {
        let h = &embeddings[t];
        for l in 0..ATT_DIM {
            let row = l * EMBED_DIM;
            let mut vh = 0.0;
            let mut uh = 0.0;
            for m in 0..EMBED_DIM {
                vh = model.att_v[row + m].mul_add(h[m], vh);
                uh = model.att_u[row + m].mul_add(h[m], uh);
            }
            tanh_vh[t][l] = vh.tanh();
            sig_uh[t][l] = sigmoid(uh);
            scores[t] = model.att_w[l].mul_add(tanh_vh[t][l] * sig_uh[t][l], scores[t]);
        }
    }
    let alpha = softmax_stable(&scores);
    let z = bag_embedding(&embeddings, &alpha)?;
    let (p_out, cls_tape) = model.classifier.forward(&z)?;
    let p = p_out[0].clamp(1e-12, 1.0 - 1e-12);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());

    // Backward. dL/dp seeds the classifier; its input gradient is dL/dz.
    let dl_dp = (p - y) / (p * (1.0 - p));
    let (cls_grads, dl_dz) = backward(&model.classifier, &cls_tape, &[dl_dp])?;

    // Pooling: dL/dα_t = h_t · dL/dz ; dL/dh_t += α_t dL/dz.
    let mut dl_dalpha = vec![0.0; n];
    let mut dl_dh: Vec<Vec<f64>> = vec![vec![0.0; EMBED_DIM]; n];
    for t in 0..n {
        let h = &embeddings[t];
        let mut dot = 0.0;
        for m in 0..EMBED_DIM {
            dot = h[m].mul_add(dl_dz[m], dot);
            dl_dh[t][m] = alpha[t] * dl_dz[m];
        }
        dl_dalpha[t] = dot;
    }

    // Softmax: dL/de_t = α_t (dL/dα_t − Σ_j α_j dL/dα_j).
    let inner: f64 = alpha.iter().zip(&dl_dalpha).map(|(a, d)| a * d).sum();
    let dl_de: Vec<f64> = alpha
        .iter()
        .zip(&dl_dalpha)
        .map(|(a, d)| a * (d - inner))
        .collect();

    // Gated attention parameters.
    let mut d_v = vec![0.0; ATT_DIM * EMBED_DIM];
    let mut d_u = vec![0.0; ATT_DIM * EMBED_DIM];
    let mut d_w = vec![0.0; ATT_DIM];
    for t in 0..n {
        let h = &embeddings[t];
        for l in 0..ATT_DIM {
            let a = tanh_vh[t][l];
            let b = sig_uh[t][l];
            d_w[l] = dl_de[t].mul_add(a * b, d_w[l]);
            let d_gate = dl_de[t] * model.att_w[l];
            let d_vh = d_gate * b * (1.0 - a * a);
            let d_uh = d_gate * a * b * (1.0 - b);
            let row = l * EMBED_DIM;
            for m in 0..EMBED_DIM {
                d_v[row + m] = d_vh.mul_add(h[m], d_v[row + m]);
                d_u[row + m] = d_uh.mul_add(h[m], d_u[row + m]);
                dl_dh[t][m] = model.att_v[row + m].mul_add(d_vh, dl_dh[t][m]);
                dl_dh[t][m] = model.att_u[row + m].mul_add(d_uh, dl_dh[t][m]);
            }
        }
    }

    // Encoder, accumulated over instances.
    let mut enc_grads = ParamGrads::zeros_like(&model.encoder);
    for t in 0..n {
        let (g, _) = backward(&model.encoder, &tapes[t], &dl_dh[t])?;
        enc_grads.add_assign(&g);
    }

    Ok((
        loss,
        p,
        MilGrads {
            encoder: enc_grads,
            d_v,
            d_u,
            d_w,
            classifier: cls_grads,
        },
    ))
}

/// Training output: the model plus the per-epoch mean loss curve.
pub struct MilTrainReport {
    pub model: MilModel,
    pub epoch_losses: Vec<f64>,
}

/// End-to-end BCE training, one bag per optimizer step.
///
/// If success/failure bag counts differ by more than 2×, the minority class is
/// oversampled to parity. Rejects single-class training sets.
pub fn train_mil(
    trajectories: &[Trajectory],
    epochs: usize,
    seed: u64,
    lr: f64,
) -> Result<MilTrainReport> {
    let successes: Vec<usize> = trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.outcome == Outcome::Success)
        .map(|(i, _)| i)
        .collect();
    let failures: Vec<usize> = trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.outcome == Outcome::Failure)
        .map(|(i, _)| i)
        .collect();
    if successes.is_empty() {
        return Err(Error::SingleClassBags("failure".into()));
    }
    if failures.is_empty() {
        return Err(Error::SingleClassBags("success".into()));
    }

    // Oversample the minority class to parity when imbalance exceeds 2x.
    let mut index: Vec<usize> = (0..trajectories.len()).collect();
    let (majority, minority) = if successes.len() >= failures.len() {
        (&successes, &failures)
    } else {
        (&failures, &successes)
    };
    if majority.len() > 2 * minority.len() {
        let deficit = majority.len() - minority.len();
        index.extend((0..deficit).map(|i| minority[i % minority.len()]));
    }

    let mut model = MilModel::seeded(seed);
    let mut opt = MilAdam::new(&model, lr);
    let mut rng = seeding::rng(seed, streams::MIL_TRAIN);
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        index.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &index {
            let (loss, _, grads) = bag_loss_and_grads(&model, &trajectories[i])?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            opt.step(&mut model, &grads)?;
            total += loss;
        }
        epoch_losses.push(total / index.len() as f64);
    }

    Ok(MilTrainReport {
        model,
        epoch_losses,
    })
}

/// Optimizer states for the five MIL parameter groups.
pub struct MilAdam {
    encoder: AdamState,
    v: AdamState,
    u: AdamState,
    w: AdamState,
    classifier: AdamState,
}

impl MilAdam {
    pub fn new(model: &MilModel, lr: f64) -> Self {
        MilAdam {
            encoder: AdamState::new(model.encoder.param_count(), lr),
            v: AdamState::new(model.att_v.len(), lr),
            u: AdamState::new(model.att_u.len(), lr),
            w: AdamState::new(model.att_w.len(), lr),
            classifier: AdamState::new(model.classifier.param_count(), lr),
        }
    }

    pub fn step(&mut self, model: &mut MilModel, grads: &MilGrads) -> Result<()> {
        for (name, g) in [("V", &grads.d_v), ("U", &grads.d_u), ("w", &grads.d_w)] {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite gradient in attention parameter {name}"
                )));
            }
        }
        nn::adam_step(&mut model.encoder, &grads.encoder, &mut self.encoder)?;
        self.v.step_flat(&mut model.att_v, &grads.d_v)?;
        self.u.step_flat(&mut model.att_u, &grads.d_u)?;
        self.w.step_flat(&mut model.att_w, &grads.d_w)?;
        nn::adam_step(&mut model.classifier, &grads.classifier, &mut self.classifier)?;
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::random_bag;
    use super::*;
    use crate::nn::{finite_diff, rel_error};

    #[test]
    fn identical_instances_embed_identically() {
        let model = MilModel::seeded(3);
        let a = Instance::new(vec![0.25; INSTANCE_DIM], 0);
        let b = Instance::new(vec![0.25; INSTANCE_DIM], 8);
        let ha = model.encode_instance(&a).unwrap();
        let hb = model.encode_instance(&b).unwrap();
        for (x, y) in ha.iter().zip(&hb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(ha.len(), EMBED_DIM);
    }

    #[test]
    fn zero_instance_embedding_matches_scalar_oracle() {
        // For a zero input, layer 1 reduces to relu(bias) = 0 (biases start at
        // zero), so layer 2 is relu(bias) = 0 as well.
        let model = MilModel::seeded(11);
        let h = model
            .encode_instance(&Instance::new(vec![0.0; INSTANCE_DIM], 0))
            .unwrap();
        // Independent scalar recomputation.
        let enc = model.encoder();
        let mut hidden = vec![0.0; EMBED_DIM];
        for o in 0..EMBED_DIM {
            let z = enc.layers()[0].biases()[o];
            hidden[o] = z.max(0.0);
        }
        let mut expect = vec![0.0; EMBED_DIM];
        for o in 0..EMBED_DIM {
            let mut z = enc.layers()[1].biases()[o];
            for (i, hv) in hidden.iter().enumerate() {
                z += enc.layers()[1].weights()[o * EMBED_DIM + i] * hv;
            }
            expect[o] = z.max(0.0);
        }
        for (a, b) in h.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_bag_gets_full_attention() {
        let model = MilModel::seeded(5);
        let h = model
            .encode_instance(&Instance::new(vec![0.1; INSTANCE_DIM], 0))
            .unwrap();
        let alpha = model.attention_weights(&[h]).unwrap();
        assert_eq!(alpha, vec![1.0]);
    }

    #[test]
    fn identical_embeddings_get_uniform_attention() {
        let model = MilModel::seeded(5);
        let h = model
            .encode_instance(&Instance::new(vec![0.3; INSTANCE_DIM], 0))
            .unwrap();
        let alpha = model
            .attention_weights(&[h.clone(), h.clone(), h.clone(), h])
            .unwrap();
        for a in &alpha {
            assert!((a - 0.25).abs() <= 1e-12, "alpha = {a}");
        }
    }

    #[test]
    fn attention_matches_independent_equation_oracle() {
        // Re-derive the gated attention weights with a separate, naive
        // implementation and compare.
        let model = MilModel::seeded(21);
        let mut rng = seeding::rng(77, 0x0ace);
        let embeddings: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..EMBED_DIM).map(|_| nn::standard_normal(&mut rng)).collect())
            .collect();
        let alpha = model.attention_weights(&embeddings).unwrap();

        let (v, u, w) = model.attention_params();
        let mut scores = Vec::new();
        for h in &embeddings {
            let mut e = 0.0;
            for l in 0..ATT_DIM {
                let mut vh = 0.0;
                let mut uh = 0.0;
                for m in 0..EMBED_DIM {
                    vh += v[l * EMBED_DIM + m] * h[m];
                    uh += u[l * EMBED_DIM + m] * h[m];
                }
                e += w[l] * vh.tanh() * (1.0 / (1.0 + (-uh).exp()));
            }
            scores.push(e);
        }
        let total: f64 = scores.iter().map(|e| e.exp()).sum();
        for (a, e) in alpha.iter().zip(&scores) {
            assert!((a - e.exp() / total).abs() < 1e-12);
        }
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bag_embedding_basics() {
        let h0 = vec![1.0, 0.0, 0.0];
        let h1 = vec![0.0, 1.0, 0.0];
        // Singleton.
        let z = bag_embedding(&[h0.clone()], &[1.0]).unwrap();
        assert_eq!(z, h0);
        // One-hot.
        let z = bag_embedding(&[h0.clone(), h1.clone()], &[0.0, 1.0]).unwrap();
        assert_eq!(z, h1);
        // Uniform over unit vectors.
        let z = bag_embedding(&[h0, h1], &[0.5, 0.5]).unwrap();
        assert_eq!(z, vec![0.5, 0.5, 0.0]);
        // Length mismatch rejected.
        assert!(bag_embedding(&[vec![1.0]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bag_predict_is_a_probability_and_permutation_invariant() {
        let model = MilModel::seeded(9);
        for seed in 0..10u64 {
            let bag = random_bag(7, Outcome::Success, seed);
            let p = model.bag_predict(&bag).unwrap();
            assert!(p > 0.0 && p < 1.0);

            let mut permuted = bag.clone();
            permuted.instances.reverse();
            permuted.instances.swap(0, 3);
            let q = model.bag_predict(&permuted).unwrap();
            assert_eq!(p.to_bits(), q.to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn bag_gradients_match_finite_differences() {
        // Exhaustive parameter check on a handful of seeds; the acceptance
        // suite runs the wider stratified sweep.
        for seed in 0..3u64 {
            let model = MilModel::seeded(seed);
            let bag = random_bag(3, if seed % 2 == 0 { Outcome::Success } else { Outcome::Failure }, seed);
            let (_, _, grads) = bag_loss_and_grads(&model, &bag).unwrap();

            let loss_of = |m: &MilModel| {
                let n = m.bag_predict(&bag).unwrap().clamp(1e-12, 1.0 - 1e-12);
                let y = if bag.outcome == Outcome::Success { 1.0 } else { 0.0 };
                -(y * n.ln() + (1.0 - y) * (1.0 - n).ln())
            };

            let mut max_err = 0.0f64;
            // Encoder and classifier parameters.
            for idx in 0..model.encoder().param_count() {
                let mut m = model.clone();
                let base = m.encoder.param(idx);
                let fd = finite_diff(
                    |x| {
                        m.clone_with(|mm| mm.encoder.set_param(idx, x[0]));
                        // closure workaround below
                        0.0
                    },
                    &[base],
                    1e-5,
                );
                let _ = fd;
                // Direct two-point evaluation to avoid borrow gymnastics.
                m.encoder.set_param(idx, base + 1e-5);
                let fp = loss_of(&m);
                m.encoder.set_param(idx, base - 1e-5);
                let fm = loss_of(&m);
                let fd = (fp - fm) / 2e-5;
                max_err = max_err.max(rel_error(grads.encoder.param(idx), fd));
            }
            for idx in 0..model.classifier().param_count() {
                let mut m = model.clone();
                let base = m.classifier.param(idx);
                m.classifier.set_param(idx, base + 1e-5);
                let fp = loss_of(&m);
                m.classifier.set_param(idx, base - 1e-5);
                let fm = loss_of(&m);
                let fd = (fp - fm) / 2e-5;
                max_err = max_err.max(rel_error(grads.classifier.param(idx), fd));
            }
            // Attention parameters.
            for idx in 0..model.att_v.len() {
                let mut m = model.clone();
                let base = m.att_v[idx];
                m.att_v[idx] = base + 1e-5;
                let fp = loss_of(&m);
                m.att_v[idx] = base - 1e-5;
                let fm = loss_of(&m);
                max_err = max_err.max(rel_error(grads.d_v[idx], (fp - fm) / 2e-5));
            }
            for idx in 0..model.att_u.len() {
                let mut m = model.clone();
                let base = m.att_u[idx];
                m.att_u[idx] = base + 1e-5;
                let fp = loss_of(&m);
                m.att_u[idx] = base - 1e-5;
                let fm = loss_of(&m);
                max_err = max_err.max(rel_error(grads.d_u[idx], (fp - fm) / 2e-5));
            }
            for idx in 0..model.att_w.len() {
                let mut m = model.clone();
                let base = m.att_w[idx];
                m.att_w[idx] = base + 1e-5;
                let fp = loss_of(&m);
                m.att_w[idx] = base - 1e-5;
                let fm = loss_of(&m);
                max_err = max_err.max(rel_error(grads.d_w[idx], (fp - fm) / 2e-5));
            }
            assert!(max_err <= 1e-4, "seed {seed}: max rel err {max_err}");
        }
    }

    #[test]
    fn train_rejects_single_class_sets() {
        let bags: Vec<Trajectory> = (0..4).map(|i| random_bag(5, Outcome::Success, i)).collect();
        assert!(matches!(
            train_mil(&bags, 1, 0, 1e-3),
            Err(Error::SingleClassBags(_))
        ));
    }

    #[test]
    fn serialization_round_trips_bit_exact() {
        let model = MilModel::seeded(31);
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        let back = MilModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(model, back);
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    impl MilModel {
        fn clone_with<F: FnOnce(&mut MilModel)>(&self, f: F) -> MilModel {
            let mut m = self.clone();
            f(&mut m);
            m
        }
    }
}
