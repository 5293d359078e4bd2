//! The pre-ranking scorer: per-field embeddings concatenated with dense
//! features, three ReLU hidden layers, and a linear head producing a raw
//! score `s`; `p = sigmoid(s)` is the squashed probability consumed by the
//! penalty loss. The pairwise ranking loss consumes raw scores, which is
//! equivalent up to its translation invariance.
//!
//! Parameters live in one flat vector with a fixed documented order —
//! embedding tables by field id (rows contiguous), then each layer's
//! weights (row-major, one row per output) followed by its biases — so
//! per-objective gradients, the optimizer, and checkpoints all share the
//! same coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Architecture of the scorer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerConfig {
    /// Vocabulary size per categorical field, in field order.
    pub field_vocabs: Vec<usize>,
    pub embedding_dim: usize,
    pub dense_dim: usize,
    /// Hidden layer widths; the head on top is linear to one score.
    pub hidden: [usize; 3],
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.field_vocabs.is_empty() && self.dense_dim == 0 {
            return Err(Error::InvalidConfig("scorer has no input features".into()));
        }
        if self.field_vocabs.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig("zero-size vocabulary".into()));
        }
        if !self.field_vocabs.is_empty() && self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("zero-width hidden layer".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.field_vocabs.len() * self.embedding_dim + self.dense_dim
    }

    /// `(in, out)` per layer, the three hidden layers then the head.
    fn layer_dims(&self) -> [(usize, usize); 4] {
        let [h1, h2, h3] = self.hidden;
        [
            (self.input_dim(), h1),
            (h1, h2),
            (h2, h3),
            (h3, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        let emb: usize = self
            .field_vocabs
            .iter()
            .map(|v| v * self.embedding_dim)
            .sum();
        emb + self
            .layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum::<usize>()
    }
}

/// One scoring input: one id per categorical field plus dense features.
/// By this crate's dataset convention the categorical layout is
/// `[user, item, material_fp, item_fp, industry]`; the scorer itself
/// treats all fields uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub categorical: Vec<u64>,
    pub dense: Vec<f64>,
}

/// Raw score plus its sigmoid squash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    pub prob: f64,
}

impl ScoredPair {
    pub fn from_score(score: f64) -> Self {
        Self {
            score,
            prob: sigmoid(score),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(-x))` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// All scorer parameters as one flat vector (see the module docs for the
/// coordinate order).
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    config: RankerConfig,
    values: Vec<f64>,
}

/// Checkpoint container format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing parameter checkpoint: named tensors with shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RankerConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RankerParams {
    /// All-zero parameters (scores 0, probabilities 0.5).
    pub fn zeros(config: RankerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Ok(Self {
            config,
            values: vec![0.0; n],
        })
    }

    /// Seeded init: weights uniform in `(-r, r)` with `r = 1/sqrt(fan_in)`
    /// (embeddings use `r = 1/sqrt(embedding_dim)`), biases zero. Values
    /// are drawn in flat order from one stream, so equal seeds give
    /// bit-identical parameters.
    pub fn init_seeded(config: RankerConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        config.validate()?;
        let mut rng = rng_for(seed, "ranker-init");
        let mut values = vec![0.0; config.param_count()];
        let r_emb = 1.0 / (config.embedding_dim.max(1) as f64).sqrt();
        let emb_len: usize = config
            .field_vocabs
            .iter()
            .map(|v| v * config.embedding_dim)
            .sum();
        for v in values.iter_mut().take(emb_len) {
            *v = rng.gen_range(-r_emb..r_emb);
        }
        let mut off = emb_len;
        for (fan_in, out) in config.layer_dims() {
            let r = 1.0 / (fan_in as f64).sqrt();
            for v in values.iter_mut().skip(off).take(fan_in * out) {
                *v = rng.gen_range(-r..r);
            }
            off += fan_in * out + out; // biases stay zero
        }
        Ok(Self { config, values })
    }

    /// Wraps an explicit flat vector (must match `config.param_count()`).
    pub fn from_flat(config: RankerConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::InvalidInput(format!(
                "{} values for {} parameters",
                values.len(),
                config.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector contains NaN/Inf".into()));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    /// Adds `scale * delta` coordinate-wise.
    pub fn apply_delta(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "delta has {} entries, parameters have {}",
                delta.len(),
                self.values.len()
            )));
        }
        for (v, d) in self.values.iter_mut().zip(delta) {
            *v += scale * d;
        }
        Ok(())
    }

    fn embedding_offset(&self, field: usize) -> usize {
        self.config.field_vocabs[..field]
            .iter()
            .map(|v| v * self.config.embedding_dim)
            .sum()
    }

    fn layer_offsets(&self) -> [(usize, usize, usize, usize); 4] {
        // (weight offset, bias offset, in, out) per layer
        let mut off: usize = self
            .config
            .field_vocabs
            .iter()
            .map(|v| v * self.config.embedding_dim)
            .sum();
        let mut out = [(0, 0, 0, 0); 4];
        for (l, (fan_in, fan_out)) in self.config.layer_dims().into_iter().enumerate() {
            out[l] = (off, off + fan_in * fan_out, fan_in, fan_out);
            off += fan_in * fan_out + fan_out;
        }
        out
    }

    /// Named-tensor view for serialization.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (f, &vocab) in self.config.field_vocabs.iter().enumerate() {
            let off = self.embedding_offset(f);
            let len = vocab * self.config.embedding_dim;
            tensors.push(NamedTensor {
                name: format!("embedding.{f}"),
                shape: vec![vocab, self.config.embedding_dim],
                data: self.values[off..off + len].to_vec(),
            });
        }
        for (l, (w_off, b_off, fan_in, fan_out)) in self.layer_offsets().into_iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("layer.{l}.weight"),
                shape: vec![fan_out, fan_in],
                data: self.values[w_off..w_off + fan_in * fan_out].to_vec(),
            });
            tensors.push(NamedTensor {
                name: format!("layer.{l}.bias"),
                shape: vec![fan_out],
                data: self.values[b_off..b_off + fan_out].to_vec(),
            });
        }
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut params = Self::zeros(ckpt.config.clone())?;
        let expected = params.to_checkpoint();
        if ckpt.tensors.len() != expected.tensors.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} tensors, expected {}",
                ckpt.tensors.len(),
                expected.tensors.len()
            )));
        }
        let mut cursor = 0;
        for want in &expected.tensors {
            let got = ckpt
                .tensors
                .iter()
                .find(|t| t.name == want.name)
                .ok_or_else(|| Error::InvalidInput(format!("missing tensor {:?}", want.name)))?;
            if got.shape != want.shape {
                return Err(Error::InvalidInput(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    want.name, got.shape, want.shape
                )));
            }
            if got.data.len() != want.data.len() {
                return Err(Error::InvalidInput(format!(
                    "tensor {:?} has {} values, expected {}",
                    want.name,
                    got.data.len(),
                    want.data.len()
                )));
            }
            params.values[cursor..cursor + got.data.len()].copy_from_slice(&got.data);
            cursor += got.data.len();
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint contains NaN/Inf".into()));
        }
        Ok(params)
    }
}

/// Cached activations from a batch forward pass, consumed by
/// [`backward`]. `activations[r][l]` is record `r`'s output of hidden
/// layer `l`; `inputs[r]` its concatenated input vector.
#[derive(Debug)]
pub struct ForwardCache {
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) activations: Vec<[Vec<f64>; 3]>,
    pub(crate) scores: Vec<f64>,
}

fn build_input(params: &RankerParams, x: &FeatureRecord) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if x.categorical.len() != cfg.field_vocabs.len() {
        return Err(Error::InvalidInput(format!(
            "record has {} categorical ids, config has {} fields",
            x.categorical.len(),
            cfg.field_vocabs.len()
        )));
    }
    if x.dense.len() != cfg.dense_dim {
        return Err(Error::InvalidInput(format!(
            "record has {} dense features, config expects {}",
            x.dense.len(),
            cfg.dense_dim
        )));
    }
    let mut input = Vec::with_capacity(cfg.input_dim());
    for (f, (&id, &vocab)) in x.categorical.iter().zip(&cfg.field_vocabs).enumerate() {
        if id as usize >= vocab {
            return Err(Error::InvalidInput(format!(
                "id {id} out of vocabulary for field {f} (size {vocab})"
            )));
        }
        let off = params.embedding_offset(f) + id as usize * cfg.embedding_dim;
        input.extend_from_slice(&params.values[off..off + cfg.embedding_dim]);
    }
    input.extend_from_slice(&x.dense);
    Ok(input)
}

fn affine(params: &RankerParams, layer: usize, input: &[f64]) -> Vec<f64> {
    let (w_off, b_off, fan_in, fan_out) = params.layer_offsets()[layer];
    let mut out = Vec::with_capacity(fan_out);
    for o in 0..fan_out {
        let row = &params.values[w_off + o * fan_in..w_off + (o + 1) * fan_in];
        let mut z = params.values[b_off + o];
        for (w, a) in row.iter().zip(input) {
            z += w * a;
        }
        out.push(z);
    }
    out
}

/// Deterministic forward pass for one record.
pub fn score(params: &RankerParams, x: &FeatureRecord) -> Result<ScoredPair> {
    let input = build_input(params, x)?;
    let mut a = input;
    for l in 0..3 {
        a = affine(params, l, &a);
        for v in a.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let s = affine(params, 3, &a)[0];
    Ok(ScoredPair::from_score(s))
}

/// Forward pass over a batch, keeping the activations needed for
/// [`backward`].
pub fn forward_batch(
    params: &RankerParams,
    records: &[FeatureRecord],
) -> Result<(Vec<ScoredPair>, ForwardCache)> {
    let mut scored = Vec::with_capacity(records.len());
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(records.len()),
        activations: Vec::with_capacity(records.len()),
        scores: Vec::with_capacity(records.len()),
    };
    for x in records {
        let input = build_input(params, x)?;
        let mut acts: [Vec<f64>; 3] = Default::default();
        let mut a = input.clone();
        for (l, slot) in acts.iter_mut().enumerate() {
            a = affine(params, l, &a);
            for v in a.iter_mut() {
                *v = v.max(0.0);
            }
            *slot = a.clone();
        }
        let s = affine(params, 3, &a)[0];
        scored.push(ScoredPair::from_score(s));
        cache.inputs.push(input);
        cache.activations.push(acts);
        cache.scores.push(s);
    }
    Ok((scored, cache))
}

/// Pairwise logistic ranking loss against teacher scores:
/// `sum over ordered pairs with q_i > q_j of ln(1 + exp(-(s_i - s_j)))`;
/// tied teacher scores contribute nothing. Also returns `dL/ds`.
pub fn ltr_loss(pre_scores: &[f64], teacher_scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pre_scores.len() != teacher_scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} model scores vs {} teacher scores",
            pre_scores.len(),
            teacher_scores.len()
        )));
    }
    if pre_scores.is_empty() {
        return Err(Error::InvalidInput("empty score list".into()));
    }
    if pre_scores.iter().chain(teacher_scores).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores contain NaN/Inf".into()));
    }
    let n = pre_scores.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if teacher_scores[i] > teacher_scores[j] {
                let margin = pre_scores[i] - pre_scores[j];
                loss += softplus_neg(margin);
                let g = sigmoid(-margin);
                grad[i] -= g;
                grad[j] += g;
            }
        }
    }
    Ok((loss, grad))
}

/// Exact reverse-mode gradient over the flat parameter vector.
///
/// Upstream gradients arrive per record in score space (`dloss_dscore`)
/// and probability space (`dloss_dprob`); the latter is chained through
/// `dp/ds = p(1-p)`. The output coordinates match [`RankerParams::flat`].
pub fn backward(
    params: &RankerParams,
    records: &[FeatureRecord],
    cache: &ForwardCache,
    dloss_dscore: &[f64],
    dloss_dprob: &[f64],
) -> Result<Vec<f64>> {
    let n = records.len();
    if cache.inputs.len() != n || dloss_dscore.len() != n || dloss_dprob.len() != n {
        return Err(Error::InvalidInput(format!(
            "batch size mismatch: {} records, {} cached, {} dscore, {} dprob",
            n,
            cache.inputs.len(),
            dloss_dscore.len(),
            dloss_dprob.len()
        )));
    }
    let offsets = params.layer_offsets();
    let mut grad = vec![0.0; params.param_count()];
    let cfg = &params.config;

    for r in 0..n {
        let p = sigmoid(cache.scores[r]);
        let ds = dloss_dscore[r] + dloss_dprob[r] * p * (1.0 - p);
        if ds == 0.0 {
            continue;
        }

        // Head: linear, one output.
        let (w_off, b_off, fan_in, _) = offsets[3];
        let a3 = &cache.activations[r][2];
        for (k, &a) in a3.iter().enumerate() {
            grad[w_off + k] += ds * a;
        }
        grad[b_off] += ds;
        let mut da: Vec<f64> = (0..fan_in)
            .map(|k| params.values[w_off + k] * ds)
            .collect();

        // Hidden layers in reverse.
        for l in (0..3).rev() {
            let out_act = &cache.activations[r][l];
            let prev: &[f64] = if l == 0 {
                &cache.inputs[r]
            } else {
                &cache.activations[r][l - 1]
            };
            let (w_off, b_off, fan_in, fan_out) = offsets[l];
            let mut da_prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                if out_act[o] <= 0.0 {
                    continue; // ReLU gate closed
                }
                let dz = da[o];
                if dz == 0.0 {
                    continue;
                }
                let row = w_off + o * fan_in;
                for k in 0..fan_in {
                    grad[row + k] += dz * prev[k];
                    da_prev[k] += params.values[row + k] * dz;
                }
                grad[b_off + o] += dz;
            }
            da = da_prev;
        }

        // Scatter the input gradient into the touched embedding rows.
        for (f, &id) in records[r].categorical.iter().enumerate() {
            let dst = params.embedding_offset(f) + id as usize * cfg.embedding_dim;
            let src = f * cfg.embedding_dim;
            for k in 0..cfg.embedding_dim {
                grad[dst + k] += da[src + k];
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mini_config() -> RankerConfig {
        RankerConfig {
            field_vocabs: vec![2],
            embedding_dim: 1,
            dense_dim: 1,
            hidden: [2, 2, 2],
        }
    }

    #[test]
    fn zero_network_scores_zero() {
        let cfg = RankerConfig {
            field_vocabs: vec![3, 4],
            embedding_dim: 2,
            dense_dim: 1,
            hidden: [4, 3, 2],
        };
        let params = RankerParams::zeros(cfg).unwrap();
        let x = FeatureRecord {
            categorical: vec![1, 2],
            dense: vec![0.7],
        };
        let sp = score(&params, &x).unwrap();
        assert_eq!(sp.score, 0.0);
        assert_eq!(sp.prob, 0.5);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = mini_config();
        let params = RankerParams::init_seeded(cfg, 5).unwrap();
        let x = FeatureRecord {
            categorical: vec![1],
            dense: vec![-0.3],
        };
        let a = score(&params, &x).unwrap();
        let b = score(&params, &x).unwrap();
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        assert!((a.prob - sigmoid(a.score)).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let params = RankerParams::zeros(mini_config()).unwrap();
        let x = FeatureRecord {
            categorical: vec![2],
            dense: vec![0.0],
        };
        assert!(score(&params, &x).is_err());
        let x = FeatureRecord {
            categorical: vec![0],
            dense: vec![],
        };
        assert!(score(&params, &x).is_err());
    }

    #[test]
    fn miniature_forward_matches_hand_arithmetic() {
        // 1 categorical field (vocab 2, dim 1) + 1 dense feature, hidden
        // (2,2,2). Flat layout: emb[2], W0[2x2], b0[2], W1[2x2], b1[2],
        // W2[2x2], b2[2], W3[1x2], b3[1].
        let cfg = mini_config();
        #[rustfmt::skip]
        let flat = vec![
            0.2, 0.5,               // embedding rows
            1.0, 0.5, -0.5, 0.25,   // W0 rows
            0.1, 0.2,               // b0
            2.0, 1.0, 1.0, -1.0,    // W1
            0.0, 0.05,              // b1
            1.0, 1.0, 0.5, -0.5,    // W2
            -0.1, 0.0,              // b2
            2.0, -4.0,              // W3
            0.3,                    // b3
        ];
        let params = RankerParams::from_flat(cfg, flat).unwrap();
        let x = FeatureRecord {
            categorical: vec![1], // embedding value 0.5
            dense: vec![-1.0],
        };
        // Hand execution:
        // input = [0.5, -1.0]
        // z1 = [1.0*0.5 + 0.5*(-1) + 0.1, -0.5*0.5 + 0.25*(-1) + 0.2]
        //    = [0.1, -0.3]                 -> a1 = [0.1, 0.0]
        // z2 = [2*0.1 + 1*0 + 0, 1*0.1 - 1*0 + 0.05]
        //    = [0.2, 0.15]                 -> a2 = [0.2, 0.15]
        // z3 = [0.2 + 0.15 - 0.1, 0.5*0.2 - 0.5*0.15 + 0]
        //    = [0.25, 0.025]               -> a3 = [0.25, 0.025]
        // s  = 2*0.25 - 4*0.025 + 0.3 = 0.7
        let sp = score(&params, &x).unwrap();
        assert!((sp.score - 0.7).abs() < 1e-15, "score {}", sp.score);
        assert!((sp.prob - sigmoid(0.7)).abs() < 1e-15);
    }

    #[test]
    fn ltr_loss_examples() {
        // All teacher scores tied: both branches empty.
        let (l, g) = ltr_loss(&[1.0, -2.0, 0.3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);

        let (l, g) = ltr_loss(&[0.0, 0.0], &[2.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);

        let (l, _) = ltr_loss(&[10.0, 0.0], &[2.0, 1.0]).unwrap();
        assert!((l - 4.5398899216864646e-5).abs() < 1e-16);
    }

    #[test]
    fn ltr_loss_antisymmetric_gradient() {
        let (_, g) = ltr_loss(&[0.4, -1.7], &[3.0, 1.0]).unwrap();
        assert!((g[0] + g[1]).abs() < 1e-15);
    }

    #[test]
    fn ltr_loss_gradient_matches_finite_differences() {
        let s = [0.3, -0.8, 1.4, 0.1];
        let q = [2.0, 0.5, 1.5, 0.5];
        let (_, grad) = ltr_loss(&s, &q).unwrap();
        let h = 1e-6;
        for i in 0..s.len() {
            let mut up = s;
            up[i] += h;
            let mut dn = s;
            dn[i] -= h;
            let (lu, _) = ltr_loss(&up, &q).unwrap();
            let (ld, _) = ltr_loss(&dn, &q).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-6,
                "coord {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let cfg = mini_config();
        let params = RankerParams::init_seeded(cfg, 3).unwrap();
        let records = vec![FeatureRecord {
            categorical: vec![0],
            dense: vec![0.4],
        }];
        let (_, cache) = forward_batch(&params, &records).unwrap();
        let g = backward(&params, &records, &cache, &[0.0], &[0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradient_is_its_input_activations() {
        // Linear chain rule at the head: with dL/ds = 1, the head weight
        // gradient equals the head's input activations and its bias
        // gradient is 1.
        let cfg = mini_config();
        let params = RankerParams::init_seeded(cfg, 9).unwrap();
        let records = vec![FeatureRecord {
            categorical: vec![1],
            dense: vec![0.8],
        }];
        let (_, cache) = forward_batch(&params, &records).unwrap();
        let g = backward(&params, &records, &cache, &[1.0], &[0.0]).unwrap();
        let (w_off, b_off, fan_in, _) = params.layer_offsets()[3];
        for k in 0..fan_in {
            assert!((g[w_off + k] - cache.activations[0][2][k]).abs() < 1e-15);
        }
        assert!((g[b_off] - 1.0).abs() < 1e-15);
    }

    /// Scalar objective combining score-space and prob-space upstream
    /// gradients, used to finite-difference the full backward pass.
    fn probe_loss(params: &RankerParams, records: &[FeatureRecord], cs: &[f64], cp: &[f64]) -> f64 {
        records
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let sp = score(params, x).unwrap();
                cs[i] * sp.score + cp[i] * sp.prob
            })
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let cfg = RankerConfig {
            field_vocabs: vec![3, 2],
            embedding_dim: 2,
            dense_dim: 2,
            hidden: [4, 3, 2],
        };
        let mut params = RankerParams::init_seeded(cfg, 77).unwrap();
        // Nonzero biases so those coordinates are exercised too.
        let mut rng = rng_for(78, "bias-jitter");
        let n = params.param_count();
        let jitter: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        params.apply_delta(&jitter, 1.0).unwrap();

        let records = vec![
            FeatureRecord { categorical: vec![0, 1], dense: vec![0.3, -0.7] },
            FeatureRecord { categorical: vec![2, 0], dense: vec![-1.1, 0.2] },
            FeatureRecord { categorical: vec![1, 1], dense: vec![0.0, 0.9] },
        ];
        let cs = [0.7, -1.2, 0.4];
        let cp = [1.5, 0.3, -0.8];
        let (_, cache) = forward_batch(&params, &records).unwrap();
        let grad = backward(&params, &records, &cache, &cs, &cp).unwrap();

        let h = 1e-5;
        let mut rng = rng_for(79, "fd-coords");
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.gen_range(0..n);
            let mut up = params.clone();
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            up.apply_delta(&e, h).unwrap();
            let mut dn = params.clone();
            dn.apply_delta(&e, -h).unwrap();
            let fd = (probe_loss(&up, &records, &cs, &cp)
                - probe_loss(&dn, &records, &cs, &cp))
                / (2.0 * h);
            if fd.abs() < 1e-10 && grad[i].abs() < 1e-10 {
                continue; // untouched embedding row or gated unit
            }
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "coord {i}: analytic {} vs fd {fd}", grad[i]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = RankerConfig {
            field_vocabs: vec![3, 2],
            embedding_dim: 2,
            dense_dim: 1,
            hidden: [3, 2, 2],
        };
        let params = RankerParams::init_seeded(cfg, 21).unwrap();
        let ckpt = params.to_checkpoint();
        assert_eq!(ckpt.format_version, CHECKPOINT_VERSION);
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = RankerParams::from_checkpoint(&back).unwrap();
        assert_eq!(params, restored);

        let mut bad = params.to_checkpoint();
        bad.tensors[0].shape = vec![1, 1];
        assert!(RankerParams::from_checkpoint(&bad).is_err());
        let mut bad = params.to_checkpoint();
        bad.format_version = 99;
        assert!(RankerParams::from_checkpoint(&bad).is_err());
    }

    proptest! {
        #[test]
        fn ltr_loss_is_translation_invariant(
            s in prop::collection::vec(-5.0f64..5.0, 2..6),
            shift in -10.0f64..10.0,
        ) {
            let q: Vec<f64> = (0..s.len()).map(|i| (i % 3) as f64).collect();
            let (l0, _) = ltr_loss(&s, &q).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
            let (l1, _) = ltr_loss(&shifted, &q).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9);
        }

        #[test]
        fn ltr_gradient_sums_to_zero(
            s in prop::collection::vec(-5.0f64..5.0, 2..6),
            q in prop::collection::vec(0.0f64..3.0, 2..6),
        ) {
            prop_assume!(s.len() == q.len());
            let (_, g) = ltr_loss(&s, &q).unwrap();
            // Every pair contributes +/- the same mass.
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
