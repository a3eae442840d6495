//! Tiny fixed-context autoregressive LM with exact manual backpropagation.
//!
//! Architecture: the last `k` context token embeddings are concatenated and
//! fed through one tanh hidden layer into a softmax over the vocabulary.
//! All arithmetic is in f64 so gradients can be checked against central
//! finite differences at tight tolerances.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SeqPair;
use crate::error::{Error, Result};

/// A normalized probability vector over the vocabulary at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "token distribution entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "token distribution sums to {sum}, not 1"
            )));
        }
        Ok(TokenDist { probs })
    }

    /// Constructor for vectors already known to be normalized (softmax
    /// outputs, exact counts). Skips the validation pass.
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        TokenDist { probs }
    }

    pub fn from_softmax(logits: &[f64]) -> Self {
        TokenDist {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub param_seed: u64,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.context_len < 1
            || self.embed_dim < 1
            || self.hidden_dim < 1
        {
            return Err(Error::InvalidArgument(format!(
                "invalid model config: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The five parameter tensors, stored flat. Shared layout for parameters,
/// gradients, and Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// vocab_size x embed_dim
    pub embedding: Vec<f64>,
    /// hidden_dim x (context_len * embed_dim)
    pub w1: Vec<f64>,
    /// hidden_dim
    pub b1: Vec<f64>,
    /// vocab_size x hidden_dim
    pub w2: Vec<f64>,
    /// vocab_size
    pub b2: Vec<f64>,
}

impl Tensors {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, k, d, h) = (
            config.vocab_size,
            config.context_len,
            config.embed_dim,
            config.hidden_dim,
        );
        Tensors {
            embedding: vec![0.0; v * d],
            w1: vec![0.0; h * k * d],
            b1: vec![0.0; h],
            w2: vec![0.0; v * h],
            b2: vec![0.0; v],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.embedding
            .iter()
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embedding
            .iter_mut()
            .chain(self.w1.iter_mut())
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.embedding.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// self += other * scale
    pub fn add_scaled(&mut self, other: &Tensors, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b * scale;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub t: Tensors,
}

/// Bias-corrected Adam state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensors,
    pub v: Tensors,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(config: &ModelConfig, lr: f64) -> Self {
        AdamState {
            m: Tensors::zeros(config),
            v: Tensors::zeros(config),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Uniform(-s, s) weight init with s = 1/sqrt(fan_in); biases zero.
pub fn init(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
    let mut t = Tensors::zeros(config);
    let s_emb = 1.0 / (config.embed_dim as f64).sqrt();
    let s_w1 = 1.0 / ((config.context_len * config.embed_dim) as f64).sqrt();
    let s_w2 = 1.0 / (config.hidden_dim as f64).sqrt();
    for v in t.embedding.iter_mut() {
        *v = rng.gen_range(-s_emb..s_emb);
    }
    for v in t.w1.iter_mut() {
        *v = rng.gen_range(-s_w1..s_w1);
    }
    for v in t.w2.iter_mut() {
        *v = rng.gen_range(-s_w2..s_w2);
    }
    Ok(ModelParams { config: *config, t })
}

/// Forward activations kept for the backward pass.
struct ForwardCache {
    embeds: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ModelParams {
    fn forward_cache(&self, context: &[usize]) -> ForwardCache {
        let c = &self.config;
        assert_eq!(context.len(), c.context_len, "context length mismatch");
        let d = c.embed_dim;
        let kd = c.context_len * d;
        let mut embeds = vec![0.0; kd];
        for (slot, &tok) in context.iter().enumerate() {
            debug_assert!(tok < c.vocab_size);
            embeds[slot * d..(slot + 1) * d].copy_from_slice(&self.t.embedding[tok * d..(tok + 1) * d]);
        }
        let mut hidden = vec![0.0; c.hidden_dim];
        for r in 0..c.hidden_dim {
            let mut acc = self.t.b1[r];
            let row = &self.t.w1[r * kd..(r + 1) * kd];
            for (w, e) in row.iter().zip(embeds.iter()) {
                acc += w * e;
            }
            hidden[r] = acc.tanh();
        }
        let mut logits = vec![0.0; c.vocab_size];
        for i in 0..c.vocab_size {
            let mut acc = self.t.b2[i];
            let row = &self.t.w2[i * c.hidden_dim..(i + 1) * c.hidden_dim];
            for (w, h) in row.iter().zip(hidden.iter()) {
                acc += w * h;
            }
            logits[i] = acc;
        }
        let probs = softmax(&logits);
        ForwardCache {
            embeds,
            hidden,
            logits,
            probs,
        }
    }

    pub fn logits(&self, context: &[usize]) -> Vec<f64> {
        self.forward_cache(context).logits
    }

    /// Next-token distribution given exactly `context_len` token ids.
    pub fn forward_dist(&self, context: &[usize]) -> TokenDist {
        TokenDist {
            probs: self.forward_cache(context).probs,
        }
    }

    /// The length-k context window ending just before position `t` of `y`,
    /// built from x ‖ y_<t and left-padded with token id 0.
    pub fn context_at(&self, x: &[usize], y: &[usize], t: usize) -> Vec<usize> {
        let k = self.config.context_len;
        let mut seq: Vec<usize> = Vec::with_capacity(x.len() + t);
        seq.extend_from_slice(x);
        seq.extend_from_slice(&y[..t]);
        let mut ctx = vec![0usize; k];
        let take = seq.len().min(k);
        ctx[k - take..].copy_from_slice(&seq[seq.len() - take..]);
        ctx
    }

    /// One distribution per position of `y`, teacher-forced on x ‖ y_<t.
    pub fn sequence_dists(&self, x: &[usize], y: &[usize]) -> Vec<TokenDist> {
        (0..y.len())
            .map(|t| self.forward_dist(&self.context_at(x, y, t)))
            .collect()
    }

    /// Per-position logits along the same trajectory.
    pub fn sequence_logits(&self, x: &[usize], y: &[usize]) -> Vec<Vec<f64>> {
        (0..y.len())
            .map(|t| self.logits(&self.context_at(x, y, t)))
            .collect()
    }

    /// Autoregressive ancestral sampling; temperature 0 means greedy argmax
    /// with ties broken by lowest token id.
    pub fn sample_continuation(
        &self,
        x: &[usize],
        max_len: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        assert!(max_len >= 1);
        assert!(temperature >= 0.0);
        let mut y = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ctx = self.context_at(x, &y, t);
            let logits = self.logits(&ctx);
            let next = if temperature == 0.0 {
                argmax_lowest_tie(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
                let probs = softmax(&scaled);
                sample_categorical(rng, &probs)
            };
            y.push(next);
        }
        y
    }

    /// Mean negative log-likelihood per token, in nats.
    pub fn nll(&self, pairs: &[SeqPair]) -> f64 {
        assert!(!pairs.is_empty());
        let mut total = 0.0;
        let mut n_tok = 0usize;
        for pair in pairs {
            for (t, &tok) in pair.y.iter().enumerate() {
                let dist = self.forward_dist(&self.context_at(&pair.x, &pair.y, t));
                total -= dist.probs()[tok].ln();
                n_tok += 1;
            }
        }
        total / n_tok as f64
    }

    /// Exact chain rule from per-position gradients at the output
    /// probabilities down to all parameters, accumulated over positions.
    pub fn backward(&self, x: &[usize], y: &[usize], grad_at_probs: &[Vec<f64>]) -> Tensors {
        assert_eq!(grad_at_probs.len(), y.len());
        let mut grad = Tensors::zeros(&self.config);
        for (t, upstream) in grad_at_probs.iter().enumerate() {
            let ctx = self.context_at(x, y, t);
            self.backward_position(&ctx, upstream, &mut grad);
        }
        grad
    }

    fn backward_position(&self, context: &[usize], grad_probs: &[f64], grad: &mut Tensors) {
        let c = &self.config;
        assert_eq!(grad_probs.len(), c.vocab_size);
        let d = c.embed_dim;
        let kd = c.context_len * d;
        let cache = self.forward_cache(context);

        // Through softmax: dL/dlogit_i = q_i * (u_i - sum_j q_j u_j).
        let dot: f64 = cache
            .probs
            .iter()
            .zip(grad_probs.iter())
            .map(|(q, u)| q * u)
            .sum();
        let dlogits: Vec<f64> = cache
            .probs
            .iter()
            .zip(grad_probs.iter())
            .map(|(q, u)| q * (u - dot))
            .collect();

        // Output layer.
        let mut dhidden = vec![0.0; c.hidden_dim];
        for i in 0..c.vocab_size {
            let dl = dlogits[i];
            grad.b2[i] += dl;
            let w_row = &self.t.w2[i * c.hidden_dim..(i + 1) * c.hidden_dim];
            let g_row = &mut grad.w2[i * c.hidden_dim..(i + 1) * c.hidden_dim];
            for j in 0..c.hidden_dim {
                g_row[j] += dl * cache.hidden[j];
                dhidden[j] += dl * w_row[j];
            }
        }

        // Through tanh and the hidden layer.
        let mut dembeds = vec![0.0; kd];
        for r in 0..c.hidden_dim {
            let dpre = dhidden[r] * (1.0 - cache.hidden[r] * cache.hidden[r]);
            grad.b1[r] += dpre;
            let w_row = &self.t.w1[r * kd..(r + 1) * kd];
            let g_row = &mut grad.w1[r * kd..(r + 1) * kd];
            for cidx in 0..kd {
                g_row[cidx] += dpre * cache.embeds[cidx];
                dembeds[cidx] += dpre * w_row[cidx];
            }
        }

        // Embedding rows accumulate across context slots.
        for (slot, &tok) in context.iter().enumerate() {
            let g_row = &mut grad.embedding[tok * d..(tok + 1) * d];
            for (g, de) in g_row.iter_mut().zip(&dembeds[slot * d..(slot + 1) * d]) {
                *g += de;
            }
        }
    }
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Standard bias-corrected Adam update; rejects non-finite gradients.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grad: &Tensors,
    lr: f64,
) -> Result<()> {
    if !grad.all_finite() {
        return Err(Error::InvalidArgument(
            "non-finite gradient passed to adam_step".into(),
        ));
    }
    state.lr = lr;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (((p, g), m), v) in params
        .t
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    debug_assert!(params.t.all_finite());
    Ok(())
}

const CKPT_MAGIC: &str = "DLLM-CKPT v1";

/// Writes the checkpoint as a text header plus hex-encoded f64 bit patterns,
/// so round-trips are bit-exact.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let c = &params.config;
    let mut out = String::new();
    writeln!(out, "{CKPT_MAGIC}").expect("string write");
    writeln!(
        out,
        "vocab_size={} context_len={} embed_dim={} hidden_dim={} param_seed={}",
        c.vocab_size, c.context_len, c.embed_dim, c.hidden_dim, c.param_seed
    )
    .expect("string write");
    for (name, values) in [
        ("embedding", &params.t.embedding),
        ("w1", &params.t.w1),
        ("b1", &params.t.b1),
        ("w2", &params.t.w2),
        ("b2", &params.t.b2),
    ] {
        write!(out, "{name} {}", values.len()).expect("string write");
        for v in values {
            write!(out, " {:016x}", v.to_bits()).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint file".into()))?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic string: {magic:?}")));
    }
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing config line".into()))?;
    let mut fields = std::collections::HashMap::new();
    for field in meta_line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config field: {field}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<u64> {
        fields
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key: {key}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad config value for {key}")))
    };
    let config = ModelConfig {
        vocab_size: get("vocab_size")? as usize,
        context_len: get("context_len")? as usize,
        embed_dim: get("embed_dim")? as usize,
        hidden_dim: get("hidden_dim")? as usize,
        param_seed: get("param_seed")?,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut t = Tensors::zeros(&config);
    for (name, values) in [
        ("embedding", &mut t.embedding),
        ("w1", &mut t.w1),
        ("b1", &mut t.b1),
        ("w2", &mut t.w2),
        ("b2", &mut t.b2),
    ] {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor: {name}")))?;
        let mut parts = line.split_whitespace();
        let got_name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("empty tensor line".into()))?;
        if got_name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {got_name}"
            )));
        }
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad length for tensor {name}")))?;
        if count != values.len() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: header says {count}, config implies {}",
                values.len()
            )));
        }
        for (i, slot) in values.iter_mut().enumerate() {
            let word = parts.next().ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} truncated at value {i}"))
            })?;
            let bits = u64::from_str_radix(word, 16)
                .map_err(|_| Error::Checkpoint(format!("corrupt value in {name}: {word}")))?;
            *slot = f64::from_bits(bits);
        }
        if parts.next().is_some() {
            return Err(Error::Checkpoint(format!("trailing values in {name}")));
        }
    }
    Ok(ModelParams { config, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_generator, sample_corpus};

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            context_len: 2,
            embed_dim: 3,
            hidden_dim: 4,
            param_seed: 11,
        }
    }

    #[test]
    fn init_biases_zero_and_bounded() {
        let c = small_config();
        let p = init(&c).unwrap();
        assert!(p.t.b1.iter().all(|&v| v == 0.0));
        assert!(p.t.b2.iter().all(|&v| v == 0.0));
        let bound = 1.0 / ((c.context_len * c.embed_dim) as f64).sqrt();
        assert!(p.t.w1.iter().all(|&v| v.abs() <= bound));
        let p2 = init(&c).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn zero_params_give_uniform_dist() {
        let c = small_config();
        let p = ModelParams {
            config: c,
            t: Tensors::zeros(&c),
        };
        let dist = p.forward_dist(&[0, 1]);
        for &q in dist.probs() {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_dist_normalized() {
        let p = init(&small_config()).unwrap();
        let dist = p.forward_dist(&[3, 2]);
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(dist.probs().iter().all(|&q| q > 0.0));
    }

    #[test]
    fn hand_set_logits_match_softmax() {
        // Zero weights except b2 = (1, 0, 0, 0) force logits (1, 0, 0, 0).
        let c = small_config();
        let mut p = ModelParams {
            config: c,
            t: Tensors::zeros(&c),
        };
        p.t.b2[0] = 1.0;
        let dist = p.forward_dist(&[0, 0]);
        let expected = softmax(&[1.0, 0.0, 0.0, 0.0]);
        assert!((dist.probs()[0] - expected[0]).abs() < 1e-12);
        assert!((dist.probs()[0] - 0.47536688641851).abs() < 1e-10);
        assert!((dist.probs()[1] - 0.17487770452716).abs() < 1e-10);
    }

    #[test]
    fn sequence_dists_match_forward() {
        let p = init(&small_config()).unwrap();
        let x = vec![1, 2, 3];
        let y = vec![0];
        let dists = p.sequence_dists(&x, &y);
        assert_eq!(dists.len(), 1);
        // Single position conditions on the tail of x.
        let direct = p.forward_dist(&[2, 3]);
        assert_eq!(dists[0], direct);
    }

    #[test]
    fn nll_of_uniform_model_is_ln_v() {
        let c = small_config();
        let p = ModelParams {
            config: c,
            t: Tensors::zeros(&c),
        };
        let pairs = vec![SeqPair {
            x: vec![0, 1],
            y: vec![2, 3, 0],
        }];
        assert!((p.nll(&pairs) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_naive_recomputation() {
        let p = init(&small_config()).unwrap();
        let spec = make_generator(3, 4, 5).unwrap();
        let ds = sample_corpus(&spec, 10, 3, 4, 6).unwrap();
        let fast = p.nll(&ds.pairs);
        // Naive re-implementation from sequence_dists.
        let mut total = 0.0;
        let mut n = 0usize;
        for pair in &ds.pairs {
            for (dist, &tok) in p.sequence_dists(&pair.x, &pair.y).iter().zip(&pair.y) {
                total -= dist.probs()[tok].ln();
                n += 1;
            }
        }
        assert!((fast - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn greedy_sampling_is_deterministic_argmax() {
        let p = init(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = p.sample_continuation(&[1, 2], 5, 0.0, &mut rng);
        let b = p.sample_continuation(&[1, 2], 5, 0.0, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        // First token must be the argmax of the first distribution.
        let dist = p.forward_dist(&[1, 2]);
        let best = dist
            .probs()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(a[0], best);
    }

    #[test]
    fn sampling_frequency_matches_forward_dist() {
        let p = init(&small_config()).unwrap();
        let ctx = [1usize, 3];
        let dist = p.forward_dist(&ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = vec![0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let y = p.sample_continuation(&ctx, 1, 1.0, &mut rng);
            counts[y[0]] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(dist.probs())
            .map(|(&c, &q)| (c as f64 / n as f64 - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grad() {
        let p = init(&small_config()).unwrap();
        let grad = p.backward(&[0, 1], &[2], &[vec![0.0; 4]]);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = init(&small_config()).unwrap();
        let upstream = vec![vec![0.3, -1.2, 0.5, 2.0]];
        let doubled: Vec<Vec<f64>> = upstream
            .iter()
            .map(|u| u.iter().map(|v| 2.0 * v).collect())
            .collect();
        let g1 = p.backward(&[0, 1], &[2], &upstream);
        let g2 = p.backward(&[0, 1], &[2], &doubled);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for trial in 0..3 {
            let c = ModelConfig {
                vocab_size: 4,
                context_len: 2,
                embed_dim: 2,
                hidden_dim: 3,
                param_seed: 100 + trial,
            };
            let p = init(&c).unwrap();
            let x: Vec<usize> = (0..2).map(|_| rng.gen_range(0..4)).collect();
            let y: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();

            // Analytic: dNLL/dq at each position is -1[j=y_t]/q_{y_t}/N.
            let dists = p.sequence_dists(&x, &y);
            let n_tok = y.len() as f64;
            let upstream: Vec<Vec<f64>> = dists
                .iter()
                .zip(&y)
                .map(|(dist, &tok)| {
                    let mut u = vec![0.0; 4];
                    u[tok] = -1.0 / (dist.probs()[tok] * n_tok);
                    u
                })
                .collect();
            let analytic = p.backward(&x, &y, &upstream);

            let pair = [SeqPair {
                x: x.clone(),
                y: y.clone(),
            }];
            let step = 1e-5;
            let n_params = analytic.num_params();
            for idx in 0..n_params {
                let mut plus = p.clone();
                *plus.t.iter_mut().nth(idx).unwrap() += step;
                let mut minus = p.clone();
                *minus.t.iter_mut().nth(idx).unwrap() -= step;
                let fd = (plus.nll(&pair) - minus.nll(&pair)) / (2.0 * step);
                let an = *analytic.iter().nth(idx).unwrap();
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "trial {trial} param {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let c = small_config();
        let mut p = init(&c).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&c, 1e-3);
        adam_step(&mut p, &mut state, &Tensors::zeros(&c), 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let c = small_config();
        let mut p = init(&c).unwrap();
        let before = p.clone();
        let mut grad = Tensors::zeros(&c);
        for (i, g) in grad.iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.7 } else { -0.2 };
        }
        let mut state = AdamState::new(&c, 1e-3);
        adam_step(&mut p, &mut state, &grad, 1e-3).unwrap();
        for ((after, before), g) in p.t.iter().zip(before.t.iter()).zip(grad.iter()) {
            let delta = after - before;
            // First step: m_hat/sqrt(v_hat) = sign(g) up to eps.
            let expected = -1e-3 * g.signum();
            assert!((delta - expected).abs() < 1e-6, "delta {delta} vs {expected}");
        }
    }

    #[test]
    fn adam_matches_independent_update() {
        let c = small_config();
        let mut p = init(&c).unwrap();
        let reference = p.clone();
        let mut grad = Tensors::zeros(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in grad.iter_mut() {
            *g = rng.gen_range(-1.0..1.0);
        }
        let mut state = AdamState::new(&c, 2e-3);
        adam_step(&mut p, &mut state, &grad, 2e-3).unwrap();
        adam_step(&mut p, &mut state, &grad, 2e-3).unwrap();

        // Scalar re-implementation, two steps with the same gradient.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 2e-3);
        for (idx, (after, before)) in p.t.iter().zip(reference.t.iter()).enumerate() {
            let g = *grad.iter().nth(idx).unwrap();
            let mut val = *before;
            let mut m = 0.0;
            let mut v = 0.0;
            for t in 1..=2u32 {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1_pow(b1, t));
                let v_hat = v / (1.0 - b1_pow(b2, t));
                val -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            assert!((val - after).abs() < 1e-12);
        }

        fn b1_pow(b: f64, t: u32) -> f64 {
            b.powi(t as i32)
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let c = small_config();
        let mut p = init(&c).unwrap();
        let mut grad = Tensors::zeros(&c);
        grad.b2[0] = f64::NAN;
        let mut state = AdamState::new(&c, 1e-3);
        assert!(adam_step(&mut p, &mut state, &grad, 1e-3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "NOT-A-CKPT\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let p = init(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &path).unwrap();
        // Corrupt the header vocab size so tensor shapes disagree.
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("vocab_size=4", "vocab_size=5", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
