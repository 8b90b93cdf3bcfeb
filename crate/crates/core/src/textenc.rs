//! Tokenizer, vocabulary, and a tiny trainable causal language model.
//!
//! The model is a fixed-window feedforward next-token predictor: the last
//! `c` token embeddings are concatenated, pushed through one tanh layer, and
//! projected to vocabulary logits. It is deliberately small enough that every
//! gradient is hand-derived and checkable against finite differences, while
//! still giving the attack code a real parameter space to fine-tune: the same
//! embedding matrix that drives generation also produces the description
//! embedding `E^T` (mean of token embedding rows), so rank-loss gradients flow
//! into the language model exactly as they would for a large backbone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::normalize_words;
use crate::error::{Error, Result};
use crate::mathutil::{log_sum_exp, softmax, standard_normal};
use crate::TokenId;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

/// Description embedding; dimension equals the LM embedding dimension.
pub type TextEmbedding = Vec<f64>;

// ============================================================================
// Vocabulary
// ============================================================================

/// Word-level vocabulary with four reserved ids (PAD=0, UNK=1, BOS=2, EOS=3).
/// Non-reserved tokens are assigned ids in sorted order so two builds over
/// the same corpus agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocabulary {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| normalize_words(t))
            .collect();
        words.sort_unstable();
        words.dedup();

        let mut id_to_token: Vec<String> =
            ["<pad>", "<unk>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .map(|(id, tok)| (tok.clone(), id))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    /// Total id count, reserved ids included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Normalize, split, and map to ids; unknown words become UNK.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        normalize_words(text)
            .iter()
            .map(|w| self.token_to_id.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Render ids back to space-joined words, dropping reserved ids.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_RESERVED)
            .filter_map(|&id| self.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED] != ["<pad>", "<unk>", "<bos>", "<eos>"]
        {
            return Err(Error::Shape("checkpoint vocabulary lacks reserved tokens".into()));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .map(|(id, tok)| (tok.clone(), id))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token: tokens })
    }
}

// ============================================================================
// Model
// ============================================================================

/// Fixed-window feedforward causal LM.
///
/// Shapes: `emb` is |V|×d, `w1` is h×(c·d), `b1` is h, `w2` is |V|×h,
/// `b2` is |V|; all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub hidden: usize,
    pub context: usize,
    pub emb: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients with the same shapes as [`TinyLm`] parameters.
#[derive(Debug, Clone)]
pub struct LmGradients {
    pub emb: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LmGradients {
    pub fn zeros_like(lm: &TinyLm) -> LmGradients {
        LmGradients {
            emb: vec![0.0; lm.emb.len()],
            w1: vec![0.0; lm.w1.len()],
            b1: vec![0.0; lm.b1.len()],
            w2: vec![0.0; lm.w2.len()],
            b2: vec![0.0; lm.b2.len()],
        }
    }

    pub fn scaled_add(&mut self, other: &LmGradients, scale: f64) {
        for (a, b) in self.emb.iter_mut().zip(&other.emb) {
            *a += scale * b;
        }
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += scale * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += scale * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += scale * b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += scale * b;
        }
    }
}

impl TinyLm {
    /// Random init: embeddings at σ=0.1, layer weights at 1/√fan_in, zero biases.
    pub fn new(vocab: Vocabulary, dim: usize, hidden: usize, context: usize, seed: u64) -> TinyLm {
        assert!(dim > 0 && hidden > 0 && context > 0);
        let v = vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = (0..v * dim).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        let s1 = 1.0 / ((context * dim) as f64).sqrt();
        let w1 = (0..hidden * context * dim)
            .map(|_| s1 * standard_normal(&mut rng))
            .collect();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w2 = (0..v * hidden).map(|_| s2 * standard_normal(&mut rng)).collect();
        TinyLm {
            vocab,
            dim,
            hidden,
            context,
            emb,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; v],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn emb_row(&self, t: TokenId) -> &[f64] {
        &self.emb[t * self.dim..(t + 1) * self.dim]
    }

    /// Logits for the next token after an exactly-`c`-long context window.
    pub fn logits_for_window(&self, window: &[TokenId]) -> Result<Vec<f64>> {
        if window.len() != self.context {
            return Err(Error::Shape(format!(
                "context window has {} tokens, model expects {}",
                window.len(),
                self.context
            )));
        }
        let (_, _, logits) = self.forward(window)?;
        Ok(logits)
    }

    /// Forward pass for one window: returns (x, z, logits) where x is the
    /// concatenated context embedding and z the tanh hidden activations.
    fn forward(&self, window: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (c, d, h, v) = (self.context, self.dim, self.hidden, self.vocab_size());
        let mut x = vec![0.0; c * d];
        for (j, &t) in window.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("token id {t} out of vocabulary")));
            }
            x[j * d..(j + 1) * d].copy_from_slice(self.emb_row(t));
        }
        let mut z = vec![0.0; h];
        for j in 0..h {
            let row = &self.w1[j * c * d..(j + 1) * c * d];
            z[j] = (crate::mathutil::dot(row, &x) + self.b1[j]).tanh();
        }
        let mut logits = vec![0.0; v];
        for t in 0..v {
            let row = &self.w2[t * h..(t + 1) * h];
            logits[t] = crate::mathutil::dot(row, &z) + self.b2[t];
        }
        Ok((x, z, logits))
    }

    /// One SGD step: `param -= lr * grad` across every tensor.
    pub fn apply_gradients(&mut self, grads: &LmGradients, lr: f64) {
        for (p, g) in self.emb.iter_mut().zip(&grads.emb) {
            *p -= lr * g;
        }
        for (p, g) in self.w1.iter_mut().zip(&grads.w1) {
            *p -= lr * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= lr * g;
        }
        for (p, g) in self.w2.iter_mut().zip(&grads.w2) {
            *p -= lr * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= lr * g;
        }
        debug_assert!(self.params_finite());
    }

    pub fn params_finite(&self) -> bool {
        self.emb.iter().all(|x| x.is_finite())
            && self.w1.iter().all(|x| x.is_finite())
            && self.b1.iter().all(|x| x.is_finite())
            && self.w2.iter().all(|x| x.is_finite())
            && self.b2.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over dims and all parameter tensors; equal hashes mean
    /// bit-identical models.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in [self.vocab_size(), self.dim, self.hidden, self.context] {
            h.update(n.to_le_bytes());
        }
        for t in [&self.emb, &self.w1, &self.b1, &self.w2, &self.b2] {
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

// ============================================================================
// Embedding (E^T)
// ============================================================================

/// Mean of the token embedding rows. Callers truncate descriptions to the
/// word cap first. Differentiable: see [`embed_text_backward`].
pub fn embed_text(lm: &TinyLm, tokens: &[TokenId]) -> Result<TextEmbedding> {
    if tokens.is_empty() || tokens.iter().all(|&t| t == PAD) {
        return Err(Error::EmptyText("cannot embed empty or all-PAD text".into()));
    }
    let mut e = vec![0.0; lm.dim];
    for &t in tokens {
        if t >= lm.vocab_size() {
            return Err(Error::Index(format!("token id {t} out of vocabulary")));
        }
        for (k, slot) in e.iter_mut().enumerate() {
            *slot += lm.emb[t * lm.dim + k];
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for slot in e.iter_mut() {
        *slot *= inv;
    }
    Ok(e)
}

/// Accumulate `scale * ∂L/∂emb` into `grad_emb` given `upstream = ∂L/∂e` for
/// `e = embed_text(lm, tokens)`: each token row receives `upstream / len`.
pub fn embed_text_backward(
    tokens: &[TokenId],
    dim: usize,
    upstream: &[f64],
    grad_emb: &mut [f64],
    scale: f64,
) {
    let inv = scale / tokens.len() as f64;
    for &t in tokens {
        for (k, &u) in upstream.iter().enumerate() {
            grad_emb[t * dim + k] += inv * u;
        }
    }
}

// ============================================================================
// Training loss
// ============================================================================

/// Build BOS-padded next-token windows covering a whole token sequence,
/// with an EOS target appended so the model learns to stop. Every window is
/// `c` context tokens plus one target.
pub fn make_windows(tokens: &[TokenId], context: usize) -> Vec<Vec<TokenId>> {
    let mut padded = vec![BOS; context];
    padded.extend_from_slice(tokens);
    let mut targets: Vec<TokenId> = tokens.to_vec();
    targets.push(EOS);
    targets
        .iter()
        .enumerate()
        .map(|(i, &tgt)| {
            let mut w = padded[i..i + context].to_vec();
            w.push(tgt);
            w
        })
        .collect()
}

/// Mean negative log-likelihood over a window batch, with analytic gradients
/// for every parameter tensor.
pub fn lm_loss_and_grad(lm: &TinyLm, windows: &[Vec<TokenId>]) -> Result<(f64, LmGradients)> {
    if windows.is_empty() {
        return Err(Error::Shape("empty window batch".into()));
    }
    let (c, d, h, v) = (lm.context, lm.dim, lm.hidden, lm.vocab_size());
    let mut grads = LmGradients::zeros_like(lm);
    let inv_b = 1.0 / windows.len() as f64;
    let mut loss = 0.0;

    for w in windows {
        if w.len() != c + 1 {
            return Err(Error::Shape(format!(
                "window has {} tokens, expected context {} + 1 target",
                w.len(),
                c
            )));
        }
        let (ctx, target) = (&w[..c], w[c]);
        if target >= v {
            return Err(Error::Index(format!("target token {target} out of vocabulary")));
        }
        let (x, z, logits) = lm.forward(ctx)?;
        let lse = log_sum_exp(&logits);
        loss += (lse - logits[target]) * inv_b;

        // dlogits = softmax - one_hot(target), scaled by 1/B.
        let mut dlogits = softmax(&logits);
        dlogits[target] -= 1.0;
        for dl in dlogits.iter_mut() {
            *dl *= inv_b;
        }

        // Output layer.
        let mut dz = vec![0.0; h];
        for t in 0..v {
            let dl = dlogits[t];
            if dl == 0.0 {
                continue;
            }
            let row = &lm.w2[t * h..(t + 1) * h];
            let grow = &mut grads.w2[t * h..(t + 1) * h];
            for j in 0..h {
                grow[j] += dl * z[j];
                dz[j] += dl * row[j];
            }
            grads.b2[t] += dl;
        }

        // Hidden layer (tanh).
        let mut dx = vec![0.0; c * d];
        for j in 0..h {
            let da = dz[j] * (1.0 - z[j] * z[j]);
            if da == 0.0 {
                continue;
            }
            let row = &lm.w1[j * c * d..(j + 1) * c * d];
            let grow = &mut grads.w1[j * c * d..(j + 1) * c * d];
            for k in 0..c * d {
                grow[k] += da * x[k];
                dx[k] += da * row[k];
            }
            grads.b1[j] += da;
        }

        // Embedding rows of the context tokens.
        for (j, &t) in ctx.iter().enumerate() {
            let slice = &dx[j * d..(j + 1) * d];
            let grow = &mut grads.emb[t * d..(t + 1) * d];
            for k in 0..d {
                grow[k] += slice[k];
            }
        }
    }
    Ok((loss, grads))
}

/// Mean NLL only (no gradients); same window contract as [`lm_loss_and_grad`].
pub fn lm_loss(lm: &TinyLm, windows: &[Vec<TokenId>]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Shape("empty window batch".into()));
    }
    let c = lm.context;
    let mut loss = 0.0;
    for w in windows {
        if w.len() != c + 1 {
            return Err(Error::Shape(format!(
                "window has {} tokens, expected context {} + 1 target",
                w.len(),
                c
            )));
        }
        let (_, _, logits) = lm.forward(&w[..c])?;
        loss += log_sum_exp(&logits) - logits[w[c]];
    }
    Ok(loss / windows.len() as f64)
}

// ============================================================================
// Generation
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: DecodeStrategy,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens,
            strategy: DecodeStrategy::Greedy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DecodeStrategy::TopK { k, temperature } = self.strategy {
            if k < 1 {
                return Err(Error::Config("top_k k must be ≥ 1".into()));
            }
            if temperature <= 0.0 {
                return Err(Error::Config("temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Autoregressive continuation of `prompt`. Returns only the newly generated
/// tokens; stops early when EOS is produced (EOS itself is not returned).
/// PAD/UNK/BOS are masked out so generated text is always decodable.
pub fn generate(lm: &TinyLm, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    generate_with_bias(lm, prompt, cfg, None)
}

/// [`generate`] with an optional per-token logit bias added at every step.
/// The bias vector must be |V|-long. Used by prompt-conditioned generator
/// adapters; plain generation passes `None`.
pub fn generate_with_bias(
    lm: &TinyLm,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    bias: Option<&[f64]>,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::EmptyText("generation prompt is empty".into()));
    }
    cfg.validate()?;
    if let Some(b) = bias {
        if b.len() != lm.vocab_size() {
            return Err(Error::Shape(format!(
                "logit bias has length {}, expected |V| = {}",
                b.len(),
                lm.vocab_size()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq: Vec<TokenId> = vec![BOS; lm.context];
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();

    for _ in 0..cfg.max_new_tokens {
        let window = &seq[seq.len() - lm.context..];
        let mut logits = lm.logits_for_window(window)?;
        if let Some(b) = bias {
            for (l, &bi) in logits.iter_mut().zip(b) {
                *l += bi;
            }
        }
        logits[PAD] = f64::NEG_INFINITY;
        logits[UNK] = f64::NEG_INFINITY;
        logits[BOS] = f64::NEG_INFINITY;

        let next = match cfg.strategy {
            DecodeStrategy::Greedy => argmax(&logits),
            DecodeStrategy::TopK { k, temperature } => {
                sample_top_k(&logits, k, temperature, &mut rng)
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Lowest index among maximal entries, so ties break deterministically.
fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k<R: Rng>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> usize {
    // Candidates ordered by (logit desc, id asc); k=1 therefore equals greedy.
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let cand = &order[..k.min(order.len())];
    let scaled: Vec<f64> = cand.iter().map(|&i| logits[i] / temperature).collect();
    let probs = softmax(&scaled);
    let mut u: f64 = rng.gen_range(0.0..1.0);
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return cand[i];
        }
        u -= p;
    }
    cand[cand.len() - 1]
}

// ============================================================================
// Perplexity
// ============================================================================

/// exp(mean NLL) over strict next-token predictions: position `i ≥ c` is
/// predicted from the preceding `c` tokens, no padding. Needs `len ≥ c+1`.
pub fn perplexity(lm: &TinyLm, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < lm.context + 1 {
        return Err(Error::Shape(format!(
            "perplexity needs at least {} tokens, got {}",
            lm.context + 1,
            tokens.len()
        )));
    }
    let c = lm.context;
    let mut nll = 0.0;
    let mut count = 0usize;
    for i in c..tokens.len() {
        let (_, _, logits) = lm.forward(&tokens[i - c..i])?;
        if tokens[i] >= logits.len() {
            return Err(Error::Index(format!("token id {} out of vocabulary", tokens[i])));
        }
        nll += log_sum_exp(&logits) - logits[tokens[i]];
        count += 1;
    }
    Ok((nll / count as f64).exp())
}

// ============================================================================
// Generator trait (used by the prompt-based attack)
// ============================================================================

/// Text-in/text-out generation contract. The tiny LM satisfies it directly;
/// adapters (prompt-conditioned decoding, external services) implement the
/// same trait so the prompt-attack code never cares which one it holds.
pub trait TextGenerator {
    fn generate_text(&self, prompt: &str, cfg: &DecodeConfig) -> Result<String>;
}

impl TextGenerator for TinyLm {
    fn generate_text(&self, prompt: &str, cfg: &DecodeConfig) -> Result<String> {
        let toks = self.vocab.tokenize(prompt);
        if toks.is_empty() {
            return Err(Error::EmptyText("prompt tokenized to nothing".into()));
        }
        let out = generate(self, &toks, cfg)?;
        Ok(self.vocab.decode(&out))
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LmCheckpoint {
    format_version: u32,
    tokens: Vec<String>,
    dim: usize,
    hidden: usize,
    context: usize,
    emb: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub fn save_checkpoint<P: AsRef<Path>>(lm: &TinyLm, path: P) -> Result<()> {
    let ck = LmCheckpoint {
        format_version: CHECKPOINT_VERSION,
        tokens: lm.vocab.id_to_token.clone(),
        dim: lm.dim,
        hidden: lm.hidden,
        context: lm.context,
        emb: lm.emb.clone(),
        w1: lm.w1.clone(),
        b1: lm.b1.clone(),
        w2: lm.w2.clone(),
        b2: lm.b2.clone(),
    };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<TinyLm> {
    let ck: LmCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Shape(format!(
            "unsupported checkpoint version {}",
            ck.format_version
        )));
    }
    let v = ck.tokens.len();
    let expect = [
        (ck.emb.len(), v * ck.dim, "emb"),
        (ck.w1.len(), ck.hidden * ck.context * ck.dim, "w1"),
        (ck.b1.len(), ck.hidden, "b1"),
        (ck.w2.len(), v * ck.hidden, "w2"),
        (ck.b2.len(), v, "b2"),
    ];
    for (got, want, name) in expect {
        if got != want {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} has {got} values, expected {want}"
            )));
        }
    }
    Ok(TinyLm {
        vocab: Vocabulary::from_tokens(ck.tokens)?,
        dim: ck.dim,
        hidden: ck.hidden,
        context: ck.context,
        emb: ck.emb,
        w1: ck.w1,
        b1: ck.b1,
        w2: ck.w2,
        b2: ck.b2,
    })
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(["alpha beta gamma delta epsilon zeta"])
    }

    fn tiny_lm(seed: u64) -> TinyLm {
        TinyLm::new(tiny_vocab(), 4, 5, 3, seed)
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = tiny_vocab();
        assert_eq!(v.token_of(PAD), Some("<pad>"));
        assert_eq!(v.token_of(UNK), Some("<unk>"));
        assert_eq!(v.token_of(BOS), Some("<bos>"));
        assert_eq!(v.token_of(EOS), Some("<eos>"));
        assert_eq!(v.size(), NUM_RESERVED + 6);
    }

    #[test]
    fn tokenize_normalizes_and_falls_back_to_unk() {
        let v = tiny_vocab();
        let alpha = v.id_of("alpha").unwrap();
        let beta = v.id_of("beta").unwrap();
        assert_eq!(v.tokenize("Alpha BETA!"), vec![alpha, beta]);
        assert_eq!(v.tokenize(""), Vec::<TokenId>::new());
        assert_eq!(v.tokenize("nonexistent"), vec![UNK]);
    }

    #[test]
    fn embed_text_mean_pools() {
        let mut lm = tiny_lm(1);
        // Zero matrix → zero vector.
        lm.emb.iter_mut().for_each(|x| *x = 0.0);
        let e = embed_text(&lm, &[4, 5]).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));

        // Single token → its row exactly.
        let lm = tiny_lm(2);
        let e = embed_text(&lm, &[5]).unwrap();
        assert_eq!(e, lm.emb_row(5).to_vec());

        // Two hand-set rows → their midpoint.
        let mut lm = tiny_lm(3);
        lm.emb.iter_mut().for_each(|x| *x = 0.0);
        lm.emb[4 * lm.dim] = 1.0; // row 4 = [1,0,0,0]
        lm.emb[5 * lm.dim + 1] = 1.0; // row 5 = [0,1,0,0]
        let e = embed_text(&lm, &[4, 5]).unwrap();
        assert_eq!(e, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn embed_text_rejects_empty_and_pad_only() {
        let lm = tiny_lm(1);
        assert!(matches!(embed_text(&lm, &[]), Err(Error::EmptyText(_))));
        assert!(matches!(embed_text(&lm, &[PAD, PAD]), Err(Error::EmptyText(_))));
    }

    #[test]
    fn embed_text_is_permutation_invariant() {
        let lm = tiny_lm(4);
        let a = embed_text(&lm, &[4, 5, 6, 4]).unwrap();
        let b = embed_text(&lm, &[4, 4, 6, 5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    /// Uniform logits (all parameters zero) → loss is ln |V|.
    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut lm = tiny_lm(1);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.b1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let w = vec![vec![4, 5, 6, 4]];
        let (loss, _) = lm_loss_and_grad(&lm, &w).unwrap();
        assert!((loss - (lm.vocab_size() as f64).ln()).abs() < 1e-12);
    }

    /// Forcing probability ≈ 1 on the target drives the loss to ≈ 0.
    #[test]
    fn confident_model_loss_approaches_zero() {
        let mut lm = tiny_lm(1);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        lm.b2[4] = 50.0;
        let w = vec![vec![5, 6, 5, 4]];
        let (loss, _) = lm_loss_and_grad(&lm, &w).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn loss_rejects_malformed_windows() {
        let lm = tiny_lm(1);
        assert!(matches!(
            lm_loss_and_grad(&lm, &[vec![4, 5]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(lm_loss_and_grad(&lm, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn make_windows_covers_sequence_with_eos() {
        let ws = make_windows(&[10, 11, 12], 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], vec![BOS, BOS, BOS, 10]);
        assert_eq!(ws[1], vec![BOS, BOS, 10, 11]);
        assert_eq!(ws[3], vec![10, 11, 12, EOS]);
    }

    #[test]
    fn greedy_generation_repeats_forced_argmax() {
        let mut lm = tiny_lm(1);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        lm.b2[6] = 10.0; // every context now prefers token 6
        let out = generate(&lm, &[4], &DecodeConfig::greedy(5)).unwrap();
        assert_eq!(out, vec![6, 6, 6, 6, 6]);
    }

    #[test]
    fn generation_is_deterministic_and_topk1_matches_greedy() {
        let lm = tiny_lm(9);
        let topk = |seed| DecodeConfig {
            max_new_tokens: 8,
            strategy: DecodeStrategy::TopK { k: 3, temperature: 0.7 },
            seed,
        };
        let a = generate(&lm, &[4, 5], &topk(42)).unwrap();
        let b = generate(&lm, &[4, 5], &topk(42)).unwrap();
        assert_eq!(a, b);

        for seed in 0..20u64 {
            let prompt = vec![4 + (seed as usize % 6)];
            let k1 = DecodeConfig {
                max_new_tokens: 6,
                strategy: DecodeStrategy::TopK { k: 1, temperature: 1.0 },
                seed,
            };
            let g = generate(&lm, &prompt, &DecodeConfig::greedy(6)).unwrap();
            assert_eq!(generate(&lm, &prompt, &k1).unwrap(), g, "seed {seed}");
        }
    }

    #[test]
    fn generation_stops_at_eos() {
        let mut lm = tiny_lm(1);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        lm.b2[EOS] = 10.0;
        let out = generate(&lm, &[4], &DecodeConfig::greedy(5)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        // A vocabulary with no real words has exactly the 4 reserved ids.
        let vocab = Vocabulary::build([]);
        assert_eq!(vocab.size(), 4);
        let mut lm = TinyLm::new(vocab, 3, 4, 2, 0);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.b1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let pp = perplexity(&lm, &[BOS, EOS, BOS, EOS]).unwrap();
        assert!((pp - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_matches_hand_computed_two_step_case() {
        // Window c=1 over vocab {pad,unk,bos,eos}: tune b2 so that
        // p(eos|bos) = 0.5 and p(bos|eos) = 0.25 exactly, via two designed
        // logit rows driven by the embedding of the single context token.
        let vocab = Vocabulary::build([]);
        let mut lm = TinyLm::new(vocab, 2, 2, 1, 0);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.b1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        // emb: BOS=[1,0], EOS=[0,1]; w1 = 5·I so z ≈ (tanh 5)·x.
        lm.emb[BOS * 2] = 1.0;
        lm.emb[EOS * 2 + 1] = 1.0;
        lm.w1[0] = 5.0;
        lm.w1[3] = 5.0;
        let t5 = 5.0f64.tanh();
        // With context BOS, z = (t5, 0) and logit[t] = a_t·t5; with context
        // EOS, z = (0, t5) and logit[t] = b_t·t5. Choose (a_t, b_t) so that
        // after BOS the live logits are {EOS: 0, PAD: 0} → p(EOS) = 1/2, and
        // after EOS they are {BOS: 0, PAD: ln 3} → p(BOS) = 1/4; everything
        // else sits at -30 (weight e^-30, numerically invisible).
        let mut set = |t: usize, a: f64, b: f64| {
            lm.w2[t * 2] = a / t5;
            lm.w2[t * 2 + 1] = b / t5;
        };
        set(EOS, 0.0, -30.0);
        set(PAD, 0.0, (3.0f64).ln());
        set(UNK, -30.0, -30.0);
        set(BOS, -30.0, 0.0);

        let probs_check = |ctx: TokenId, tok: TokenId| -> f64 {
            let logits = lm.logits_for_window(&[ctx]).unwrap();
            softmax(&logits)[tok]
        };
        assert!((probs_check(BOS, EOS) - 0.5).abs() < 1e-9);
        assert!((probs_check(EOS, BOS) - 0.25).abs() < 1e-9);

        let pp = perplexity(&lm, &[BOS, EOS, BOS]).unwrap();
        assert!((pp - 8.0f64.sqrt()).abs() < 1e-6, "pp = {pp}");
    }

    #[test]
    fn perplexity_is_one_for_perfect_predictor() {
        let vocab = Vocabulary::build([]);
        let mut lm = TinyLm::new(vocab, 2, 2, 1, 0);
        for t in [&mut lm.emb, &mut lm.w1, &mut lm.b1, &mut lm.w2, &mut lm.b2] {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        // Regardless of context, put all mass on EOS; sequence of EOS targets.
        lm.b2[EOS] = 60.0;
        let pp = perplexity(&lm, &[EOS, EOS, EOS, EOS]).unwrap();
        assert!((pp - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_rejects_short_input() {
        let lm = tiny_lm(1);
        assert!(matches!(perplexity(&lm, &[4, 5, 6]), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_validation() {
        let lm = tiny_lm(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        save_checkpoint(&lm, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(lm, back);

        // Corrupt a tensor length.
        let mut ck: serde_json::Value =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        ck["b1"].as_array_mut().unwrap().pop();
        fs::write(&path, serde_json::to_vec(&ck).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn training_step_keeps_parameters_finite() {
        let mut lm = tiny_lm(5);
        let windows: Vec<Vec<TokenId>> =
            (0..8).map(|i| vec![4 + i % 6, 5, 6, 4 + (i + 1) % 6]).collect();
        for _ in 0..20 {
            let (_, g) = lm_loss_and_grad(&lm, &windows).unwrap();
            lm.apply_gradients(&g, 0.5);
        }
        assert!(lm.params_finite());
    }

    #[test]
    fn lm_gradients_match_finite_differences() {
        use crate::gradcheck::{check_tensor, GradCheckConfig};
        let mut lm = tiny_lm(9);
        let windows: Vec<Vec<TokenId>> =
            (0..6).map(|i| vec![4 + i % 6, 4 + (i + 2) % 6, 5, 4 + (i + 1) % 6]).collect();
        let (_, g) = lm_loss_and_grad(&lm, &windows).unwrap();
        let cfg = GradCheckConfig {
            coords_per_tensor: 40,
            ..Default::default()
        };
        let eval = |m: &TinyLm| lm_loss_and_grad(m, &windows).unwrap().0;
        let checks = [
            check_tensor(&mut lm, |m| m.emb.as_mut_slice(), eval, &g.emb, "emb", &cfg),
            check_tensor(&mut lm, |m| m.w1.as_mut_slice(), eval, &g.w1, "w1", &cfg),
            check_tensor(&mut lm, |m| m.b1.as_mut_slice(), eval, &g.b1, "b1", &cfg),
            check_tensor(&mut lm, |m| m.w2.as_mut_slice(), eval, &g.w2, "w2", &cfg),
            check_tensor(&mut lm, |m| m.b2.as_mut_slice(), eval, &g.b2, "b2", &cfg),
        ];
        for c in checks {
            assert!(c.passed(), "{}: {:?}", c.tensor, c.failures.first());
        }
    }
}
