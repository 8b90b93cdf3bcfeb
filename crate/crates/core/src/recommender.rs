//! Text-aware recommender models: a rating-prediction family and a
//! sequential implicit-feedback family, both scoring items as a function of
//! collaborative embeddings *and* a description embedding, so that editing an
//! item's text measurably moves its score.
//!
//! Both models are trained with plain mini-batch SGD on exactly the batch
//! objective exposed by their `*_loss_and_grad` functions (which is what the
//! finite-difference suite checks), then frozen. Frozen models never change:
//! attacks receive `&` references and a parameter hash pins bit-identity.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{truncate_description, Interaction, Item};
use crate::error::{Error, Result};
use crate::mathutil::{dot, standard_normal};
use crate::textenc::{embed_text, TextEmbedding, TinyLm};
use crate::{ItemId, UserId};

/// Cap applied to descriptions before embedding, in words.
pub const MAX_DESC_WORDS: usize = 100;

// ============================================================================
// Cached item text embeddings
// ============================================================================

/// Per-item description embeddings (`E^T`), indexable by item id.
///
/// The table built at recommender training time is cached inside the model;
/// an attack that rewrites target descriptions works on a *copy*, updating
/// only the target rows, which keeps every non-target score bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    pub dim: usize,
    rows: Vec<TextEmbedding>,
}

impl ItemEmbeddings {
    /// Embed every item's (truncated) description with the given LM.
    pub fn from_lm(lm: &TinyLm, items: &[Item]) -> Result<ItemEmbeddings> {
        let rows = items
            .iter()
            .map(|item| {
                let toks = lm.vocab.tokenize(&item.description);
                embed_text(lm, &truncate_description(&toks, MAX_DESC_WORDS))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemEmbeddings { dim: lm.dim, rows })
    }

    pub fn zeros(dim: usize, num_items: usize) -> ItemEmbeddings {
        ItemEmbeddings {
            dim,
            rows: vec![vec![0.0; dim]; num_items],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, i: ItemId) -> Result<&[f64]> {
        self.rows
            .get(i)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::Index(format!("item {i} out of embedding table")))
    }

    /// Replace one item's embedding (the only mutation the table supports:
    /// a row changes exactly when that item's description changed).
    pub fn set(&mut self, i: ItemId, emb: TextEmbedding) -> Result<()> {
        if emb.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding has dim {}, table expects {}",
                emb.len(),
                self.dim
            )));
        }
        match self.rows.get_mut(i) {
            Some(row) => {
                *row = emb;
                Ok(())
            }
            None => Err(Error::Index(format!("item {i} out of embedding table"))),
        }
    }
}

// ============================================================================
// Shared scoring interface
// ============================================================================

/// Scores over every candidate item for one user.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub user_id: UserId,
    pub scores: Vec<f64>,
}

/// Anything that can score a (user, item, text embedding) triple. Ranking,
/// retrieval, and the attack losses are generic over this.
pub trait Scorer {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    fn is_frozen(&self) -> bool;
    fn score(&self, u: UserId, i: ItemId, text_emb: &[f64]) -> Result<f64>;
    /// ∂score/∂text_emb (a length-d vector). For both families this depends
    /// only on the user, which the promotion-loss backward pass exploits.
    fn text_grad(&self, u: UserId) -> Result<Vec<f64>>;
}

/// Scoring against an ad-hoc interaction profile instead of a known user id
/// (how a deployed system answers queries from fresh sessions, and the only
/// scoring path black-box probes get).
pub trait ProfileScorer {
    fn profile_score(&self, profile: &[ItemId], i: ItemId, text_emb: &[f64]) -> Result<f64>;
}

impl<T: Scorer + ?Sized> Scorer for &T {
    fn num_users(&self) -> usize {
        (**self).num_users()
    }
    fn num_items(&self) -> usize {
        (**self).num_items()
    }
    fn is_frozen(&self) -> bool {
        (**self).is_frozen()
    }
    fn score(&self, u: UserId, i: ItemId, text_emb: &[f64]) -> Result<f64> {
        (**self).score(u, i, text_emb)
    }
    fn text_grad(&self, u: UserId) -> Result<Vec<f64>> {
        (**self).text_grad(u)
    }
}

pub fn score_row<S: Scorer>(model: &S, u: UserId, table: &ItemEmbeddings) -> Result<ScoreRow> {
    let scores = (0..model.num_items())
        .map(|i| model.score(u, i, table.get(i)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreRow { user_id: u, scores })
}

/// Competition rank: `1 + #{j : score(j) > score(i)} + #{tied j with id < i}`.
pub fn rank_of<S: Scorer>(
    model: &S,
    u: UserId,
    i: ItemId,
    table: &ItemEmbeddings,
) -> Result<usize> {
    if !model.is_frozen() {
        return Err(Error::Contract("rank_of requires a frozen model".into()));
    }
    let target = model.score(u, i, table.get(i)?);
    let target = target?;
    let mut rank = 1usize;
    for j in 0..model.num_items() {
        if j == i {
            continue;
        }
        let s = model.score(u, j, table.get(j)?)?;
        if s > target || (s == target && j < i) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Top-K items by descending score, ties broken by ascending id; agrees with
/// [`rank_of`] (the rank-r item appears at position r-1 when retrieved).
pub fn top_k<S: Scorer>(
    model: &S,
    u: UserId,
    k: usize,
    table: &ItemEmbeddings,
) -> Result<Vec<ItemId>> {
    if k < 1 || k > model.num_items() {
        return Err(Error::Config(format!(
            "top_k K={k} outside 1..={}",
            model.num_items()
        )));
    }
    let row = score_row(model, u, table)?;
    let mut order: Vec<ItemId> = (0..row.scores.len()).collect();
    order.sort_by(|&a, &b| {
        row.scores[b]
            .partial_cmp(&row.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

// ============================================================================
// Conventional (rating) recommender
// ============================================================================

/// Biased matrix factorization with a linear text pathway:
///
/// ```text
/// Θ(u,i) = b + b_u + b_i + E^U_u · (E^I_i + W·E^T_i)
/// ```
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConventionalRec {
    pub num_users: usize,
    pub num_items: usize,
    /// Latent factor count k.
    pub factors: usize,
    /// Text embedding dimension d.
    pub text_dim: usize,
    pub user_emb: Vec<f64>,  // |U| × k
    pub item_emb: Vec<f64>,  // |I| × k
    pub text_proj: Vec<f64>, // k × d
    pub global_bias: f64,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    /// E^T cache from training time.
    pub text_embs: ItemEmbeddings,
    /// Scale for folding an unseen profile into a pseudo user embedding,
    /// calibrated against the trained user embeddings.
    pub fold_scale: f64,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecConfig {
    pub factors: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Stop after validation fails to improve this many consecutive epochs;
    /// the best-validation parameters are restored.
    pub patience: usize,
    /// Content-first curriculum: for this many leading epochs the per-item
    /// memorizers (E^I and b_i) are held at zero, so any item-level rating
    /// structure has to be explained through the text projection. Without the
    /// warmup, item biases soak up the quality signal on well-observed items
    /// within a couple of epochs and the text channel never gets trained.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainRecConfig {
    fn default() -> Self {
        TrainRecConfig {
            factors: 16,
            lr: 0.05,
            epochs: 40,
            batch_size: 64,
            weight_decay: 1e-4,
            patience: 3,
            warmup_epochs: 15,
            seed: 17,
        }
    }
}

/// Gradients for every trainable tensor of [`ConventionalRec`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub text_proj: Vec<f64>,
    pub global_bias: f64,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl ConventionalRec {
    pub fn init(
        num_users: usize,
        num_items: usize,
        factors: usize,
        text_embs: ItemEmbeddings,
        seed: u64,
    ) -> ConventionalRec {
        let text_dim = text_embs.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * standard_normal(&mut rng)).collect()
        };
        // Factor 0 of every user starts near 1 so it behaves like a bias
        // axis: item-side values on that factor (including the text
        // projection's row 0) read as population-wide quality from the first
        // gradient step, instead of waiting for a common user direction to
        // emerge from zero-mean noise.
        let mut user_emb = randn(num_users * factors, 0.1);
        for u in 0..num_users {
            user_emb[u * factors] += 1.0;
        }
        ConventionalRec {
            num_users,
            num_items,
            factors,
            text_dim,
            user_emb,
            item_emb: randn(num_items * factors, 0.1),
            text_proj: randn(factors * text_dim, 0.1),
            global_bias: 0.0,
            user_bias: vec![0.0; num_users],
            item_bias: vec![0.0; num_items],
            text_embs,
            fold_scale: 1.0,
            frozen: false,
        }
    }

    pub fn user_row(&self, u: UserId) -> &[f64] {
        &self.user_emb[u * self.factors..(u + 1) * self.factors]
    }

    pub fn item_row(&self, i: ItemId) -> &[f64] {
        &self.item_emb[i * self.factors..(i + 1) * self.factors]
    }

    /// W·e (length k).
    fn project_text(&self, e: &[f64]) -> Vec<f64> {
        let (k, d) = (self.factors, self.text_dim);
        (0..k)
            .map(|a| dot(&self.text_proj[a * d..(a + 1) * d], e))
            .collect()
    }

    fn check_ids(&self, u: UserId, i: ItemId, e: &[f64]) -> Result<()> {
        if u >= self.num_users {
            return Err(Error::Index(format!("user {u} out of range")));
        }
        if i >= self.num_items {
            return Err(Error::Index(format!("item {i} out of range")));
        }
        if e.len() != self.text_dim {
            return Err(Error::Shape(format!(
                "text embedding has dim {}, model expects {}",
                e.len(),
                self.text_dim
            )));
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// SHA-256 over dims and every parameter tensor (plus the cached text
    /// embeddings): frozen models are bit-identical iff hashes match.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"conventional");
        for n in [self.num_users, self.num_items, self.factors, self.text_dim] {
            h.update(n.to_le_bytes());
        }
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(&self.user_emb);
        feed(&self.item_emb);
        feed(&self.text_proj);
        feed(&[self.global_bias]);
        feed(&self.user_bias);
        feed(&self.item_bias);
        feed(&[self.fold_scale]);
        for i in 0..self.text_embs.len() {
            feed(self.text_embs.get(i).unwrap());
        }
        format!("{:x}", h.finalize())
    }

    /// Mean squared error + weight decay over a rating batch, with analytic
    /// gradients for every trainable tensor. This *is* the training
    /// objective; the SGD loop below applies exactly these gradients.
    pub fn loss_and_grad(
        &self,
        batch: &[Interaction],
        table: &ItemEmbeddings,
        weight_decay: f64,
    ) -> Result<(f64, ConvGrads)> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let (k, d) = (self.factors, self.text_dim);
        let mut g = ConvGrads {
            user_emb: vec![0.0; self.user_emb.len()],
            item_emb: vec![0.0; self.item_emb.len()],
            text_proj: vec![0.0; self.text_proj.len()],
            global_bias: 0.0,
            user_bias: vec![0.0; self.user_bias.len()],
            item_bias: vec![0.0; self.item_bias.len()],
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;

        for it in batch {
            let (u, i) = (it.user_id, it.item_id);
            let e = table.get(i)?;
            self.check_ids(u, i, e)?;
            let we = self.project_text(e);
            let eu = self.user_row(u);
            let q: Vec<f64> = self
                .item_row(i)
                .iter()
                .zip(&we)
                .map(|(a, b)| a + b)
                .collect();
            let pred = self.global_bias + self.user_bias[u] + self.item_bias[i] + dot(eu, &q);
            let err = pred - it.rating;
            loss += err * err * inv_b;

            let e2 = 2.0 * err * inv_b;
            g.global_bias += e2;
            g.user_bias[u] += e2;
            g.item_bias[i] += e2;
            for a in 0..k {
                g.user_emb[u * k + a] += e2 * q[a];
                g.item_emb[i * k + a] += e2 * eu[a];
                let row = &mut g.text_proj[a * d..(a + 1) * d];
                let c = e2 * eu[a];
                for (slot, &eb) in row.iter_mut().zip(e) {
                    *slot += c * eb;
                }
            }
        }

        if weight_decay > 0.0 {
            let mut reg = 0.0;
            for (p, gr) in [
                (&self.user_emb, &mut g.user_emb),
                (&self.item_emb, &mut g.item_emb),
                (&self.text_proj, &mut g.text_proj),
                (&self.user_bias, &mut g.user_bias),
                (&self.item_bias, &mut g.item_bias),
            ] {
                for (x, slot) in p.iter().zip(gr.iter_mut()) {
                    reg += x * x;
                    *slot += 2.0 * weight_decay * x;
                }
            }
            loss += weight_decay * reg;
        }
        Ok((loss, g))
    }

    fn apply_grads(&mut self, g: &ConvGrads, lr: f64) {
        for (p, gr) in self.user_emb.iter_mut().zip(&g.user_emb) {
            *p -= lr * gr;
        }
        for (p, gr) in self.item_emb.iter_mut().zip(&g.item_emb) {
            *p -= lr * gr;
        }
        for (p, gr) in self.text_proj.iter_mut().zip(&g.text_proj) {
            *p -= lr * gr;
        }
        self.global_bias -= lr * g.global_bias;
        for (p, gr) in self.user_bias.iter_mut().zip(&g.user_bias) {
            *p -= lr * gr;
        }
        for (p, gr) in self.item_bias.iter_mut().zip(&g.item_bias) {
            *p -= lr * gr;
        }
    }

    /// Mini-batch SGD on the squared-error objective with validation-based
    /// early stopping; marks the model frozen on return.
    pub fn train(
        &mut self,
        train: &[Interaction],
        val: &[Interaction],
        cfg: &TrainRecConfig,
    ) -> Result<TrainSummary> {
        if self.frozen {
            return Err(Error::Frozen("conventional model is frozen".into()));
        }
        if train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        // Start the global bias at the mean training rating so user/item
        // biases only have to model deviations from it.
        self.global_bias = train.iter().map(|it| it.rating).sum::<f64>() / train.len() as f64;
        if cfg.warmup_epochs > 0 {
            self.item_emb.iter_mut().for_each(|x| *x = 0.0);
            self.item_bias.iter_mut().for_each(|x| *x = 0.0);
        }
        let table = self.text_embs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();

        let mut best_val = f64::INFINITY;
        let mut best: Option<ConventionalRec> = None;
        let mut bad_epochs = 0usize;
        let mut epochs_run = 0usize;

        for epoch in 0..cfg.epochs {
            let warming = epoch < cfg.warmup_epochs;
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Interaction> = chunk.iter().map(|&i| train[i]).collect();
                let (loss, mut g) = self.loss_and_grad(&batch, &table, cfg.weight_decay)?;
                if !loss.is_finite() {
                    return Err(Error::Contract("non-finite training loss".into()));
                }
                if warming {
                    g.item_emb.iter_mut().for_each(|x| *x = 0.0);
                    g.item_bias.iter_mut().for_each(|x| *x = 0.0);
                }
                self.apply_grads(&g, cfg.lr);
            }
            epochs_run += 1;

            let val_metric = if val.is_empty() {
                // No validation data: fall back to training loss.
                self.rmse_inner(train, &table)?
            } else {
                self.rmse_inner(val, &table)?
            };
            // Early stopping only arms once the curriculum is over; warmup
            // epochs fit a deliberately handicapped model.
            if val_metric < best_val {
                best_val = val_metric;
                best = Some(self.clone());
                bad_epochs = 0;
            } else if !warming {
                bad_epochs += 1;
                if bad_epochs >= cfg.patience {
                    break;
                }
            }
        }
        if let Some(b) = best {
            *self = b;
        }
        self.calibrate_fold_scale(train);
        self.freeze();
        Ok(TrainSummary {
            epochs_run,
            best_val_metric: best_val,
        })
    }

    fn rmse_inner(&self, split: &[Interaction], table: &ItemEmbeddings) -> Result<f64> {
        if split.is_empty() {
            return Err(Error::Config("empty split for RMSE".into()));
        }
        let mut se = 0.0;
        for it in split {
            let pred = self.score(it.user_id, it.item_id, table.get(it.item_id)?)?;
            se += (pred - it.rating) * (pred - it.rating);
        }
        Ok((se / split.len() as f64).sqrt())
    }

    /// √(mean squared error) of frozen predictions over a rating split,
    /// with item text embeddings taken from `table`.
    pub fn rmse(&self, split: &[Interaction], table: &ItemEmbeddings) -> Result<f64> {
        self.rmse_inner(split, table)
    }

    /// Least-squares scale mapping "mean interacted-item embedding" onto the
    /// trained user embeddings, so unseen profiles can be folded in.
    fn calibrate_fold_scale(&mut self, train: &[Interaction]) {
        let k = self.factors;
        let mut sums: Vec<f64> = vec![0.0; self.num_users * k];
        let mut counts = vec![0usize; self.num_users];
        for it in train {
            let row = self.item_row(it.item_id).to_vec();
            for (a, v) in row.iter().enumerate() {
                sums[it.user_id * k + a] += v;
            }
            counts[it.user_id] += 1;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for u in 0..self.num_users {
            if counts[u] == 0 {
                continue;
            }
            let inv = 1.0 / counts[u] as f64;
            let m: Vec<f64> = (0..k).map(|a| sums[u * k + a] * inv).collect();
            num += dot(self.user_row(u), &m);
            den += dot(&m, &m);
        }
        self.fold_scale = if den > 0.0 { num / den } else { 1.0 };
    }
}

impl Scorer for ConventionalRec {
    fn num_users(&self) -> usize {
        self.num_users
    }
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn score(&self, u: UserId, i: ItemId, text_emb: &[f64]) -> Result<f64> {
        self.check_ids(u, i, text_emb)?;
        let we = self.project_text(text_emb);
        let q: Vec<f64> = self
            .item_row(i)
            .iter()
            .zip(&we)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.global_bias + self.user_bias[u] + self.item_bias[i] + dot(self.user_row(u), &q))
    }

    /// ∂Θ/∂e = Wᵀ·E^U_u.
    fn text_grad(&self, u: UserId) -> Result<Vec<f64>> {
        if u >= self.num_users {
            return Err(Error::Index(format!("user {u} out of range")));
        }
        let (k, d) = (self.factors, self.text_dim);
        let eu = self.user_row(u);
        let mut out = vec![0.0; d];
        for a in 0..k {
            let row = &self.text_proj[a * d..(a + 1) * d];
            for (slot, &w) in out.iter_mut().zip(row) {
                *slot += eu[a] * w;
            }
        }
        Ok(out)
    }
}

impl ProfileScorer for ConventionalRec {
    /// Fold-in scoring for an unseen session: the pseudo user embedding is
    /// `fold_scale · mean(E^I over profile items)` with zero user bias.
    fn profile_score(&self, profile: &[ItemId], i: ItemId, text_emb: &[f64]) -> Result<f64> {
        if profile.is_empty() {
            return Err(Error::Config("empty profile".into()));
        }
        let k = self.factors;
        let mut pseudo = vec![0.0; k];
        for &j in profile {
            if j >= self.num_items {
                return Err(Error::Index(format!("profile item {j} out of range")));
            }
            for (a, slot) in pseudo.iter_mut().enumerate() {
                *slot += self.item_emb[j * k + a];
            }
        }
        let scale = self.fold_scale / profile.len() as f64;
        for slot in pseudo.iter_mut() {
            *slot *= scale;
        }
        if i >= self.num_items {
            return Err(Error::Index(format!("item {i} out of range")));
        }
        let we = self.project_text(text_emb);
        let q: Vec<f64> = self
            .item_row(i)
            .iter()
            .zip(&we)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.global_bias + self.item_bias[i] + dot(&pseudo, &q))
    }
}

// ============================================================================
// Sequential (implicit) recommender
// ============================================================================

/// Next-item scorer: the user state is the mean representation of the last
/// `n` interacted items, where an item's representation blends collaborative
/// and text views: `r_i = (1−α)·E^I_i + α·W·E^T_i`. The interaction
/// probability is `σ(user_state · r_i)`; ranking uses the raw dot product
/// (the logistic link is monotone).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequentialRec {
    pub num_users: usize,
    pub num_items: usize,
    pub factors: usize,
    pub text_dim: usize,
    /// History window length n.
    pub window: usize,
    /// Text blend weight α ∈ [0,1].
    pub alpha: f64,
    pub item_emb: Vec<f64>,  // |I| × k
    pub text_proj: Vec<f64>, // k × d
    /// Frozen user states, computed from train histories at freeze time with
    /// the cached embeddings. Rewriting a target's description later never
    /// disturbs these (score invariance for non-target items).
    pub user_states: Vec<Vec<f64>>,
    pub text_embs: ItemEmbeddings,
    frozen: bool,
}

/// One implicit training example: history window, observed next item, and a
/// sampled negative.
#[derive(Debug, Clone)]
pub struct SeqExample {
    pub history: Vec<ItemId>,
    pub pos: ItemId,
    pub neg: ItemId,
}

#[derive(Debug, Clone)]
pub struct SeqGrads {
    pub item_emb: Vec<f64>,
    pub text_proj: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSeqConfig {
    pub factors: usize,
    pub window: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSeqConfig {
    fn default() -> Self {
        TrainSeqConfig {
            factors: 16,
            window: 10,
            alpha: 0.5,
            lr: 0.1,
            epochs: 30,
            batch_size: 64,
            weight_decay: 1e-4,
            patience: 3,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val_metric: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl SequentialRec {
    pub fn init(
        num_users: usize,
        num_items: usize,
        cfg: &TrainSeqConfig,
        text_embs: ItemEmbeddings,
        seed: u64,
    ) -> Result<SequentialRec> {
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", cfg.alpha)));
        }
        let text_dim = text_embs.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * standard_normal(&mut rng)).collect()
        };
        Ok(SequentialRec {
            num_users,
            num_items,
            factors: cfg.factors,
            text_dim,
            window: cfg.window,
            alpha: cfg.alpha,
            item_emb: randn(num_items * cfg.factors, 0.1),
            text_proj: randn(cfg.factors * text_dim, 0.1),
            user_states: vec![vec![0.0; cfg.factors]; num_users],
            text_embs,
            frozen: false,
        })
    }

    fn project_text(&self, e: &[f64]) -> Vec<f64> {
        let (k, d) = (self.factors, self.text_dim);
        (0..k)
            .map(|a| dot(&self.text_proj[a * d..(a + 1) * d], e))
            .collect()
    }

    /// r_i = (1−α)E^I_i + α·W·e.
    pub fn item_repr(&self, i: ItemId, e: &[f64]) -> Result<Vec<f64>> {
        if i >= self.num_items {
            return Err(Error::Index(format!("item {i} out of range")));
        }
        if e.len() != self.text_dim {
            return Err(Error::Shape(format!(
                "text embedding has dim {}, model expects {}",
                e.len(),
                self.text_dim
            )));
        }
        let we = self.project_text(e);
        let k = self.factors;
        Ok((0..k)
            .map(|a| (1.0 - self.alpha) * self.item_emb[i * k + a] + self.alpha * we[a])
            .collect())
    }

    /// Mean representation of up to the last `n` profile items, using the
    /// cached (training-time) embeddings.
    pub fn state_of(&self, profile: &[ItemId]) -> Result<Vec<f64>> {
        let start = profile.len().saturating_sub(self.window);
        let tail = &profile[start..];
        let mut state = vec![0.0; self.factors];
        if tail.is_empty() {
            return Ok(state);
        }
        for &j in tail {
            let r = self.item_repr(j, self.text_embs.get(j)?)?;
            for (slot, v) in state.iter_mut().zip(r) {
                *slot += v;
            }
        }
        let inv = 1.0 / tail.len() as f64;
        for slot in state.iter_mut() {
            *slot *= inv;
        }
        Ok(state)
    }

    /// σ(score): the interaction probability.
    pub fn probability(&self, u: UserId, i: ItemId, text_emb: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(u, i, text_emb)?))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"sequential");
        for n in [self.num_users, self.num_items, self.factors, self.text_dim, self.window] {
            h.update(n.to_le_bytes());
        }
        h.update(self.alpha.to_le_bytes());
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(&self.item_emb);
        feed(&self.text_proj);
        for s in &self.user_states {
            feed(s);
        }
        for i in 0..self.text_embs.len() {
            feed(self.text_embs.get(i).unwrap());
        }
        format!("{:x}", h.finalize())
    }

    /// Pairwise logistic loss (softplus form) + weight decay over a batch of
    /// examples, with analytic gradients for both trainable tensors. States
    /// are recomputed from each example's history, so gradients flow through
    /// history items as well as the two candidates.
    pub fn loss_and_grad(
        &self,
        batch: &[SeqExample],
        table: &ItemEmbeddings,
        weight_decay: f64,
    ) -> Result<(f64, SeqGrads)> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let (k, d) = (self.factors, self.text_dim);
        let mut g = SeqGrads {
            item_emb: vec![0.0; self.item_emb.len()],
            text_proj: vec![0.0; self.text_proj.len()],
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;

        // Accumulate ∂L/∂repr(item) into the two parameter tensors.
        let add_repr_grad = |g: &mut SeqGrads, j: ItemId, e: &[f64], up: &[f64]| {
            for a in 0..k {
                g.item_emb[j * k + a] += (1.0 - self.alpha) * up[a];
                let row = &mut g.text_proj[a * d..(a + 1) * d];
                let c = self.alpha * up[a];
                for (slot, &eb) in row.iter_mut().zip(e) {
                    *slot += c * eb;
                }
            }
        };

        for ex in batch {
            if ex.history.is_empty() {
                return Err(Error::Config("sequential example has empty history".into()));
            }
            let start = ex.history.len().saturating_sub(self.window);
            let hist = &ex.history[start..];
            let m = hist.len() as f64;

            let mut state = vec![0.0; k];
            let mut hist_reprs = Vec::with_capacity(hist.len());
            for &j in hist {
                let r = self.item_repr(j, table.get(j)?)?;
                for (slot, v) in state.iter_mut().zip(&r) {
                    *slot += *v / m;
                }
                hist_reprs.push(r);
            }
            let r_pos = self.item_repr(ex.pos, table.get(ex.pos)?)?;
            let r_neg = self.item_repr(ex.neg, table.get(ex.neg)?)?;
            let s_pos = dot(&state, &r_pos);
            let s_neg = dot(&state, &r_neg);
            loss += (softplus(-s_pos) + softplus(s_neg)) * inv_b;

            let dp = (sigmoid(s_pos) - 1.0) * inv_b;
            let dn = sigmoid(s_neg) * inv_b;

            // Candidates: ∂s/∂repr(cand) = state.
            let up_pos: Vec<f64> = state.iter().map(|&s| dp * s).collect();
            let up_neg: Vec<f64> = state.iter().map(|&s| dn * s).collect();
            add_repr_grad(&mut g, ex.pos, table.get(ex.pos)?, &up_pos);
            add_repr_grad(&mut g, ex.neg, table.get(ex.neg)?, &up_neg);

            // History items: ∂s/∂state = repr(cand), ∂state/∂repr(h) = 1/m.
            let dstate: Vec<f64> = r_pos
                .iter()
                .zip(&r_neg)
                .map(|(p, n)| (dp * p + dn * n) / m)
                .collect();
            for (&j, _r) in hist.iter().zip(&hist_reprs) {
                add_repr_grad(&mut g, j, table.get(j)?, &dstate);
            }
        }

        if weight_decay > 0.0 {
            let mut reg = 0.0;
            for (p, gr) in [
                (&self.item_emb, &mut g.item_emb),
                (&self.text_proj, &mut g.text_proj),
            ] {
                for (x, slot) in p.iter().zip(gr.iter_mut()) {
                    reg += x * x;
                    *slot += 2.0 * weight_decay * x;
                }
            }
            loss += weight_decay * reg;
        }
        Ok((loss, g))
    }

    fn apply_grads(&mut self, g: &SeqGrads, lr: f64) {
        for (p, gr) in self.item_emb.iter_mut().zip(&g.item_emb) {
            *p -= lr * gr;
        }
        for (p, gr) in self.text_proj.iter_mut().zip(&g.text_proj) {
            *p -= lr * gr;
        }
    }

    /// Mini-batch SGD over next-item examples derived from per-user
    /// histories; freezes the model and fixes user states on return.
    pub fn train(
        &mut self,
        train_histories: &[Vec<Interaction>],
        val_histories: &[Vec<Interaction>],
        cfg: &TrainSeqConfig,
    ) -> Result<TrainSummary> {
        if self.frozen {
            return Err(Error::Frozen("sequential model is frozen".into()));
        }
        let table = self.text_embs.clone();
        let mut skeleton: Vec<(Vec<ItemId>, ItemId)> = Vec::new();
        for hist in train_histories {
            let ids: Vec<ItemId> = hist.iter().map(|it| it.item_id).collect();
            for t in 1..ids.len() {
                let start = t.saturating_sub(self.window);
                skeleton.push((ids[start..t].to_vec(), ids[t]));
            }
        }
        if skeleton.is_empty() {
            return Err(Error::Config("no sequential training examples".into()));
        }
        let val_examples = self.build_examples(val_histories, cfg.seed ^ 0x5e9a11d)?;

        let mut best_val = f64::INFINITY;
        let mut best: Option<SequentialRec> = None;
        let mut bad = 0usize;
        let mut epochs_run = 0usize;
        let mut order: Vec<usize> = (0..skeleton.len()).collect();

        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<SeqExample> = chunk
                    .iter()
                    .map(|&idx| {
                        let (hist, pos) = &skeleton[idx];
                        let neg = sample_negative(self.num_items, *pos, &mut rng);
                        SeqExample {
                            history: hist.clone(),
                            pos: *pos,
                            neg,
                        }
                    })
                    .collect();
                let (loss, g) = self.loss_and_grad(&batch, &table, cfg.weight_decay)?;
                if !loss.is_finite() {
                    return Err(Error::Contract("non-finite training loss".into()));
                }
                self.apply_grads(&g, cfg.lr);
            }
            epochs_run += 1;

            let val_metric = if val_examples.is_empty() {
                f64::INFINITY
            } else {
                self.loss_and_grad(&val_examples, &table, 0.0)?.0
            };
            if val_metric < best_val {
                best_val = val_metric;
                best = Some(self.clone());
                bad = 0;
            } else {
                bad += 1;
                if bad >= cfg.patience {
                    break;
                }
            }
        }
        if let Some(b) = best {
            *self = b;
        }

        // Fix user states from full train histories and freeze.
        for (u, hist) in train_histories.iter().enumerate() {
            let ids: Vec<ItemId> = hist.iter().map(|it| it.item_id).collect();
            self.user_states[u] = self.state_of(&ids)?;
        }
        self.freeze();
        Ok(TrainSummary {
            epochs_run,
            best_val_metric: best_val,
        })
    }

    /// Deterministic examples (fixed negatives) from held-out histories:
    /// each user's validation events are predicted from their train history.
    fn build_examples(
        &self,
        histories: &[Vec<Interaction>],
        seed: u64,
    ) -> Result<Vec<SeqExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for hist in histories {
            let ids: Vec<ItemId> = hist.iter().map(|it| it.item_id).collect();
            for t in 1..ids.len() {
                let start = t.saturating_sub(self.window);
                out.push(SeqExample {
                    history: ids[start..t].to_vec(),
                    pos: ids[t],
                    neg: sample_negative(self.num_items, ids[t], &mut rng),
                });
            }
        }
        Ok(out)
    }
}

fn sample_negative<R: Rng>(num_items: usize, pos: ItemId, rng: &mut R) -> ItemId {
    loop {
        let j = rng.gen_range(0..num_items);
        if j != pos || num_items == 1 {
            return j;
        }
    }
}

impl Scorer for SequentialRec {
    fn num_users(&self) -> usize {
        self.num_users
    }
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn score(&self, u: UserId, i: ItemId, text_emb: &[f64]) -> Result<f64> {
        if u >= self.num_users {
            return Err(Error::Index(format!("user {u} out of range")));
        }
        let r = self.item_repr(i, text_emb)?;
        Ok(dot(&self.user_states[u], &r))
    }

    /// ∂Θ/∂e = α·Wᵀ·user_state.
    fn text_grad(&self, u: UserId) -> Result<Vec<f64>> {
        if u >= self.num_users {
            return Err(Error::Index(format!("user {u} out of range")));
        }
        let (k, d) = (self.factors, self.text_dim);
        let state = &self.user_states[u];
        let mut out = vec![0.0; d];
        for a in 0..k {
            let row = &self.text_proj[a * d..(a + 1) * d];
            for (slot, &w) in out.iter_mut().zip(row) {
                *slot += self.alpha * state[a] * w;
            }
        }
        Ok(out)
    }
}

impl ProfileScorer for SequentialRec {
    fn profile_score(&self, profile: &[ItemId], i: ItemId, text_emb: &[f64]) -> Result<f64> {
        if profile.is_empty() {
            return Err(Error::Config("empty profile".into()));
        }
        let state = self.state_of(profile)?;
        let r = self.item_repr(i, text_emb)?;
        Ok(dot(&state, &r))
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

const REC_CHECKPOINT_VERSION: u32 = 1;

/// Either recommender family, for persistence and CLI dispatch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RecModel {
    Conventional(ConventionalRec),
    Sequential(SequentialRec),
}

#[derive(Serialize, Deserialize)]
struct RecCheckpoint {
    format_version: u32,
    model: RecModel,
}

pub fn save_rec_checkpoint<P: AsRef<Path>>(model: &RecModel, path: P) -> Result<()> {
    let ck = RecCheckpoint {
        format_version: REC_CHECKPOINT_VERSION,
        model: model.clone(),
    };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_rec_checkpoint<P: AsRef<Path>>(path: P) -> Result<RecModel> {
    let ck: RecCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format_version != REC_CHECKPOINT_VERSION {
        return Err(Error::Shape(format!(
            "unsupported recommender checkpoint version {}",
            ck.format_version
        )));
    }
    match &ck.model {
        RecModel::Conventional(m) => {
            let ok = m.user_emb.len() == m.num_users * m.factors
                && m.item_emb.len() == m.num_items * m.factors
                && m.text_proj.len() == m.factors * m.text_dim
                && m.user_bias.len() == m.num_users
                && m.item_bias.len() == m.num_items
                && m.text_embs.len() == m.num_items;
            if !ok {
                return Err(Error::Shape("conventional checkpoint tensors inconsistent".into()));
            }
        }
        RecModel::Sequential(m) => {
            let ok = m.item_emb.len() == m.num_items * m.factors
                && m.text_proj.len() == m.factors * m.text_dim
                && m.user_states.len() == m.num_users
                && m.text_embs.len() == m.num_items;
            if !ok {
                return Err(Error::Shape("sequential checkpoint tensors inconsistent".into()));
            }
        }
    }
    Ok(ck.model)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, split, SynthConfig};
    use crate::textenc::Vocabulary;

    fn table(dim: usize, items: usize, seed: u64) -> ItemEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = ItemEmbeddings::zeros(dim, items);
        for i in 0..items {
            t.set(i, (0..dim).map(|_| standard_normal(&mut rng)).collect())
                .unwrap();
        }
        t
    }

    fn zeroed_conv(users: usize, items: usize, k: usize, d: usize) -> ConventionalRec {
        let mut m = ConventionalRec::init(users, items, k, ItemEmbeddings::zeros(d, items), 0);
        m.user_emb.iter_mut().for_each(|x| *x = 0.0);
        m.item_emb.iter_mut().for_each(|x| *x = 0.0);
        m.text_proj.iter_mut().for_each(|x| *x = 0.0);
        m
    }

    #[test]
    fn conventional_score_zero_params_is_global_bias() {
        let mut m = zeroed_conv(3, 4, 2, 3);
        m.global_bias = 3.0;
        let e = vec![1.0, 2.0, 3.0];
        assert_eq!(m.score(1, 2, &e).unwrap(), 3.0);
    }

    #[test]
    fn conventional_score_hand_case() {
        // E^U_u = [1,0], E^I_i = [0.5,0], W·e = [0.25,0] → 0.75.
        let mut m = zeroed_conv(1, 1, 2, 2);
        m.user_emb = vec![1.0, 0.0];
        m.item_emb = vec![0.5, 0.0];
        // W = [[0.25, 0], [0, 0]] with e = [1, 0] gives W·e = [0.25, 0].
        m.text_proj = vec![0.25, 0.0, 0.0, 0.0];
        let s = m.score(0, 0, &[1.0, 0.0]).unwrap();
        assert!((s - 0.75).abs() < 1e-15);
    }

    #[test]
    fn conventional_score_linear_in_text() {
        let mut m = zeroed_conv(1, 1, 2, 2);
        m.user_emb = vec![0.7, -0.3];
        // W = identity.
        m.text_proj = vec![1.0, 0.0, 0.0, 1.0];
        let e = vec![0.4, 0.9];
        let e2: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
        let s1 = m.score(0, 0, &e).unwrap();
        let s2 = m.score(0, 0, &e2).unwrap();
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_bad_ids() {
        let m = zeroed_conv(2, 2, 2, 2);
        assert!(matches!(m.score(5, 0, &[0.0, 0.0]), Err(Error::Index(_))));
        assert!(matches!(m.score(0, 5, &[0.0, 0.0]), Err(Error::Index(_))));
        assert!(matches!(m.score(0, 0, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_tie_breaking_matches_contract() {
        // Scores [0.9, 0.5, 0.5, 0.1]: item 2 ties item 1, loses on id.
        let mut m = zeroed_conv(1, 4, 1, 1);
        m.item_bias = vec![0.9, 0.5, 0.5, 0.1];
        m.freeze();
        let t = ItemEmbeddings::zeros(1, 4);
        assert_eq!(rank_of(&m, 0, 2, &t).unwrap(), 3);
        assert_eq!(rank_of(&m, 0, 1, &t).unwrap(), 2);
        assert_eq!(rank_of(&m, 0, 0, &t).unwrap(), 1);

        // All equal: item 0 ranks 1, item 4 ranks 5.
        let mut m = zeroed_conv(1, 5, 1, 1);
        m.freeze();
        let t = ItemEmbeddings::zeros(1, 5);
        assert_eq!(rank_of(&m, 0, 0, &t).unwrap(), 1);
        assert_eq!(rank_of(&m, 0, 4, &t).unwrap(), 5);
    }

    #[test]
    fn rank_requires_frozen_model() {
        let m = zeroed_conv(1, 3, 1, 1);
        let t = ItemEmbeddings::zeros(1, 3);
        assert!(matches!(rank_of(&m, 0, 0, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn top_k_agrees_with_rank_and_validates_k() {
        let mut m = zeroed_conv(1, 6, 1, 1);
        m.item_bias = vec![0.3, 0.9, 0.9, 0.1, 0.5, 0.9];
        m.freeze();
        let t = ItemEmbeddings::zeros(1, 6);
        let all = top_k(&m, 0, 6, &t).unwrap();
        assert_eq!(all, vec![1, 2, 5, 4, 0, 3]);
        for (pos, &item) in all.iter().enumerate() {
            assert_eq!(rank_of(&m, 0, item, &t).unwrap(), pos + 1);
        }
        assert_eq!(top_k(&m, 0, 1, &t).unwrap(), vec![1]);
        assert!(matches!(top_k(&m, 0, 0, &t), Err(Error::Config(_))));
        assert!(matches!(top_k(&m, 0, 7, &t), Err(Error::Config(_))));
    }

    #[test]
    fn rmse_hand_cases() {
        // Predictions come out as global_bias; ratings chosen around it.
        let mut m = zeroed_conv(1, 2, 1, 1);
        m.global_bias = 3.0;
        m.freeze();
        let t = ItemEmbeddings::zeros(1, 2);
        let mk = |item, rating| Interaction {
            user_id: 0,
            item_id: item,
            rating,
            timestamp: 0,
        };
        // errors [1, -1] → 1.0
        let split = vec![mk(0, 2.0), mk(1, 4.0)];
        assert!((m.rmse(&split, &t).unwrap() - 1.0).abs() < 1e-12);
        // constant predictor at mean of {1,5} → 2.0
        let split = vec![mk(0, 1.0), mk(1, 5.0)];
        assert!((m.rmse(&split, &t).unwrap() - 2.0).abs() < 1e-12);
        // perfect predictions → 0
        let split = vec![mk(0, 3.0), mk(1, 3.0)];
        assert!(m.rmse(&split, &t).unwrap() < 1e-12);
        assert!(m.rmse(&[], &t).is_err());
    }

    fn toy_dataset(seed: u64) -> crate::corpus::Dataset {
        let ds = generate_synthetic(&SynthConfig {
            num_users: 30,
            num_items: 20,
            interactions_per_user: 10,
            vocab_size: 80,
            num_quality_phrases: 4,
            phrase_effect_scale: 0.3,
            noise_std: 0.3,
            seed,
        })
        .unwrap();
        split(ds, (0.81, 0.09, 0.10), seed).unwrap()
    }

    fn toy_table(ds: &crate::corpus::Dataset) -> ItemEmbeddings {
        let vocab = Vocabulary::build(ds.items.iter().map(|i| i.description.as_str()));
        let lm = TinyLm::new(vocab, 8, 8, 4, 3);
        ItemEmbeddings::from_lm(&lm, &ds.items).unwrap()
    }

    #[test]
    fn conventional_training_learns_constant_and_freezes() {
        let mut ds = toy_dataset(5);
        for it in ds.interactions.iter_mut() {
            it.rating = 3.7;
        }
        let table = toy_table(&ds);
        let mut m = ConventionalRec::init(ds.num_users, ds.num_items(), 4, table, 11);
        let train = ds.interactions_in(&ds.splits.train);
        let val = ds.interactions_in(&ds.splits.val);
        m.train(&train, &val, &TrainRecConfig {
            epochs: 30,
            ..Default::default()
        })
        .unwrap();
        assert!((m.global_bias - 3.7).abs() < 0.05, "bias = {}", m.global_bias);
        assert!(m.is_frozen());

        // Frozen model rejects further training.
        let err = m.train(&train, &val, &TrainRecConfig::default());
        assert!(matches!(err, Err(Error::Frozen(_))));
    }

    #[test]
    fn conventional_training_is_deterministic() {
        let ds = toy_dataset(6);
        let table = toy_table(&ds);
        let train = ds.interactions_in(&ds.splits.train);
        let val = ds.interactions_in(&ds.splits.val);
        let cfg = TrainRecConfig {
            epochs: 5,
            ..Default::default()
        };
        let mut a = ConventionalRec::init(ds.num_users, ds.num_items(), 4, table.clone(), 9);
        a.train(&train, &val, &cfg).unwrap();
        let mut b = ConventionalRec::init(ds.num_users, ds.num_items(), 4, table, 9);
        b.train(&train, &val, &cfg).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn sequential_training_runs_freezes_and_is_deterministic() {
        let ds = toy_dataset(8);
        let table = toy_table(&ds);
        let hist = ds.train_histories();
        let val_hist: Vec<Vec<Interaction>> = vec![Vec::new(); ds.num_users];
        let cfg = TrainSeqConfig {
            epochs: 4,
            ..Default::default()
        };
        let mut a =
            SequentialRec::init(ds.num_users, ds.num_items(), &cfg, table.clone(), 3).unwrap();
        a.train(&hist, &val_hist, &cfg).unwrap();
        assert!(a.is_frozen());
        let mut b = SequentialRec::init(ds.num_users, ds.num_items(), &cfg, table, 3).unwrap();
        b.train(&hist, &val_hist, &cfg).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());

        let err = b.train(&hist, &val_hist, &cfg);
        assert!(matches!(err, Err(Error::Frozen(_))));
    }

    #[test]
    fn conventional_gradients_match_finite_differences() {
        use crate::gradcheck::{check_tensor, GradCheckConfig};
        let t = table(3, 6, 2);
        let mut m = ConventionalRec::init(4, 6, 3, t.clone(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batch: Vec<Interaction> = (0..12)
            .map(|_| Interaction {
                user_id: rng.gen_range(0..4),
                item_id: rng.gen_range(0..6),
                rating: rng.gen_range(1.0..5.0),
                timestamp: 0,
            })
            .collect();
        let wd = 0.01;
        let (_, g) = m.loss_and_grad(&batch, &t, wd).unwrap();
        let cfg = GradCheckConfig::default();
        let eval = |m: &ConventionalRec| m.loss_and_grad(&batch, &t, wd).unwrap().0;

        let checks = [
            check_tensor(&mut m, |m| m.user_emb.as_mut_slice(), eval, &g.user_emb, "user_emb", &cfg),
            check_tensor(&mut m, |m| m.item_emb.as_mut_slice(), eval, &g.item_emb, "item_emb", &cfg),
            check_tensor(&mut m, |m| m.text_proj.as_mut_slice(), eval, &g.text_proj, "text_proj", &cfg),
            check_tensor(&mut m, |m| m.user_bias.as_mut_slice(), eval, &g.user_bias, "user_bias", &cfg),
            check_tensor(&mut m, |m| m.item_bias.as_mut_slice(), eval, &g.item_bias, "item_bias", &cfg),
            check_tensor(
                &mut m,
                |m| std::slice::from_mut(&mut m.global_bias),
                eval,
                &[g.global_bias],
                "global_bias",
                &cfg,
            ),
        ];
        for c in checks {
            assert!(c.passed(), "{}: {:?}", c.tensor, c.failures.first());
        }
    }

    #[test]
    fn sequential_gradients_match_finite_differences() {
        use crate::gradcheck::{check_tensor, GradCheckConfig};
        let t = table(3, 6, 4);
        let cfg_t = TrainSeqConfig {
            factors: 3,
            window: 3,
            alpha: 0.4,
            ..Default::default()
        };
        let mut m = SequentialRec::init(2, 6, &cfg_t, t.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let batch: Vec<SeqExample> = (0..10)
            .map(|_| {
                let hl = rng.gen_range(1..=4);
                SeqExample {
                    history: (0..hl).map(|_| rng.gen_range(0..6)).collect(),
                    pos: rng.gen_range(0..6),
                    neg: rng.gen_range(0..6),
                }
            })
            .collect();
        let wd = 0.01;
        let (_, g) = m.loss_and_grad(&batch, &t, wd).unwrap();
        let cfg = GradCheckConfig::default();
        let eval = |m: &SequentialRec| m.loss_and_grad(&batch, &t, wd).unwrap().0;
        let checks = [
            check_tensor(&mut m, |m| m.item_emb.as_mut_slice(), eval, &g.item_emb, "item_emb", &cfg),
            check_tensor(&mut m, |m| m.text_proj.as_mut_slice(), eval, &g.text_proj, "text_proj", &cfg),
        ];
        for c in checks {
            assert!(c.passed(), "{}: {:?}", c.tensor, c.failures.first());
        }
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let t = table(4, 5, 6);
        let mut m = ConventionalRec::init(3, 5, 3, t.clone(), 8);
        m.freeze();
        let e0 = t.get(2).unwrap().to_vec();
        let g = m.text_grad(1).unwrap();
        let eps = 1e-5;
        for k in 0..4 {
            let mut ep = e0.clone();
            ep[k] += eps;
            let mut em = e0.clone();
            em[k] -= eps;
            let fd =
                (m.score(1, 2, &ep).unwrap() - m.score(1, 2, &em).unwrap()) / (2.0 * eps);
            assert!((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-12) < 1e-6);
        }

        let cfg_t = TrainSeqConfig {
            factors: 3,
            window: 2,
            alpha: 0.7,
            ..Default::default()
        };
        let mut sm = SequentialRec::init(2, 5, &cfg_t, t.clone(), 4).unwrap();
        sm.user_states[0] = vec![0.3, -0.2, 0.9];
        sm.freeze();
        let g = sm.text_grad(0).unwrap();
        for k in 0..4 {
            let mut ep = e0.clone();
            ep[k] += eps;
            let mut em = e0.clone();
            em[k] -= eps;
            let fd =
                (sm.score(0, 2, &ep).unwrap() - sm.score(0, 2, &em).unwrap()) / (2.0 * eps);
            assert!((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn editing_one_items_embedding_leaves_others_scores_alone() {
        let t = table(4, 8, 11);
        let mut m = ConventionalRec::init(5, 8, 3, t.clone(), 12);
        m.freeze();
        let before: Vec<f64> = (0..8)
            .map(|i| m.score(2, i, t.get(i).unwrap()).unwrap())
            .collect();
        let mut t2 = t.clone();
        t2.set(3, vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        for i in 0..8 {
            let after = m.score(2, i, t2.get(i).unwrap()).unwrap();
            if i == 3 {
                assert_ne!(before[i], after);
            } else {
                assert_eq!(before[i], after, "non-target {i} moved");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_validates_shapes() {
        let t = table(3, 4, 13);
        let mut m = ConventionalRec::init(2, 4, 2, t, 14);
        m.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.json");
        save_rec_checkpoint(&RecModel::Conventional(m.clone()), &path).unwrap();
        match load_rec_checkpoint(&path).unwrap() {
            RecModel::Conventional(back) => {
                assert_eq!(back.param_hash(), m.param_hash());
                assert!(back.is_frozen());
            }
            _ => panic!("wrong family"),
        }

        let mut ck: serde_json::Value =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        ck["model"]["user_emb"].as_array_mut().unwrap().pop();
        fs::write(&path, serde_json::to_vec(&ck).unwrap()).unwrap();
        assert!(matches!(load_rec_checkpoint(&path), Err(Error::Shape(_))));
    }
}
