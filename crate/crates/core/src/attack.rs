//! Two-phase description-rewriting attack.
//!
//! Phase 1 adapts the attacker's language model to the catalog's description
//! style (plain next-token training). Phase 2 keeps training the LM on text
//! while adding a hinge-shaped rank-promotion term: target descriptions are
//! embedded with the LM's *current* parameters, scored by the frozen
//! recommender, and pushed toward each sampled user's maximum score. The
//! recommender is never updated — only the text model moves. Finally the
//! tuned LM rewrites the target descriptions and the rewritten text is
//! re-embedded to measure rank movement.
//!
//! The same code drives the query-only variant: callers pass a surrogate
//! model (trained from black-box probes) and its fake-user population in
//! place of the real recommender and user base.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_description, Item};
use crate::error::{Error, Result};
use crate::recommender::{rank_of, score_row, ItemEmbeddings, Scorer, MAX_DESC_WORDS};
use crate::textenc::{
    embed_text, embed_text_backward, generate, lm_loss_and_grad, make_windows, DecodeConfig,
    TinyLm,
};
use crate::{ItemId, TokenId, UserId};

// ============================================================================
// Configuration and target selection
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    /// Weight on the promotion term in the joint objective.
    pub lambda: f64,
    /// Hinge margin: targets are pushed `margin` above the per-user maximum.
    pub margin: f64,
    /// |U′| / |U|: fraction of users sampled per joint batch.
    pub user_sample_frac: f64,
    /// |G′|: targets sampled per joint batch (clamped to the target count).
    pub target_batch: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// p: how many leading tokens of the original description seed a rewrite.
    pub prompt_prefix_tokens: usize,
    /// Hard cap on rewritten description length, in words.
    pub max_rewrite_words: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 1.0,
            margin: 0.01,
            user_sample_frac: 0.1,
            target_batch: 16,
            phase1_epochs: 10,
            phase2_epochs: 2,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
            prompt_prefix_tokens: 4,
            max_rewrite_words: MAX_DESC_WORDS,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be ≥ 0".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be ≥ 0".into()));
        }
        if !(self.user_sample_frac > 0.0 && self.user_sample_frac <= 1.0) {
            return Err(Error::Config("user_sample_frac must be in (0,1]".into()));
        }
        if self.target_batch < 1 {
            return Err(Error::Config("target_batch must be ≥ 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.prompt_prefix_tokens < 1 {
            return Err(Error::Config("prompt_prefix_tokens must be ≥ 1".into()));
        }
        if self.max_rewrite_words < 1 {
            return Err(Error::Config("max_rewrite_words must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The promoted item set G.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TargetSet {
    items: Vec<ItemId>,
}

impl TargetSet {
    /// Validated, deduplicated, sorted target ids.
    pub fn new(items: Vec<ItemId>, num_items: usize) -> Result<TargetSet> {
        if items.is_empty() {
            return Err(Error::Config("target set is empty".into()));
        }
        let set: BTreeSet<ItemId> = items.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= num_items) {
            return Err(Error::Index(format!("target item {bad} out of range")));
        }
        Ok(TargetSet {
            items: set.into_iter().collect(),
        })
    }

    /// Uniform random targets; `frac` of the catalog, at least one item.
    pub fn sample(num_items: usize, frac: f64, seed: u64) -> Result<TargetSet> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Config("target fraction must be in (0,1]".into()));
        }
        let count = ((num_items as f64 * frac).round() as usize).max(1);
        let mut ids: Vec<ItemId> = (0..num_items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        ids.truncate(count);
        TargetSet::new(ids, num_items)
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

// ============================================================================
// Promotion loss
// ============================================================================

/// Per-user reference maxima, refreshed once per fine-tuning epoch and held
/// constant (no gradient) in between.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RmaxCache {
    /// Indexed by user id; covers every user of the scored model.
    pub rmax: Vec<f64>,
    pub epoch_stamp: usize,
}

impl RmaxCache {
    pub fn get(&self, u: UserId) -> Result<f64> {
        self.rmax
            .get(u)
            .copied()
            .ok_or_else(|| Error::Shape(format!("user {u} missing from rmax cache")))
    }
}

/// Exact full-scan per-user maximum score over all items.
pub fn rmax_refresh<S: Scorer>(
    rec: &S,
    table: &ItemEmbeddings,
    epoch: usize,
) -> Result<RmaxCache> {
    if !rec.is_frozen() {
        return Err(Error::Contract("rmax_refresh requires a frozen model".into()));
    }
    let mut rmax = Vec::with_capacity(rec.num_users());
    for u in 0..rec.num_users() {
        let row = score_row(rec, u, table)?;
        let m = row
            .scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        rmax.push(m);
    }
    Ok(RmaxCache { rmax, epoch_stamp: epoch })
}

/// Σ_u Σ_i max(R^u_max − Θ(u,i) + margin, 0) over a (users × targets) score
/// matrix. `rmax` is aligned with the rows of `scores`.
pub fn promotion_loss(scores: &[Vec<f64>], rmax: &[f64], margin: f64) -> Result<f64> {
    Ok(promotion_loss_and_grad(scores, rmax, margin)?.0)
}

/// Loss plus ∂L/∂Θ(u,i): −1 on active hinges, 0 otherwise (including at the
/// kink).
pub fn promotion_loss_and_grad(
    scores: &[Vec<f64>],
    rmax: &[f64],
    margin: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if scores.len() != rmax.len() {
        return Err(Error::Shape(format!(
            "{} score rows but {} rmax entries",
            scores.len(),
            rmax.len()
        )));
    }
    let width = scores.first().map_or(0, |r| r.len());
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (row, &r) in scores.iter().zip(rmax) {
        if row.len() != width {
            return Err(Error::Shape("ragged score matrix".into()));
        }
        let mut grow = vec![0.0; row.len()];
        for (theta, slot) in row.iter().zip(grow.iter_mut()) {
            if !theta.is_finite() {
                return Err(Error::Shape("non-finite score in promotion loss".into()));
            }
            let term = r - theta + margin;
            if term > 0.0 {
                loss += term;
                *slot = -1.0;
            }
        }
        grad.push(grow);
    }
    Ok((loss, grad))
}

// ============================================================================
// Joint objective
// ============================================================================

/// One joint-step loss decomposition; `total = text_gen + λ·promotion`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub text_gen_loss: f64,
    pub promotion_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(text_gen_loss: f64, promotion_loss: f64, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            text_gen_loss,
            promotion_loss,
            total: text_gen_loss + lambda * promotion_loss,
        }
    }
}

/// Tokenized target descriptions, embedded fresh at every step so promotion
/// gradients reach the LM's embedding table.
#[derive(Debug, Clone)]
pub struct TargetTokens {
    pub item_id: ItemId,
    pub tokens: Vec<TokenId>,
}

/// Tokenize each target's original description, truncated to the same word
/// cap the recommender's embedding table was built with.
pub fn target_tokens(lm: &TinyLm, items: &[Item], targets: &TargetSet) -> Result<Vec<TargetTokens>> {
    targets
        .ids()
        .iter()
        .map(|&g| {
            let item = items
                .get(g)
                .ok_or_else(|| Error::Index(format!("target item {g} out of range")))?;
            let toks = truncate_description(&lm.vocab.tokenize(&item.description), MAX_DESC_WORDS);
            if toks.is_empty() {
                return Err(Error::EmptyText(format!("target item {g} has empty description")));
            }
            Ok(TargetTokens { item_id: g, tokens: toks })
        })
        .collect()
}

/// λ·L_promotion as a function of the LM, with its gradient w.r.t. the LM
/// embedding table: each sampled target is embedded with the current LM,
/// scored against each sampled user, and hinge terms backpropagate through
/// score ∘ embed. Promotion only touches `emb` (the description embedding is
/// a mean of embedding rows), so the other LM tensors receive zero gradient.
pub fn promotion_chain_loss_and_grad<S: Scorer>(
    lm: &TinyLm,
    rec: &S,
    users: &[UserId],
    targets: &[TargetTokens],
    rmax: &RmaxCache,
    lambda: f64,
    margin: f64,
    grad_emb: &mut [f64],
) -> Result<f64> {
    let mut score_mat = Vec::with_capacity(users.len());
    let mut embeds = Vec::with_capacity(targets.len());
    for t in targets {
        embeds.push(embed_text(lm, &t.tokens)?);
    }
    let mut rmax_rows = Vec::with_capacity(users.len());
    for &u in users {
        let mut row = Vec::with_capacity(targets.len());
        for (t, e) in targets.iter().zip(&embeds) {
            row.push(rec.score(u, t.item_id, e)?);
        }
        score_mat.push(row);
        rmax_rows.push(rmax.get(u)?);
    }
    let (loss, dtheta) = promotion_loss_and_grad(&score_mat, &rmax_rows, margin)?;

    // dL/de_g = Σ_u dL/dΘ(u,g) · ∂Θ/∂e, then into embedding rows.
    for (gi, t) in targets.iter().enumerate() {
        let mut de = vec![0.0; lm.dim];
        let mut any = false;
        for (ui, &u) in users.iter().enumerate() {
            let d = dtheta[ui][gi];
            if d == 0.0 {
                continue;
            }
            any = true;
            let tg = rec.text_grad(u)?;
            for (slot, g) in de.iter_mut().zip(tg) {
                *slot += d * g;
            }
        }
        if any {
            embed_text_backward(&t.tokens, lm.dim, &de, grad_emb, lambda);
        }
    }
    Ok(loss)
}

/// One Phase-2 SGD step: next-token loss on the text batch plus λ times the
/// promotion loss on (sampled users × sampled targets), then a single update
/// of the LM parameters. The recommender must be frozen and is never touched.
#[allow(clippy::too_many_arguments)]
pub fn joint_step<S: Scorer>(
    lm: &mut TinyLm,
    rec: &S,
    text_windows: &[Vec<TokenId>],
    users: &[UserId],
    targets: &[TargetTokens],
    rmax: &RmaxCache,
    cfg: &AttackConfig,
) -> Result<LossBreakdown> {
    if !rec.is_frozen() {
        return Err(Error::Contract(
            "joint_step requires a frozen recommender".into(),
        ));
    }
    let (text_loss, mut grads) = lm_loss_and_grad(lm, text_windows)?;
    let prom_loss = promotion_chain_loss_and_grad(
        lm, rec, users, targets, rmax, cfg.lambda, cfg.margin, &mut grads.emb,
    )?;
    lm.apply_gradients(&grads, cfg.lr);
    Ok(LossBreakdown::compose(text_loss, prom_loss, cfg.lambda))
}

// ============================================================================
// Phase 1: domain adaptation
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Summary {
    /// Mean training NLL per epoch.
    pub epoch_nll: Vec<f64>,
    /// Held-out perplexity before any training.
    pub perplexity_untrained: f64,
    /// Held-out perplexity after training.
    pub perplexity_trained: f64,
}

/// Every 10th description is held out for perplexity measurement; the rest
/// feed next-token training.
pub fn split_held_out(descriptions: &[String]) -> (Vec<&String>, Vec<&String>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, d) in descriptions.iter().enumerate() {
        if i % 10 == 0 {
            held.push(d);
        } else {
            train.push(d);
        }
    }
    if train.is_empty() {
        // Tiny corpora: train on everything, measure on everything.
        (descriptions.iter().collect(), descriptions.iter().collect())
    } else {
        (train, held)
    }
}

/// Mean per-description perplexity over a held-out slice (descriptions too
/// short for a strict window are skipped).
pub fn held_out_perplexity(lm: &TinyLm, descriptions: &[&String]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in descriptions {
        let toks = lm.vocab.tokenize(d);
        if toks.len() < lm.context + 1 {
            continue;
        }
        sum += crate::textenc::perplexity(lm, &toks)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(
            "no held-out description long enough for perplexity".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Next-token fine-tuning on the catalog's descriptions.
pub fn phase1_finetune(
    lm: &mut TinyLm,
    descriptions: &[String],
    cfg: &AttackConfig,
) -> Result<Phase1Summary> {
    cfg.validate()?;
    if descriptions.is_empty() {
        return Err(Error::Config("phase 1 needs a non-empty corpus".into()));
    }
    let (train_docs, held_docs) = split_held_out(descriptions);
    let perplexity_untrained = held_out_perplexity(lm, &held_docs)?;

    let mut windows: Vec<Vec<TokenId>> = Vec::new();
    for d in &train_docs {
        let toks = lm.vocab.tokenize(d);
        windows.extend(make_windows(&toks, lm.context));
    }
    if windows.is_empty() {
        return Err(Error::Config("corpus produced no training windows".into()));
    }

    let mut epoch_nll = Vec::with_capacity(cfg.phase1_epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.phase1_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<TokenId>> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let (loss, g) = lm_loss_and_grad(lm, &batch)?;
            lm.apply_gradients(&g, cfg.lr);
            sum += loss;
            batches += 1;
        }
        epoch_nll.push(sum / batches as f64);
    }
    let perplexity_trained = held_out_perplexity(lm, &held_docs)?;
    Ok(Phase1Summary {
        epoch_nll,
        perplexity_untrained,
        perplexity_trained,
    })
}

// ============================================================================
// Phase 2: joint fine-tuning
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2EpochStats {
    pub epoch: usize,
    pub mean_text_loss: f64,
    pub mean_promotion_loss: f64,
    pub val_promotion_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Summary {
    pub epochs: Vec<Phase2EpochStats>,
    pub stopped_early: bool,
}

/// Epochs of non-improving validation promotion loss tolerated before
/// joint fine-tuning stops and restores the best snapshot.
const PHASE2_PATIENCE: usize = 3;

/// Joint fine-tuning. `rec` is the frozen scoring model — the real platform
/// model in the white-box setting, the attacker's surrogate (with its fake
/// user population) in the query-only setting. `base_table` holds the
/// training-time description embeddings; target rows are re-embedded with
/// the current LM at every epoch's reference refresh.
pub fn phase2_finetune<S: Scorer>(
    lm: &mut TinyLm,
    rec: &S,
    items: &[Item],
    base_table: &ItemEmbeddings,
    targets: &TargetSet,
    cfg: &AttackConfig,
) -> Result<Phase2Summary> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Config("phase 2 needs a non-empty target set".into()));
    }
    let tokens = target_tokens(lm, items, targets)?;

    // Text pools: target windows and whole-corpus windows, mixed 1:1.
    let mut target_windows: Vec<Vec<TokenId>> = Vec::new();
    for t in &tokens {
        target_windows.extend(make_windows(&t.tokens, lm.context));
    }
    let mut corpus_windows: Vec<Vec<TokenId>> = Vec::new();
    for item in items {
        let toks = lm.vocab.tokenize(&item.description);
        corpus_windows.extend(make_windows(&toks, lm.context));
    }

    let num_users = rec.num_users();
    let users_per_batch = ((num_users as f64 * cfg.user_sample_frac).round() as usize)
        .clamp(1, num_users);
    let targets_per_batch = cfg.target_batch.min(tokens.len());
    let batches_per_epoch = (corpus_windows.len() / cfg.batch_size).max(1);

    // Fixed validation users for the early-stop signal.
    let mut val_users: Vec<UserId> = (0..num_users).collect();
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    val_users.shuffle(&mut vrng);
    val_users.truncate(users_per_batch.max(1));
    val_users.sort_unstable();

    let val_loss = |lm: &TinyLm, rmax: &RmaxCache| -> Result<f64> {
        let mut embeds = Vec::with_capacity(tokens.len());
        for t in &tokens {
            embeds.push(embed_text(lm, &t.tokens)?);
        }
        let mut mat = Vec::with_capacity(val_users.len());
        let mut rrow = Vec::with_capacity(val_users.len());
        for &u in &val_users {
            let mut row = Vec::with_capacity(tokens.len());
            for (t, e) in tokens.iter().zip(&embeds) {
                row.push(rec.score(u, t.item_id, e)?);
            }
            mat.push(row);
            rrow.push(rmax.get(u)?);
        }
        promotion_loss(&mat, &rrow, cfg.margin)
    };

    let mut epochs = Vec::with_capacity(cfg.phase2_epochs);
    let mut stopped_early = false;
    let mut best_val = f64::INFINITY;
    let mut best: Option<TinyLm> = None;
    let mut bad_epochs = 0usize;

    // Fixed reference for validation: the pre-attack per-user maxima. The
    // per-epoch refresh below tracks the moving table (targets chase the
    // current leader, themselves included), which makes the training loss
    // non-stationary; measuring progress against the original maxima gives
    // early stopping a stationary signal.
    let base_rmax = rmax_refresh(rec, base_table, 0)?;

    for epoch in 0..cfg.phase2_epochs {
        // Refresh per-user maxima against the current target embeddings.
        let mut table = base_table.clone();
        for t in &tokens {
            table.set(t.item_id, embed_text(lm, &t.tokens)?)?;
        }
        let rmax = rmax_refresh(rec, &table, epoch)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x2f0 + epoch as u64));
        let mut text_sum = 0.0;
        let mut prom_sum = 0.0;
        for _ in 0..batches_per_epoch {
            // 1:1 text mix of target windows and corpus windows.
            let half = (cfg.batch_size / 2).max(1);
            let mut batch: Vec<Vec<TokenId>> = Vec::with_capacity(2 * half);
            for _ in 0..half {
                batch.push(target_windows.choose(&mut rng).unwrap().clone());
            }
            for _ in 0..half {
                batch.push(corpus_windows.choose(&mut rng).unwrap().clone());
            }

            // Fresh U′ and G′ for every batch.
            let mut ids: Vec<UserId> = (0..num_users).collect();
            ids.shuffle(&mut rng);
            ids.truncate(users_per_batch);
            let mut gidx: Vec<usize> = (0..tokens.len()).collect();
            gidx.shuffle(&mut rng);
            gidx.truncate(targets_per_batch);
            let gprime: Vec<TargetTokens> =
                gidx.into_iter().map(|i| tokens[i].clone()).collect();

            let b = joint_step(lm, rec, &batch, &ids, &gprime, &rmax, cfg)?;
            text_sum += b.text_gen_loss;
            prom_sum += b.promotion_loss;
        }

        let val = val_loss(lm, &base_rmax)?;
        epochs.push(Phase2EpochStats {
            epoch,
            mean_text_loss: text_sum / batches_per_epoch as f64,
            mean_promotion_loss: prom_sum / batches_per_epoch as f64,
            val_promotion_loss: val,
        });

        if val < best_val {
            best_val = val;
            best = Some(lm.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= PHASE2_PATIENCE {
                stopped_early = true;
                break;
            }
        }
    }

    // SGD noise means the last epoch is not necessarily the strongest; keep
    // the snapshot with the best validation promotion loss.
    if let Some(b) = best {
        *lm = b;
    }
    Ok(Phase2Summary { epochs, stopped_early })
}

// ============================================================================
// Rewriting
// ============================================================================

/// One target's rewrite plus its measured effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteResult {
    pub item_id: ItemId,
    pub original: String,
    pub rewritten: String,
    /// Per sampled user, aligned with `score_after`.
    pub score_before: Vec<f64>,
    pub score_after: Vec<f64>,
    /// Mean rank over the same user sample.
    pub rank_before: f64,
    pub rank_after: f64,
}

/// Outcome of rewriting all targets: per-target results plus the table with
/// every target row re-embedded (non-target rows untouched).
#[derive(Debug, Clone)]
pub struct RewriteOutcome {
    pub results: Vec<RewriteResult>,
    pub updated_table: ItemEmbeddings,
}

/// Generate a rewritten description for every target with the tuned LM, then
/// measure before/after scores and ranks on `eval_users` against the frozen
/// model. Before-values use `base_table`; after-values use the table with
/// *all* target rows replaced, so cross-target interactions are included.
#[allow(clippy::too_many_arguments)]
pub fn rewrite_targets<S: Scorer>(
    lm: &TinyLm,
    rec: &S,
    items: &[Item],
    base_table: &ItemEmbeddings,
    targets: &TargetSet,
    eval_users: &[UserId],
    decode: &DecodeConfig,
    cfg: &AttackConfig,
) -> Result<RewriteOutcome> {
    cfg.validate()?;
    if eval_users.is_empty() {
        return Err(Error::Config("rewrite evaluation needs users".into()));
    }
    let tokens = target_tokens(lm, items, targets)?;
    let mut updated = base_table.clone();
    let mut texts: Vec<(ItemId, String, String, Vec<TokenId>)> = Vec::new();

    for t in &tokens {
        let p = cfg.prompt_prefix_tokens.min(t.tokens.len());
        let prompt = &t.tokens[..p];
        let mut continuation = generate(lm, prompt, decode)?;
        if continuation.is_empty() {
            // Sampled decode died immediately; deterministic retry.
            continuation = generate(lm, prompt, &DecodeConfig::greedy(decode.max_new_tokens))?;
        }
        if continuation.is_empty() && prompt.is_empty() {
            return Err(Error::Generation {
                prompt_hash: prompt_hash(&t.tokens),
                msg: format!("empty rewrite for target item {}", t.item_id),
            });
        }
        let mut rewritten: Vec<TokenId> = prompt.to_vec();
        rewritten.extend(continuation);
        let rewritten = truncate_description(&rewritten, cfg.max_rewrite_words);
        if rewritten.is_empty() {
            return Err(Error::Generation {
                prompt_hash: prompt_hash(&t.tokens),
                msg: format!("empty rewrite for target item {}", t.item_id),
            });
        }
        updated.set(t.item_id, embed_text(lm, &rewritten)?)?;
        texts.push((
            t.item_id,
            items[t.item_id].description.clone(),
            lm.vocab.decode(&rewritten),
            rewritten,
        ));
    }

    let mut results = Vec::with_capacity(texts.len());
    for (item_id, original, rewritten_text, _toks) in texts {
        let mut score_before = Vec::with_capacity(eval_users.len());
        let mut score_after = Vec::with_capacity(eval_users.len());
        let mut rank_b = 0.0;
        let mut rank_a = 0.0;
        for &u in eval_users {
            score_before.push(rec.score(u, item_id, base_table.get(item_id)?)?);
            score_after.push(rec.score(u, item_id, updated.get(item_id)?)?);
            rank_b += rank_of(rec, u, item_id, base_table)? as f64;
            rank_a += rank_of(rec, u, item_id, &updated)? as f64;
        }
        let n = eval_users.len() as f64;
        results.push(RewriteResult {
            item_id,
            original,
            rewritten: rewritten_text,
            score_before,
            score_after,
            rank_before: rank_b / n,
            rank_after: rank_a / n,
        });
    }
    Ok(RewriteOutcome {
        results,
        updated_table: updated,
    })
}

fn prompt_hash(tokens: &[TokenId]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for &t in tokens {
        h.update(t.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

// ============================================================================
// Tests
// ============================================================================
