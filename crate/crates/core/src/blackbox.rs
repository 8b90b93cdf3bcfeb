//! Query-only access to a deployed recommender, fake-profile generation, and
//! surrogate distillation.
//!
//! The attacker's code path never holds the platform model itself — only a
//! [`BlackBoxQueries`] handle exposing retrieval-style operations (top-K for
//! a profile, score/rank of an item for a profile) plus the public catalog
//! text. Every call is logged, so tests can assert the attack stayed inside
//! the query interface. Two probe schemes build surrogate training data:
//! random-interaction construction for rating models (score queries) and
//! adaptive generation for sequential models (top-K walks).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, Item};
use crate::error::{Error, Result};
use crate::recommender::{
    ConventionalRec, ItemEmbeddings, ProfileScorer, RecModel, Scorer, SequentialRec,
    TrainRecConfig, TrainSeqConfig,
};
use crate::{ItemId, UserId};

// ============================================================================
// Query interface
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecFamily {
    Conventional,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    TopK { k: usize },
    Score,
    Rank,
}

/// One logged access to the black box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub kind: QueryKind,
    pub profile_len: usize,
    pub item: Option<ItemId>,
}

/// Everything an attacker may do to a deployed recommender. Implementations
/// log every call; nothing here exposes parameters or training interactions.
pub trait BlackBoxQueries {
    fn family(&self) -> RecFamily;
    fn num_items(&self) -> usize;
    /// Public catalog text.
    fn description(&self, i: ItemId) -> Result<&str>;
    /// Ranked retrieval for an ad-hoc interaction profile.
    fn top_k_query(&mut self, profile: &[ItemId], k: usize) -> Result<Vec<ItemId>>;
    /// Prediction score of one item for a profile.
    fn score_query(&mut self, profile: &[ItemId], item: ItemId) -> Result<f64>;
    /// Rank of one item among all items for a profile.
    fn rank_query(&mut self, profile: &[ItemId], item: ItemId) -> Result<usize>;
}

/// In-process stand-in for a deployed platform: a frozen model plus its
/// cached description embeddings, behind the query interface.
pub struct LocalBlackBox {
    model: RecModel,
    items: Vec<Item>,
    pub log: Vec<QueryRecord>,
}

impl LocalBlackBox {
    pub fn new(model: RecModel, items: Vec<Item>) -> Result<LocalBlackBox> {
        let (frozen, num_items, cached) = match &model {
            RecModel::Conventional(m) => (m.is_frozen(), m.num_items, m.text_embs.len()),
            RecModel::Sequential(m) => (m.is_frozen(), m.num_items, m.text_embs.len()),
        };
        if !frozen {
            return Err(Error::Contract("black box requires a frozen model".into()));
        }
        if items.len() != num_items || cached != num_items {
            return Err(Error::Shape(format!(
                "catalog has {} items, model expects {num_items}",
                items.len()
            )));
        }
        Ok(LocalBlackBox { model, items, log: Vec::new() })
    }

    fn profile_scores(&self, profile: &[ItemId]) -> Result<Vec<f64>> {
        let n = self.num_items();
        let mut scores = Vec::with_capacity(n);
        match &self.model {
            RecModel::Conventional(m) => {
                for i in 0..n {
                    scores.push(m.profile_score(profile, i, m.text_embs.get(i)?)?);
                }
            }
            RecModel::Sequential(m) => {
                for i in 0..n {
                    scores.push(m.profile_score(profile, i, m.text_embs.get(i)?)?);
                }
            }
        }
        Ok(scores)
    }
}

impl BlackBoxQueries for LocalBlackBox {
    fn family(&self) -> RecFamily {
        match &self.model {
            RecModel::Conventional(_) => RecFamily::Conventional,
            RecModel::Sequential(_) => RecFamily::Sequential,
        }
    }

    fn num_items(&self) -> usize {
        match &self.model {
            RecModel::Conventional(m) => m.num_items,
            RecModel::Sequential(m) => m.num_items,
        }
    }

    fn description(&self, i: ItemId) -> Result<&str> {
        self.items
            .get(i)
            .map(|it| it.description.as_str())
            .ok_or_else(|| Error::Index(format!("item {i} out of catalog")))
    }

    fn top_k_query(&mut self, profile: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
        if k < 1 || k > self.num_items() {
            return Err(Error::Config(format!("top-k query with k={k}")));
        }
        self.log.push(QueryRecord {
            kind: QueryKind::TopK { k },
            profile_len: profile.len(),
            item: None,
        });
        let scores = self.profile_scores(profile)?;
        let mut order: Vec<ItemId> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        Ok(order)
    }

    fn score_query(&mut self, profile: &[ItemId], item: ItemId) -> Result<f64> {
        self.log.push(QueryRecord {
            kind: QueryKind::Score,
            profile_len: profile.len(),
            item: Some(item),
        });
        match &self.model {
            RecModel::Conventional(m) => m.profile_score(profile, item, m.text_embs.get(item)?),
            RecModel::Sequential(m) => m.profile_score(profile, item, m.text_embs.get(item)?),
        }
    }

    fn rank_query(&mut self, profile: &[ItemId], item: ItemId) -> Result<usize> {
        if item >= self.num_items() {
            return Err(Error::Index(format!("item {item} out of catalog")));
        }
        self.log.push(QueryRecord {
            kind: QueryKind::Rank,
            profile_len: profile.len(),
            item: Some(item),
        });
        let scores = self.profile_scores(profile)?;
        let target = scores[item];
        let rank = 1 + scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| j != item && (s > target || (s == target && j < item)))
            .count();
        Ok(rank)
    }
}

// ============================================================================
// Fake profiles
// ============================================================================

/// One synthetic user the attacker controls (member of Z).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FakeProfile {
    pub fake_user_id: UserId,
    pub interactions: Vec<ItemId>,
}

/// One recorded (fake user, query item, black-box score) triple.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScoreTriple {
    pub fake_user: UserId,
    pub item: ItemId,
    pub score: f64,
}

/// Surrogate training data X′_tr: score triples plus the profiles that
/// produced them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurrogateTrainSet {
    pub profiles: Vec<FakeProfile>,
    pub triples: Vec<ScoreTriple>,
}

fn profile_rng(seed: u64, profile_idx: usize) -> ChaCha8Rng {
    // Independent per-profile stream so profiles could be generated in
    // parallel without changing the output.
    ChaCha8Rng::seed_from_u64(seed ^ (profile_idx as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

/// Random-interaction construction for rating-style black boxes: every fake
/// user interacts with `n` random items, then `n` random query items are
/// scored given that profile. Yields exactly `num_profiles · n` triples.
pub fn gen_fake_profiles_ric<B: BlackBoxQueries>(
    bb: &mut B,
    num_profiles: usize,
    n: usize,
    seed: u64,
) -> Result<SurrogateTrainSet> {
    if bb.family() != RecFamily::Conventional {
        return Err(Error::Family(
            "random-interaction construction needs a rating-style black box".into(),
        ));
    }
    let num_items = bb.num_items();
    if n == 0 || num_profiles == 0 {
        return Err(Error::Config("need at least one profile and interaction".into()));
    }
    if n > num_items {
        return Err(Error::Config(format!(
            "cannot sample {n} distinct items from a catalog of {num_items}"
        )));
    }
    let mut profiles = Vec::with_capacity(num_profiles);
    let mut triples = Vec::with_capacity(num_profiles * n);
    for z in 0..num_profiles {
        let mut rng = profile_rng(seed, z);
        let mut ids: Vec<ItemId> = (0..num_items).collect();
        ids.shuffle(&mut rng);
        let profile: Vec<ItemId> = ids[..n].to_vec();
        let mut query_ids: Vec<ItemId> = (0..num_items).collect();
        query_ids.shuffle(&mut rng);
        for &q in &query_ids[..n] {
            let score = bb.score_query(&profile, q)?;
            triples.push(ScoreTriple { fake_user: z, item: q, score });
        }
        profiles.push(FakeProfile { fake_user_id: z, interactions: profile });
    }
    Ok(SurrogateTrainSet { profiles, triples })
}

/// Adaptive data generation for sequential black boxes: seed each profile
/// with one random item, then repeatedly query the top-K for the current
/// profile and append a uniform choice from it, until `n` interactions.
pub fn gen_fake_profiles_adg<B: BlackBoxQueries>(
    bb: &mut B,
    num_profiles: usize,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<FakeProfile>> {
    if bb.family() != RecFamily::Sequential {
        return Err(Error::Family(
            "adaptive data generation needs a sequential black box".into(),
        ));
    }
    if k < 1 {
        return Err(Error::Config("adaptive generation needs k ≥ 1".into()));
    }
    if n == 0 || num_profiles == 0 {
        return Err(Error::Config("need at least one profile and interaction".into()));
    }
    let num_items = bb.num_items();
    let mut profiles = Vec::with_capacity(num_profiles);
    for z in 0..num_profiles {
        let mut rng = profile_rng(seed, z);
        let mut interactions = vec![rng.gen_range(0..num_items)];
        while interactions.len() < n {
            let top = bb.top_k_query(&interactions, k)?;
            let pick = top[rng.gen_range(0..top.len())];
            interactions.push(pick);
        }
        profiles.push(FakeProfile { fake_user_id: z, interactions });
    }
    Ok(profiles)
}

// ============================================================================
// Surrogate training
// ============================================================================

/// Σ (recorded black-box score − surrogate prediction)² over a train set.
pub fn surrogate_loss(
    surrogate: &ConventionalRec,
    set: &[ScoreTriple],
    table: &ItemEmbeddings,
) -> Result<f64> {
    let mut loss = 0.0;
    for t in set {
        let pred = surrogate.score(t.fake_user, t.item, table.get(t.item)?)?;
        loss += (t.score - pred) * (t.score - pred);
    }
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Distill a rating-style surrogate from recorded score triples by squared-
/// error SGD (the same objective the loss above reports, summed). The
/// surrogate is frozen on return.
pub fn train_surrogate(
    surrogate: &mut ConventionalRec,
    set: &SurrogateTrainSet,
    cfg: &TrainRecConfig,
) -> Result<SurrogateSummary> {
    if set.triples.is_empty() {
        return Err(Error::Config("empty surrogate training set".into()));
    }
    // Score triples become rating examples; a held-out tenth drives the
    // trainer's early stop.
    let as_interactions: Vec<Interaction> = set
        .triples
        .iter()
        .map(|t| Interaction {
            user_id: t.fake_user,
            item_id: t.item,
            rating: t.score,
            timestamp: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..as_interactions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f12_7b3d);
    order.shuffle(&mut rng);
    let val_len = (as_interactions.len() / 10).max(1).min(as_interactions.len() - 1);
    let (val_idx, train_idx) = order.split_at(val_len);
    let train: Vec<Interaction> = train_idx.iter().map(|&i| as_interactions[i]).collect();
    let val: Vec<Interaction> = val_idx.iter().map(|&i| as_interactions[i]).collect();

    let summary = surrogate.train(&train, &val, cfg)?;
    let final_loss = surrogate_loss(surrogate, &set.triples, &surrogate.text_embs.clone())?;
    Ok(SurrogateSummary {
        final_loss,
        epochs_run: summary.epochs_run,
    })
}

/// Distill a sequential surrogate by treating the adaptively generated
/// profiles as interaction histories.
pub fn train_sequential_surrogate(
    profiles: &[FakeProfile],
    num_items: usize,
    table: ItemEmbeddings,
    cfg: &TrainSeqConfig,
) -> Result<SequentialRec> {
    if profiles.is_empty() {
        return Err(Error::Config("no fake profiles to train on".into()));
    }
    let histories: Vec<Vec<Interaction>> = profiles
        .iter()
        .map(|p| {
            p.interactions
                .iter()
                .enumerate()
                .map(|(pos, &item)| Interaction {
                    user_id: p.fake_user_id,
                    item_id: item,
                    rating: 1.0,
                    timestamp: pos as i64,
                })
                .collect()
        })
        .collect();
    let mut surrogate = SequentialRec::init(profiles.len(), num_items, cfg, table, cfg.seed)?;
    // Distillation wants a tight fit to the probe walks, so the fit metric
    // (and early stop) is measured on the same histories.
    surrogate.train(&histories, &histories, cfg)?;
    Ok(surrogate)
}

// ============================================================================
// Fidelity
// ============================================================================

/// Probe inputs for the fidelity comparison, per family.
pub enum FidelityProbe<'a> {
    /// Held-out ratings; each user is represented by their interaction
    /// profile so both models score through the same fold-in path.
    Ratings {
        interactions: &'a [Interaction],
        user_profiles: &'a [Vec<ItemId>],
    },
    /// Per-user histories plus a probe item set for Appear@K agreement.
    Ranking {
        histories: &'a [Vec<ItemId>],
        probe_items: &'a [ItemId],
        k: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub family: RecFamily,
    pub metric_blackbox: f64,
    pub metric_surrogate: f64,
    /// |surrogate − blackbox| / blackbox. When the black-box metric is zero
    /// the absolute difference is reported and `degenerate` is set.
    pub relative_change: f64,
    pub degenerate: bool,
}

/// Accuracy change when the surrogate stands in for the black box:
/// rating models compare RMSE on held-out ratings (profile-scored on both
/// sides), sequential models compare Appear@K of a probe item set.
pub fn surrogate_fidelity(
    blackbox: &RecModel,
    surrogate: &RecModel,
    probe: &FidelityProbe,
) -> Result<FidelityReport> {
    match (blackbox, surrogate, probe) {
        (
            RecModel::Conventional(bb),
            RecModel::Conventional(s),
            FidelityProbe::Ratings { interactions, user_profiles },
        ) => {
            if !bb.is_frozen() || !s.is_frozen() {
                return Err(Error::Contract("fidelity needs frozen models".into()));
            }
            if interactions.is_empty() {
                return Err(Error::Config("empty fidelity probe".into()));
            }
            let rmse_of = |m: &ConventionalRec| -> Result<f64> {
                let mut se = 0.0;
                for it in *interactions {
                    let profile = user_profiles
                        .get(it.user_id)
                        .filter(|p| !p.is_empty())
                        .ok_or_else(|| {
                            Error::Config(format!("user {} has no probe profile", it.user_id))
                        })?;
                    let pred =
                        m.profile_score(profile, it.item_id, m.text_embs.get(it.item_id)?)?;
                    se += (pred - it.rating) * (pred - it.rating);
                }
                Ok((se / interactions.len() as f64).sqrt())
            };
            let mb = rmse_of(bb)?;
            let ms = rmse_of(s)?;
            let (rel, degenerate) = relative_change(mb, ms);
            Ok(FidelityReport {
                family: RecFamily::Conventional,
                metric_blackbox: mb,
                metric_surrogate: ms,
                relative_change: rel,
                degenerate,
            })
        }
        (
            RecModel::Sequential(bb),
            RecModel::Sequential(s),
            FidelityProbe::Ranking { histories, probe_items, k },
        ) => {
            if !bb.is_frozen() || !s.is_frozen() {
                return Err(Error::Contract("fidelity needs frozen models".into()));
            }
            if histories.is_empty() || probe_items.is_empty() {
                return Err(Error::Config("empty fidelity probe".into()));
            }
            let appear_of = |m: &SequentialRec| -> Result<f64> {
                let mut hits = 0usize;
                let mut users = 0usize;
                for h in *histories {
                    if h.is_empty() {
                        continue;
                    }
                    users += 1;
                    let state = m.state_of(h)?;
                    let mut scores = Vec::with_capacity(m.num_items);
                    for i in 0..m.num_items {
                        let r = m.item_repr(i, m.text_embs.get(i)?)?;
                        scores.push(crate::mathutil::dot(&state, &r));
                    }
                    let mut order: Vec<ItemId> = (0..scores.len()).collect();
                    order.sort_by(|&a, &b| {
                        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
                    });
                    order.truncate(*k);
                    hits += order.iter().filter(|i| probe_items.contains(i)).count();
                }
                if users == 0 {
                    return Err(Error::Config("no non-empty probe histories".into()));
                }
                Ok(hits as f64 / (*k as f64 * users as f64))
            };
            let mb = appear_of(bb)?;
            let ms = appear_of(s)?;
            let (rel, degenerate) = relative_change(mb, ms);
            Ok(FidelityReport {
                family: RecFamily::Sequential,
                metric_blackbox: mb,
                metric_surrogate: ms,
                relative_change: rel,
                degenerate,
            })
        }
        _ => Err(Error::Family(
            "fidelity probe and model families do not match".into(),
        )),
    }
}

fn relative_change(base: f64, other: f64) -> (f64, bool) {
    if base == 0.0 {
        ((other - base).abs(), true)
    } else {
        ((other - base).abs() / base.abs(), false)
    }
}

// ============================================================================
// Persistence
// ============================================================================

pub fn save_profiles_jsonl<P: AsRef<Path>>(profiles: &[FakeProfile], path: P) -> Result<()> {
    let mut out = String::new();
    for p in profiles {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_train_set_jsonl<P: AsRef<Path>>(set: &SurrogateTrainSet, path: P) -> Result<()> {
    let mut out = String::new();
    for t in &set.triples {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ============================================================================
// Tests
// ============================================================================
