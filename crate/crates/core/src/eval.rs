//! Ranking and text-quality metrics, attack-effectiveness statistics, and
//! report assembly.
//!
//! All metrics are pure functions over immutable inputs; report JSON is
//! deterministic (fixed field order, no timestamps) so identical runs
//! produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::recommender::{rank_of, top_k, ItemEmbeddings, Scorer};
use crate::{ItemId, UserId};

// ============================================================================
// Ranking metrics
// ============================================================================

/// Mean of `rank_of` over every (user, target) pair.
pub fn avg_predicted_rank<S: Scorer>(
    model: &S,
    targets: &[ItemId],
    users: &[UserId],
    table: &ItemEmbeddings,
) -> Result<f64> {
    if targets.is_empty() || users.is_empty() {
        return Err(Error::Config("average rank needs targets and users".into()));
    }
    let mut sum = 0.0;
    for &u in users {
        for &i in targets {
            sum += rank_of(model, u, i, table)? as f64;
        }
    }
    Ok(sum / (targets.len() * users.len()) as f64)
}

/// Σ_u |targets ∩ top_K(u)| / (K·|users|).
pub fn appear_at_k<S: Scorer>(
    model: &S,
    targets: &[ItemId],
    users: &[UserId],
    k: usize,
    table: &ItemEmbeddings,
) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Config("appear@K needs at least one user".into()));
    }
    let mut hits = 0usize;
    for &u in users {
        let top = top_k(model, u, k, table)?;
        hits += top.iter().filter(|i| targets.contains(i)).count();
    }
    Ok(hits as f64 / (k as f64 * users.len() as f64))
}

/// Average rank normalized by catalog size; lower is a better promotion.
pub fn rank_ratio(avg_rank: f64, num_candidates: usize) -> Result<f64> {
    if num_candidates == 0 {
        return Err(Error::Range("no candidates".into()));
    }
    if !(1.0..=num_candidates as f64).contains(&avg_rank) {
        return Err(Error::Range(format!(
            "average rank {avg_rank} outside [1, {num_candidates}]"
        )));
    }
    Ok(avg_rank / num_candidates as f64)
}

// ============================================================================
// Text metrics
// ============================================================================

pub fn cosine_similarity(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!(
            "cosine over vectors of length {} and {}",
            e1.len(),
            e2.len()
        )));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let n1 = e1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = e2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Range(
            "cosine similarity undefined for a zero vector".into(),
        ));
    }
    Ok(dot / (n1 * n2))
}

// ============================================================================
// Attack statistics
// ============================================================================

/// Fraction of aligned (user, target) pairs whose score strictly increased.
/// Ties count as failures.
pub fn promotion_success_rate(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::Shape(format!(
            "score lists misaligned: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(Error::Config("no score pairs".into()));
    }
    let wins = before.iter().zip(after).filter(|(b, a)| a > b).count();
    Ok(wins as f64 / before.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    /// Set when the differences have zero variance with a nonzero mean, in
    /// which case p is reported as 0 (improvement) or 1 (regression) by the
    /// stated convention rather than computed from a distribution.
    pub degenerate: bool,
}

/// Paired one-tailed t-test that `after` is lower than `before`.
///
/// Differences are before − after, so a positive mean difference (ranks
/// dropped) gives a positive t and a small p. Pairing is over the same
/// (user, target) pairs on both sides.
pub fn one_tailed_t_test(before: &[f64], after: &[f64]) -> Result<TTestResult> {
    if before.len() != after.len() {
        return Err(Error::Shape(format!(
            "paired test misaligned: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    let n = before.len();
    if n < 2 {
        return Err(Error::Config(format!("paired t-test needs n ≥ 2, got {n}")));
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, p: 0.5, degenerate: false }
        } else if mean > 0.0 {
            TTestResult { t: f64::INFINITY, p: 0.0, degenerate: true }
        } else {
            TTestResult { t: f64::NEG_INFINITY, p: 1.0, degenerate: true }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Contract(format!("t-distribution setup: {e}")))?;
    let p = 1.0 - dist.cdf(t);
    Ok(TTestResult { t, p, degenerate: false })
}

// ============================================================================
// Report assembly
// ============================================================================

/// Every metric for one seed. Field order fixes the JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricBlock {
    pub avg_predicted_rank_before: f64,
    pub avg_predicted_rank_after: f64,
    pub rank_ratio_before: f64,
    pub rank_ratio_after: f64,
    pub appear_at_k_before: f64,
    pub appear_at_k_after: f64,
    pub promotion_success_rate: f64,
    /// Mean cosine between original and rewritten description embeddings.
    pub semantic_similarity: f64,
    /// Held-out perplexity of the rewriting model.
    pub perplexity: f64,
    pub rmse_overall_before: f64,
    pub rmse_overall_after: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub degenerate_t: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Cutoff K used by the appear metric.
    pub k: usize,
    pub num_users: usize,
    pub num_candidates: usize,
    pub num_targets: usize,
    pub seeds: Vec<u64>,
    /// Aligned with `seeds`.
    pub per_seed: Vec<MetricBlock>,
    /// Field-wise mean over seeds (flag is the OR).
    pub mean: MetricBlock,
}

/// Raw per-seed inputs for [`build_report`]. `None` marks an artifact the
/// run failed to produce; build_report lists every absent one.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedInputs {
    pub seed: u64,
    /// Per-(user, target) ranks, aligned before/after.
    pub ranks_before: Option<Vec<f64>>,
    pub ranks_after: Option<Vec<f64>>,
    /// Per-(user, target) scores, aligned before/after.
    pub scores_before: Option<Vec<f64>>,
    pub scores_after: Option<Vec<f64>>,
    pub appear_before: Option<f64>,
    pub appear_after: Option<f64>,
    pub semantic_similarity: Option<f64>,
    pub perplexity: Option<f64>,
    pub rmse_before: Option<f64>,
    pub rmse_after: Option<f64>,
}

pub fn build_report(
    inputs: &[SeedInputs],
    k: usize,
    num_users: usize,
    num_candidates: usize,
    num_targets: usize,
) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(Error::Artifact("no per-seed inputs".into()));
    }
    // Collect every missing artifact across all seeds before failing.
    let mut missing = Vec::new();
    for inp in inputs {
        let mut need = |present: bool, name: &str| {
            if !present {
                missing.push(format!("seed {}: {}", inp.seed, name));
            }
        };
        need(inp.ranks_before.is_some(), "ranks_before");
        need(inp.ranks_after.is_some(), "ranks_after");
        need(inp.scores_before.is_some(), "scores_before");
        need(inp.scores_after.is_some(), "scores_after");
        need(inp.appear_before.is_some(), "appear_before");
        need(inp.appear_after.is_some(), "appear_after");
        need(inp.semantic_similarity.is_some(), "semantic_similarity");
        need(inp.perplexity.is_some(), "perplexity");
        need(inp.rmse_before.is_some(), "rmse_before");
        need(inp.rmse_after.is_some(), "rmse_after");
    }
    if !missing.is_empty() {
        return Err(Error::Artifact(missing.join(", ")));
    }

    let mut per_seed = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let rb = inp.ranks_before.as_ref().unwrap();
        let ra = inp.ranks_after.as_ref().unwrap();
        let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        if rb.is_empty() || rb.len() != ra.len() {
            return Err(Error::Shape(format!(
                "seed {}: rank lists misaligned",
                inp.seed
            )));
        }
        let avg_before = avg(rb);
        let avg_after = avg(ra);
        let tt = one_tailed_t_test(rb, ra)?;
        per_seed.push(MetricBlock {
            avg_predicted_rank_before: avg_before,
            avg_predicted_rank_after: avg_after,
            rank_ratio_before: rank_ratio(avg_before, num_candidates)?,
            rank_ratio_after: rank_ratio(avg_after, num_candidates)?,
            appear_at_k_before: inp.appear_before.unwrap(),
            appear_at_k_after: inp.appear_after.unwrap(),
            promotion_success_rate: promotion_success_rate(
                inp.scores_before.as_ref().unwrap(),
                inp.scores_after.as_ref().unwrap(),
            )?,
            semantic_similarity: inp.semantic_similarity.unwrap(),
            perplexity: inp.perplexity.unwrap(),
            rmse_overall_before: inp.rmse_before.unwrap(),
            rmse_overall_after: inp.rmse_after.unwrap(),
            t_statistic: tt.t,
            p_value: tt.p,
            degenerate_t: tt.degenerate,
        });
    }

    let n = per_seed.len() as f64;
    let mean_of = |f: fn(&MetricBlock) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let mean = MetricBlock {
        avg_predicted_rank_before: mean_of(|m| m.avg_predicted_rank_before),
        avg_predicted_rank_after: mean_of(|m| m.avg_predicted_rank_after),
        rank_ratio_before: mean_of(|m| m.rank_ratio_before),
        rank_ratio_after: mean_of(|m| m.rank_ratio_after),
        appear_at_k_before: mean_of(|m| m.appear_at_k_before),
        appear_at_k_after: mean_of(|m| m.appear_at_k_after),
        promotion_success_rate: mean_of(|m| m.promotion_success_rate),
        semantic_similarity: mean_of(|m| m.semantic_similarity),
        perplexity: mean_of(|m| m.perplexity),
        rmse_overall_before: mean_of(|m| m.rmse_overall_before),
        rmse_overall_after: mean_of(|m| m.rmse_overall_after),
        t_statistic: mean_of(|m| m.t_statistic),
        p_value: mean_of(|m| m.p_value),
        degenerate_t: per_seed.iter().any(|m| m.degenerate_t),
    };

    let report = EvalReport {
        k,
        num_users,
        num_candidates,
        num_targets,
        seeds: inputs.iter().map(|i| i.seed).collect(),
        per_seed,
        mean,
    };
    validate_report(&report)?;
    Ok(report)
}

/// Declared range invariants, checked over every block.
pub fn validate_report(report: &EvalReport) -> Result<()> {
    let appear_cap = report.num_targets.min(report.k) as f64 / report.k as f64;
    for (idx, m) in report
        .per_seed
        .iter()
        .chain(std::iter::once(&report.mean))
        .enumerate()
    {
        let ctx = |field: &str| format!("block {idx}: {field} out of range");
        for (ratio, name) in [
            (m.rank_ratio_before, "rank_ratio_before"),
            (m.rank_ratio_after, "rank_ratio_after"),
        ] {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Range(ctx(name)));
            }
        }
        for (a, name) in [
            (m.appear_at_k_before, "appear_at_k_before"),
            (m.appear_at_k_after, "appear_at_k_after"),
        ] {
            if !(0.0..=appear_cap + 1e-12).contains(&a) {
                return Err(Error::Range(ctx(name)));
            }
        }
        if !(0.0..=1.0).contains(&m.promotion_success_rate) {
            return Err(Error::Range(ctx("promotion_success_rate")));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&m.semantic_similarity) {
            return Err(Error::Range(ctx("semantic_similarity")));
        }
    }
    Ok(())
}

// ============================================================================
// Export
// ============================================================================

/// Deterministic pretty JSON (fixed field order, trailing newline).
pub fn write_report_json<P: AsRef<Path>>(report: &EvalReport, path: P) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One plotting row per (seed, target).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TargetCsvRow {
    pub seed: u64,
    pub item_id: ItemId,
    pub rank_before: f64,
    pub rank_after: f64,
}

pub fn write_target_csv<P: AsRef<Path>>(rows: &[TargetCsvRow], path: P) -> Result<()> {
    let mut out = String::from("seed,item_id,rank_before,rank_after\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.seed, r.item_id, r.rank_before, r.rank_after
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Score-matrix scorer for metric tests; ignores text embeddings.
    struct MockScorer {
        scores: Vec<Vec<f64>>,
    }

    impl Scorer for MockScorer {
        fn num_users(&self) -> usize {
            self.scores.len()
        }
        fn num_items(&self) -> usize {
            self.scores[0].len()
        }
        fn is_frozen(&self) -> bool {
            true
        }
        fn score(&self, u: UserId, i: ItemId, _e: &[f64]) -> Result<f64> {
            Ok(self.scores[u][i])
        }
        fn text_grad(&self, _u: UserId) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    fn table_for(m: &MockScorer) -> ItemEmbeddings {
        ItemEmbeddings::zeros(1, m.num_items())
    }

    #[test]
    fn avg_rank_hand_cases_and_bounds() {
        // User 0 ranks item 2 third; user 1 ranks it fifth → mean 4.
        let m = MockScorer {
            scores: vec![
                vec![9.0, 8.0, 7.0, 1.0, 2.0],
                vec![9.0, 8.0, 3.0, 7.0, 6.0],
            ],
        };
        let t = table_for(&m);
        let avg = avg_predicted_rank(&m, &[2], &[0, 1], &t).unwrap();
        assert_eq!(avg, 4.0);

        // Single target always first.
        let m1 = MockScorer { scores: vec![vec![5.0, 1.0, 0.0]] };
        assert_eq!(avg_predicted_rank(&m1, &[0], &[0], &table_for(&m1)).unwrap(), 1.0);

        assert!(avg_predicted_rank(&m1, &[], &[0], &table_for(&m1)).is_err());
        assert!(avg_predicted_rank(&m1, &[0], &[], &table_for(&m1)).is_err());
    }

    #[test]
    fn appear_at_k_hand_case() {
        // K=2: user 0 has targets on both top slots, user 1 on one → 3/(2·2).
        let m = MockScorer {
            scores: vec![
                vec![9.0, 8.0, 1.0, 0.0],
                vec![9.0, 1.0, 8.0, 0.0],
            ],
        };
        let t = table_for(&m);
        let a = appear_at_k(&m, &[0, 1], &[0, 1], 2, &t).unwrap();
        assert_eq!(a, 0.75);
        // No target anywhere near the top.
        let a0 = appear_at_k(&m, &[3], &[0, 1], 2, &t).unwrap();
        assert_eq!(a0, 0.0);
        // Every top slot a target → 1.0.
        let a1 = appear_at_k(&m, &[0, 1, 2], &[0, 1], 2, &t).unwrap();
        assert_eq!(a1, 1.0);
    }

    #[test]
    fn appear_at_k_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..60 {
            let nu = rng.gen_range(1..6);
            let ni = rng.gen_range(2..12);
            let k = rng.gen_range(1..=ni);
            let scores: Vec<Vec<f64>> =
                (0..nu).map(|_| (0..ni).map(|_| rng.gen::<f64>()).collect()).collect();
            let num_targets = rng.gen_range(1..=ni);
            let mut targets: Vec<ItemId> = (0..ni).collect();
            for i in (1..targets.len()).rev() {
                targets.swap(i, rng.gen_range(0..=i));
            }
            targets.truncate(num_targets);

            // Oracle: full sort per user, count members.
            let mut hits = 0usize;
            for row in &scores {
                let mut order: Vec<usize> = (0..ni).collect();
                order.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
                });
                hits += order[..k].iter().filter(|i| targets.contains(i)).count();
            }
            let expect = hits as f64 / (k as f64 * nu as f64);

            let m = MockScorer { scores };
            let users: Vec<UserId> = (0..nu).collect();
            let got = appear_at_k(&m, &targets, &users, k, &table_for(&m)).unwrap();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn rank_is_anti_monotone_in_target_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let ni = rng.gen_range(2..10);
            let row: Vec<f64> = (0..ni).map(|_| rng.gen::<f64>()).collect();
            let i = rng.gen_range(0..ni);
            let m = MockScorer { scores: vec![row.clone()] };
            let before = rank_of(&m, 0, i, &table_for(&m)).unwrap();
            let mut boosted = row;
            boosted[i] += rng.gen::<f64>();
            let m2 = MockScorer { scores: vec![boosted] };
            let after = rank_of(&m2, 0, i, &table_for(&m2)).unwrap();
            assert!(after <= before, "raising a score must not worsen its rank");
        }
    }

    #[test]
    fn rank_ratio_cases() {
        assert_eq!(rank_ratio(500.0, 1000).unwrap(), 0.5);
        assert_eq!(rank_ratio(1.0, 1).unwrap(), 1.0);
        assert!(matches!(rank_ratio(0.5, 10), Err(Error::Range(_))));
        assert!(matches!(rank_ratio(11.0, 10), Err(Error::Range(_))));
        assert!(matches!(rank_ratio(1.0, 0), Err(Error::Range(_))));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn promotion_success_cases() {
        assert_eq!(
            promotion_success_rate(&[1.0, 2.0], &[2.0, 3.0]).unwrap(),
            1.0
        );
        assert_eq!(
            promotion_success_rate(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0,
            "ties are failures"
        );
        assert_eq!(
            promotion_success_rate(&[1.0, 1.0, 1.0, 1.0], &[2.0, 2.0, 2.0, 0.5]).unwrap(),
            0.75
        );
        assert!(matches!(
            promotion_success_rate(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn t_test_hand_example_null_and_degenerate() {
        let r = one_tailed_t_test(&[10.0, 20.0, 30.0], &[6.0, 18.0, 27.0]).unwrap();
        assert!((r.t - 3.0 * 3f64.sqrt()).abs() < 1e-9, "t = {}", r.t);
        // Closed-form one-tailed p for 2 degrees of freedom:
        // p = 1/2 − t / (2√(2+t²)).
        let p_exact = 0.5 - r.t / (2.0 * (2.0 + r.t * r.t).sqrt());
        assert!((r.p - p_exact).abs() < 1e-10);
        assert!((r.p - 0.018).abs() < 5e-4);
        assert!(!r.degenerate);

        let same = one_tailed_t_test(&[4.0, 5.0, 6.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(same.t, 0.0);
        assert_eq!(same.p, 0.5);
        assert!(!same.degenerate);

        let shift = one_tailed_t_test(&[5.0, 6.0], &[4.0, 5.0]).unwrap();
        assert!(shift.degenerate);
        assert_eq!(shift.p, 0.0);

        let neg = one_tailed_t_test(&[4.0, 5.0], &[5.0, 6.0]).unwrap();
        assert!(neg.degenerate);
        assert_eq!(neg.p, 1.0);

        assert!(one_tailed_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn t_cdf_agrees_with_closed_form_grid() {
        // df = 2 has the closed form F(t) = 1/2 + t / (2√(2+t²)); the
        // statistics library must match it everywhere we care about.
        let dist = StudentsT::new(0.0, 1.0, 2.0).unwrap();
        let mut t: f64 = -6.0;
        while t <= 6.0 {
            let exact = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!(
                (dist.cdf(t) - exact).abs() < 1e-10,
                "cdf({t}) = {} vs {exact}",
                dist.cdf(t)
            );
            t += 0.25;
        }
    }

    fn full_inputs(seed: u64) -> SeedInputs {
        SeedInputs {
            seed,
            ranks_before: Some(vec![30.0, 40.0, 50.0]),
            ranks_after: Some(vec![10.0, 20.0, 25.0]),
            scores_before: Some(vec![1.0, 1.5, 2.0]),
            scores_after: Some(vec![1.4, 1.9, 2.0]),
            appear_before: Some(0.01),
            appear_after: Some(0.05),
            semantic_similarity: Some(0.8),
            perplexity: Some(40.0),
            rmse_before: Some(0.92),
            rmse_after: Some(0.9205),
        }
    }

    #[test]
    fn report_mean_equals_identical_seeds_and_ranges_hold() {
        let inputs = vec![full_inputs(1), full_inputs(2), full_inputs(3)];
        let report = build_report(&inputs, 20, 100, 200, 5).unwrap();
        assert_eq!(report.seeds, vec![1, 2, 3]);
        // Identical seeds → the mean matches each block (up to summation ulps).
        let fields = |m: &MetricBlock| {
            [
                m.avg_predicted_rank_before,
                m.avg_predicted_rank_after,
                m.rank_ratio_before,
                m.rank_ratio_after,
                m.appear_at_k_before,
                m.appear_at_k_after,
                m.promotion_success_rate,
                m.semantic_similarity,
                m.perplexity,
                m.rmse_overall_before,
                m.rmse_overall_after,
                m.t_statistic,
                m.p_value,
            ]
        };
        for block in &report.per_seed {
            for (a, b) in fields(block).iter().zip(fields(&report.mean)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
            assert_eq!(block.degenerate_t, report.mean.degenerate_t);
        }
        assert_eq!(report.mean.avg_predicted_rank_before, 40.0);
        assert!((report.mean.promotion_success_rate - 2.0 / 3.0).abs() < 1e-12);
        validate_report(&report).unwrap();

        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_lists_every_missing_artifact() {
        let mut a = full_inputs(1);
        a.perplexity = None;
        let mut b = full_inputs(2);
        b.appear_after = None;
        b.rmse_before = None;
        match build_report(&[a, b], 20, 100, 200, 5) {
            Err(Error::Artifact(msg)) => {
                assert!(msg.contains("seed 1: perplexity"));
                assert!(msg.contains("seed 2: appear_after"));
                assert!(msg.contains("seed 2: rmse_before"));
            }
            other => panic!("expected artifact error, got {other:?}"),
        }
    }

    #[test]
    fn exports_are_deterministic() {
        let report = build_report(&[full_inputs(1)], 20, 100, 200, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("r1.json");
        let p2 = dir.path().join("r2.json");
        write_report_json(&report, &p1).unwrap();
        write_report_json(&report, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let rows = vec![
            TargetCsvRow { seed: 1, item_id: 4, rank_before: 30.0, rank_after: 10.0 },
            TargetCsvRow { seed: 1, item_id: 9, rank_before: 50.0, rank_after: 25.0 },
        ];
        let cp = dir.path().join("targets.csv");
        write_target_csv(&rows, &cp).unwrap();
        let text = fs::read_to_string(&cp).unwrap();
        assert_eq!(text, "seed,item_id,rank_before,rank_after\n1,4,30,10\n1,9,50,25\n");
    }
}
