//! Config-driven experiment orchestration.
//!
//! One [`ExperimentConfig`] describes a whole experiment; [`run`] executes
//! the stage chain per seed — data → train recommender → (surrogate) →
//! attack → rewrite → evaluate — then assembles the cross-seed report.
//! Every stage persists its artifacts under the run directory and drops a
//! marker file when complete, so an interrupted run resumes at the failed
//! stage and a finished run is a no-op to re-execute. All randomness derives
//! from the per-run seeds, which makes rerun reports byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    held_out_perplexity, phase1_finetune, phase2_finetune, rewrite_targets, split_held_out,
    AttackConfig, Phase1Summary, Phase2Summary, RewriteResult, TargetSet,
};
use crate::blackbox::{
    gen_fake_profiles_adg, gen_fake_profiles_ric, save_profiles_jsonl, save_train_set_jsonl,
    surrogate_fidelity, train_sequential_surrogate, train_surrogate, FidelityProbe,
    FidelityReport, LocalBlackBox, QueryKind, RecFamily, SurrogateSummary,
};
use crate::corpus::{generate_synthetic, ingest_jsonl, split, Dataset, Interaction, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{
    appear_at_k, build_report, cosine_similarity, write_report_json, write_target_csv,
    EvalReport, SeedInputs, TargetCsvRow,
};
use crate::icl::{
    build_prompt, rewrite_via_generator, sample_examples, target_seed, ExemplarBiasedGenerator,
    FewShotPool, DEFAULT_SYSTEM_MESSAGE,
};
use crate::recommender::{
    load_rec_checkpoint, rank_of, save_rec_checkpoint, ConventionalRec, ItemEmbeddings,
    RecModel, Scorer, SequentialRec, TrainRecConfig, TrainSeqConfig,
};
use crate::textenc::{
    embed_text, load_checkpoint, save_checkpoint, DecodeConfig, DecodeStrategy, TinyLm,
    Vocabulary,
};
use crate::{ItemId, UserId};

// Seed salts: one independent stream per random decision.
const SALT_SPLIT: u64 = 0x51e0_17;
const SALT_TARGETS: u64 = 0x7a26_e701;
const SALT_PROBES: u64 = 0xb1ac_b0c5;
const SALT_SURROGATE: u64 = 0x5a6b_1109;
const SALT_ICL: u64 = 0x1c1_f00d;
const SALT_POOL_USERS: u64 = 0x9001_aa;

// ============================================================================
// Configuration
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    /// Two-phase fine-tuning with gradient access to the deployed model.
    #[serde(rename = "2ft-white")]
    TwoFtWhite,
    /// Two-phase fine-tuning against a query-distilled surrogate.
    #[serde(rename = "2ft-black")]
    TwoFtBlack,
    /// Few-shot prompting of a frozen generator.
    #[serde(rename = "icl")]
    Icl,
    /// Baseline: no rewriting, original-description metrics only.
    #[serde(rename = "none")]
    None,
}

impl AttackMode {
    pub fn uses_surrogate(self) -> bool {
        self == AttackMode::TwoFtBlack
    }
    pub fn is_two_ft(self) -> bool {
        matches!(self, AttackMode::TwoFtWhite | AttackMode::TwoFtBlack)
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttackMode> {
        match s {
            "2ft-white" => Ok(AttackMode::TwoFtWhite),
            "2ft-black" => Ok(AttackMode::TwoFtBlack),
            "icl" => Ok(AttackMode::Icl),
            "none" => Ok(AttackMode::None),
            other => Err(Error::Config(format!(
                "unknown attack mode {other:?}; expected 2ft-white, 2ft-black, icl, or none"
            ))),
        }
    }
}

/// Which fine-tuning phases the attack runs (ablation arms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "phase1-only")]
    Phase1Only,
    #[serde(rename = "phase2-only")]
    Phase2Only,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Synthetic corpus knobs. Exactly one of `synthetic` / `jsonl` must be
    /// set. The generator seed is overridden by the run seed.
    pub synthetic: Option<SynthConfig>,
    /// Ratings JSONL path (`{"user", "item", "rating", "ts", "description"}`).
    pub jsonl: Option<PathBuf>,
    pub min_user_interactions: usize,
    pub min_desc_words: usize,
    pub split: (f64, f64, f64),
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            synthetic: Some(SynthConfig::default()),
            jsonl: None,
            min_user_interactions: 5,
            min_desc_words: 5,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub dim: usize,
    pub hidden: usize,
    pub context: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection { dim: 16, hidden: 32, context: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommenderSection {
    pub family: RecFamily,
    pub factors: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub patience: usize,
    /// Rating-family only: leading epochs with item memorizers held at zero
    /// so rating structure routes through the text projection first.
    pub warmup_epochs: usize,
    /// Sequential-only: history window and text blend weight.
    pub window: usize,
    pub alpha: f64,
}

impl Default for RecommenderSection {
    fn default() -> Self {
        let t = TrainRecConfig::default();
        RecommenderSection {
            family: RecFamily::Conventional,
            factors: 16,
            lr: 0.05,
            epochs: 40,
            batch_size: 64,
            weight_decay: 1e-4,
            patience: 3,
            warmup_epochs: t.warmup_epochs,
            window: 10,
            alpha: 0.5,
        }
    }
}

impl RecommenderSection {
    fn rating_config(&self, seed: u64) -> TrainRecConfig {
        TrainRecConfig {
            factors: self.factors,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            patience: self.patience,
            warmup_epochs: self.warmup_epochs,
            seed,
        }
    }

    fn sequential_config(&self, seed: u64) -> TrainSeqConfig {
        TrainSeqConfig {
            factors: self.factors,
            window: self.window,
            alpha: self.alpha,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub mode: AttackMode,
    pub ablation: Ablation,
    /// How many catalog items to promote.
    pub num_targets: usize,
    /// Targets are drawn from the bottom `target_tail_frac` of the catalog by
    /// training popularity. Promotion only makes economic sense for items that
    /// are not already surfacing; on a small dense catalog an unrestricted
    /// draw occasionally picks an item sitting at every user's top, which a
    /// rewrite can only hurt. 1.0 opens the pool to the whole catalog.
    pub target_tail_frac: f64,
    pub lambda: f64,
    pub margin: f64,
    pub user_sample_frac: f64,
    pub target_batch: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prompt_prefix_tokens: usize,
    pub max_rewrite_words: usize,
    /// Token budget for rewrite decoding.
    pub decode_max_tokens: usize,
    /// Sampling width for rewrite decoding; 0 selects greedy decoding.
    pub decode_top_k: usize,
    pub decode_temperature: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackSection {
            mode: AttackMode::TwoFtWhite,
            ablation: Ablation::Both,
            num_targets: 8,
            target_tail_frac: 0.5,
            lambda: a.lambda,
            margin: a.margin,
            user_sample_frac: a.user_sample_frac,
            target_batch: a.target_batch,
            phase1_epochs: a.phase1_epochs,
            phase2_epochs: a.phase2_epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            prompt_prefix_tokens: a.prompt_prefix_tokens,
            max_rewrite_words: a.max_rewrite_words,
            decode_max_tokens: 96,
            decode_top_k: 4,
            decode_temperature: 0.8,
        }
    }
}

impl AttackSection {
    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: self.decode_max_tokens,
            strategy: if self.decode_top_k == 0 {
                DecodeStrategy::Greedy
            } else {
                DecodeStrategy::TopK {
                    k: self.decode_top_k,
                    temperature: self.decode_temperature,
                }
            },
            seed,
        }
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            lambda: self.lambda,
            margin: self.margin,
            user_sample_frac: self.user_sample_frac,
            target_batch: self.target_batch,
            phase1_epochs: self.phase1_epochs,
            phase2_epochs: self.phase2_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            prompt_prefix_tokens: self.prompt_prefix_tokens,
            max_rewrite_words: self.max_rewrite_words,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackBoxSection {
    /// |Z|: fake-profile population.
    pub num_fake_users: usize,
    /// N: interactions (and score probes) per fake profile.
    pub interactions_per_fake: usize,
    /// K for the adaptive top-K walk (sequential black boxes).
    pub adg_top_k: usize,
    pub surrogate_factors: usize,
    pub surrogate_lr: f64,
    pub surrogate_epochs: usize,
}

impl Default for BlackBoxSection {
    fn default() -> Self {
        BlackBoxSection {
            num_fake_users: 200,
            interactions_per_fake: 20,
            adg_top_k: 10,
            surrogate_factors: 16,
            surrogate_lr: 0.05,
            surrogate_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IclSection {
    /// Examples per prompt; 0 is the zero-shot baseline.
    pub k: usize,
    /// Exemplar logit-bias strength β.
    pub beta: f64,
    pub prefix_tokens: usize,
    /// Stored verbatim; see the prompt-construction module for the default.
    pub system_message: String,
    /// Load the example pool from a previous run's rewrites.jsonl instead of
    /// harvesting one in-run.
    pub pool_path: Option<PathBuf>,
}

impl Default for IclSection {
    fn default() -> Self {
        IclSection {
            k: 5,
            beta: 4.0,
            prefix_tokens: 4,
            system_message: DEFAULT_SYSTEM_MESSAGE.to_string(),
            pool_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Exposure cutoff K.
    pub k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub lm: LmSection,
    pub recommender: RecommenderSection,
    pub attack: AttackSection,
    pub blackbox: BlackBoxSection,
    pub icl: IclSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/experiment"),
            seeds: vec![1, 2, 3],
            dataset: DatasetSection::default(),
            lm: LmSection::default(),
            recommender: RecommenderSection::default(),
            attack: AttackSection::default(),
            blackbox: BlackBoxSection::default(),
            icl: IclSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        match (&self.dataset.synthetic, &self.dataset.jsonl) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset has both synthetic and jsonl sources; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config("dataset needs a synthetic or jsonl source".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval cutoff K must be ≥ 1".into()));
        }
        if self.attack.num_targets == 0 {
            return Err(Error::Config("need at least one target item".into()));
        }
        if !(self.attack.target_tail_frac > 0.0 && self.attack.target_tail_frac <= 1.0) {
            return Err(Error::Config("target_tail_frac must lie in (0, 1]".into()));
        }
        self.attack.attack_config(0).validate()?;
        Ok(())
    }
}

// ============================================================================
// Stages and artifacts
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    TrainRec,
    Surrogate,
    Attack,
    Rewrite,
    Evaluate,
}

impl Stage {
    fn marker_name(self) -> &'static str {
        match self {
            Stage::Data => ".done-data",
            Stage::TrainRec => ".done-train-rec",
            Stage::Surrogate => ".done-surrogate",
            Stage::Attack => ".done-attack",
            Stage::Rewrite => ".done-rewrite",
            Stage::Evaluate => ".done-evaluate",
        }
    }
}

/// Paths and helpers for one seed's artifact directory.
struct SeedCtx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
}

impl<'a> SeedCtx<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64) -> Result<SeedCtx<'a>> {
        let dir = cfg.output_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(dir.join("models"))?;
        fs::create_dir_all(dir.join("attack"))?;
        fs::create_dir_all(dir.join("blackbox"))?;
        fs::create_dir_all(dir.join("eval"))?;
        Ok(SeedCtx { cfg, seed, dir })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn done(&self, stage: Stage) -> bool {
        self.dir.join(stage.marker_name()).exists()
    }

    fn mark(&self, stage: Stage) -> Result<()> {
        fs::write(self.dir.join(stage.marker_name()), b"ok\n")?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(rel), text)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let path = self.path(rel);
        let bytes = fs::read(&path)
            .map_err(|_| Error::Artifact(format!("missing {}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecSummaryArtifact {
    family: RecFamily,
    param_hash: String,
    test_rmse: f64,
    epochs_run: usize,
    best_val_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AccessLogSummary {
    total_queries: usize,
    score_queries: usize,
    top_k_queries: usize,
    rank_queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StabilityArtifact {
    param_hash_before: String,
    param_hash_after: String,
    param_hash_unchanged: bool,
    rmse_before: f64,
    rmse_after: f64,
    rmse_relative_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TargetsArtifact {
    items: Vec<ItemId>,
}

/// Everything later stages need from the platform-training stage.
struct Platform {
    lm_initial: TinyLm,
    lm_adapted: TinyLm,
    rec: RecModel,
    summary: RecSummaryArtifact,
}

fn scorer_of(model: &RecModel) -> &dyn Scorer {
    match model {
        RecModel::Conventional(m) => m,
        RecModel::Sequential(m) => m,
    }
}

fn table_of(model: &RecModel) -> &ItemEmbeddings {
    match model {
        RecModel::Conventional(m) => &m.text_embs,
        RecModel::Sequential(m) => &m.text_embs,
    }
}

fn hash_of(model: &RecModel) -> String {
    match model {
        RecModel::Conventional(m) => m.param_hash(),
        RecModel::Sequential(m) => m.param_hash(),
    }
}

// ============================================================================
// Stage: data
// ============================================================================

fn stage_data(ctx: &SeedCtx) -> Result<Dataset> {
    let data_dir = ctx.path("data");
    if ctx.done(Stage::Data) {
        return Dataset::load_dir(&data_dir);
    }
    let d = &ctx.cfg.dataset;
    let raw = match (&d.synthetic, &d.jsonl) {
        (Some(synth), None) => {
            let mut s = synth.clone();
            s.seed = ctx.seed;
            generate_synthetic(&s)?
        }
        (None, Some(path)) => ingest_jsonl(path, d.min_user_interactions, d.min_desc_words)?,
        _ => return Err(Error::Config("dataset needs exactly one source".into())),
    };
    let ds = split(raw, d.split, ctx.seed ^ SALT_SPLIT)?;
    ds.save_dir(&data_dir)?;
    ctx.mark(Stage::Data)?;
    Ok(ds)
}

// ============================================================================
// Stage: train recommender (and the shared text encoder)
// ============================================================================

/// Per-user histories for one split, each sorted by timestamp.
fn histories_for(ds: &Dataset, indices: &[usize]) -> Vec<Vec<Interaction>> {
    let mut hist: Vec<Vec<Interaction>> = vec![Vec::new(); ds.num_users];
    for it in ds.interactions_in(indices) {
        hist[it.user_id].push(it);
    }
    for h in &mut hist {
        h.sort_by_key(|it| it.timestamp);
    }
    hist
}

/// Root-mean-square gap between predicted interaction probability and 1.0
/// over observed events: the implicit-feedback analog of rating RMSE.
fn implicit_rmse(rec: &SequentialRec, events: &[Interaction], table: &ItemEmbeddings) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Config("empty split for implicit RMSE".into()));
    }
    let mut se = 0.0;
    for it in events {
        let p = rec.probability(it.user_id, it.item_id, table.get(it.item_id)?)?;
        se += (1.0 - p) * (1.0 - p);
    }
    Ok((se / events.len() as f64).sqrt())
}

fn rmse_on(model: &RecModel, events: &[Interaction], table: &ItemEmbeddings) -> Result<f64> {
    match model {
        RecModel::Conventional(m) => m.rmse(events, table),
        RecModel::Sequential(m) => implicit_rmse(m, events, table),
    }
}

fn stage_train_rec(ctx: &SeedCtx, ds: &Dataset) -> Result<Platform> {
    if ctx.done(Stage::TrainRec) {
        return Ok(Platform {
            lm_initial: load_checkpoint(ctx.path("models/lm_initial.json"))?,
            lm_adapted: load_checkpoint(ctx.path("models/lm_adapted.json"))?,
            rec: load_rec_checkpoint(ctx.path("models/recommender.json"))?,
            summary: ctx.read_json("rec_summary.json")?,
        });
    }

    let descriptions: Vec<String> = ds.items.iter().map(|i| i.description.clone()).collect();
    let vocab = Vocabulary::build(descriptions.iter().map(|d| d.as_str()));
    let lm_cfg = &ctx.cfg.lm;
    let lm_initial = TinyLm::new(vocab, lm_cfg.dim, lm_cfg.hidden, lm_cfg.context, ctx.seed);
    save_checkpoint(&lm_initial, ctx.path("models/lm_initial.json"))?;

    // The catalog-adapted encoder: produced once per run and shared — it is
    // both the platform's embedding model and the attacker's starting LM.
    let mut lm_adapted = lm_initial.clone();
    let phase1: Phase1Summary = phase1_finetune(
        &mut lm_adapted,
        &descriptions,
        &ctx.cfg.attack.attack_config(ctx.seed),
    )?;
    save_checkpoint(&lm_adapted, ctx.path("models/lm_adapted.json"))?;
    ctx.write_json("models/phase1_summary.json", &phase1)?;

    let table = ItemEmbeddings::from_lm(&lm_adapted, &ds.items)?;
    let train = ds.interactions_in(&ds.splits.train);
    let val = ds.interactions_in(&ds.splits.val);
    let test = ds.interactions_in(&ds.splits.test);

    let (rec, epochs_run, best_val_metric) = match ctx.cfg.recommender.family {
        RecFamily::Conventional => {
            let mut m = ConventionalRec::init(
                ds.num_users,
                ds.num_items(),
                ctx.cfg.recommender.factors,
                table,
                ctx.seed,
            );
            let s = m.train(&train, &val, &ctx.cfg.recommender.rating_config(ctx.seed))?;
            (RecModel::Conventional(m), s.epochs_run, s.best_val_metric)
        }
        RecFamily::Sequential => {
            let cfg = ctx.cfg.recommender.sequential_config(ctx.seed);
            let mut m =
                SequentialRec::init(ds.num_users, ds.num_items(), &cfg, table, ctx.seed)?;
            let train_hist = histories_for(ds, &ds.splits.train);
            let val_hist = histories_for(ds, &ds.splits.val);
            let s = m.train(&train_hist, &val_hist, &cfg)?;
            (RecModel::Sequential(m), s.epochs_run, s.best_val_metric)
        }
    };

    let summary = RecSummaryArtifact {
        family: ctx.cfg.recommender.family,
        param_hash: hash_of(&rec),
        test_rmse: rmse_on(&rec, &test, table_of(&rec))?,
        epochs_run,
        best_val_metric,
    };
    save_rec_checkpoint(&rec, ctx.path("models/recommender.json"))?;
    ctx.write_json("rec_summary.json", &summary)?;
    ctx.mark(Stage::TrainRec)?;
    Ok(Platform { lm_initial, lm_adapted, rec, summary })
}

// ============================================================================
// Stage: surrogate (query-only modes)
// ============================================================================

fn stage_surrogate(ctx: &SeedCtx, ds: &Dataset, platform: &Platform) -> Result<Option<RecModel>> {
    if !ctx.cfg.attack.mode.uses_surrogate() {
        if !ctx.done(Stage::Surrogate) {
            ctx.mark(Stage::Surrogate)?;
        }
        return Ok(None);
    }
    if ctx.done(Stage::Surrogate) {
        return Ok(Some(load_rec_checkpoint(ctx.path("models/surrogate.json"))?));
    }

    let bbcfg = &ctx.cfg.blackbox;
    let mut bb = LocalBlackBox::new(platform.rec.clone(), ds.items.clone())?;
    // The attacker embeds the public catalog with the public adapted
    // encoder — numerically the same table the platform serves from.
    let attacker_table = ItemEmbeddings::from_lm(&platform.lm_adapted, &ds.items)?;

    let surrogate = match ctx.cfg.recommender.family {
        RecFamily::Conventional => {
            let set = gen_fake_profiles_ric(
                &mut bb,
                bbcfg.num_fake_users,
                bbcfg.interactions_per_fake,
                ctx.seed ^ SALT_PROBES,
            )?;
            save_profiles_jsonl(&set.profiles, ctx.path("blackbox/profiles.jsonl"))?;
            save_train_set_jsonl(&set, ctx.path("blackbox/surrogate_train.jsonl"))?;
            let mut s = ConventionalRec::init(
                bbcfg.num_fake_users,
                ds.num_items(),
                bbcfg.surrogate_factors,
                attacker_table,
                ctx.seed ^ SALT_SURROGATE,
            );
            let summary: SurrogateSummary = train_surrogate(
                &mut s,
                &set,
                &TrainRecConfig {
                    factors: bbcfg.surrogate_factors,
                    lr: bbcfg.surrogate_lr,
                    epochs: bbcfg.surrogate_epochs,
                    seed: ctx.seed ^ SALT_SURROGATE,
                    ..Default::default()
                },
            )?;
            ctx.write_json("blackbox/surrogate_summary.json", &summary)?;
            RecModel::Conventional(s)
        }
        RecFamily::Sequential => {
            let profiles = gen_fake_profiles_adg(
                &mut bb,
                bbcfg.num_fake_users,
                bbcfg.interactions_per_fake,
                bbcfg.adg_top_k,
                ctx.seed ^ SALT_PROBES,
            )?;
            save_profiles_jsonl(&profiles, ctx.path("blackbox/profiles.jsonl"))?;
            let s = train_sequential_surrogate(
                &profiles,
                ds.num_items(),
                attacker_table,
                &TrainSeqConfig {
                    factors: bbcfg.surrogate_factors,
                    window: ctx.cfg.recommender.window,
                    alpha: ctx.cfg.recommender.alpha,
                    lr: bbcfg.surrogate_lr,
                    epochs: bbcfg.surrogate_epochs,
                    seed: ctx.seed ^ SALT_SURROGATE,
                    ..Default::default()
                },
            )?;
            RecModel::Sequential(s)
        }
    };

    // Everything the attack learned about the platform went through the
    // query interface; persist the tally as evidence.
    let log_summary = AccessLogSummary {
        total_queries: bb.log.len(),
        score_queries: bb.log.iter().filter(|r| matches!(r.kind, QueryKind::Score)).count(),
        top_k_queries: bb
            .log
            .iter()
            .filter(|r| matches!(r.kind, QueryKind::TopK { .. }))
            .count(),
        rank_queries: bb.log.iter().filter(|r| matches!(r.kind, QueryKind::Rank)).count(),
    };
    ctx.write_json("blackbox/access_log.json", &log_summary)?;

    let fidelity = fidelity_report(ctx, ds, &platform.rec, &surrogate)?;
    ctx.write_json("blackbox/fidelity.json", &fidelity)?;

    save_rec_checkpoint(&surrogate, ctx.path("models/surrogate.json"))?;
    ctx.mark(Stage::Surrogate)?;
    Ok(Some(surrogate))
}

fn fidelity_report(
    ctx: &SeedCtx,
    ds: &Dataset,
    blackbox: &RecModel,
    surrogate: &RecModel,
) -> Result<FidelityReport> {
    match ctx.cfg.recommender.family {
        RecFamily::Conventional => {
            // Probe: held-out ratings, both models scoring through the same
            // fold-in path from the user's train profile.
            let profiles: Vec<Vec<ItemId>> = histories_for(ds, &ds.splits.train)
                .iter()
                .map(|h| h.iter().map(|it| it.item_id).collect())
                .collect();
            let probe: Vec<Interaction> = ds
                .interactions_in(&ds.splits.test)
                .into_iter()
                .filter(|it| !profiles[it.user_id].is_empty())
                .collect();
            surrogate_fidelity(
                blackbox,
                surrogate,
                &FidelityProbe::Ratings { interactions: &probe, user_profiles: &profiles },
            )
        }
        RecFamily::Sequential => {
            let histories: Vec<Vec<ItemId>> = histories_for(ds, &ds.splits.train)
                .iter()
                .filter(|h| !h.is_empty())
                .map(|h| h.iter().map(|it| it.item_id).collect())
                .collect();
            // Probe items: a seeded tenth of the catalog.
            let mut ids: Vec<ItemId> = (0..ds.num_items()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ SALT_PROBES);
            ids.shuffle(&mut rng);
            ids.truncate((ds.num_items() / 10).max(10).min(ds.num_items()));
            ids.sort_unstable();
            let k = 50.min(ds.num_items());
            surrogate_fidelity(
                blackbox,
                surrogate,
                &FidelityProbe::Ranking { histories: &histories, probe_items: &ids, k },
            )
        }
    }
}

// ============================================================================
// Stage: attack (LM fine-tuning or pool harvesting)
// ============================================================================

fn sample_targets(ds: &Dataset, count: usize, tail_frac: f64, seed: u64) -> Result<TargetSet> {
    let num_items = ds.num_items();
    let mut popularity = vec![0usize; num_items];
    for it in ds.interactions_in(&ds.splits.train) {
        popularity[it.item_id] += 1;
    }
    let mut pool: Vec<ItemId> = (0..num_items).collect();
    pool.sort_by_key(|&i| (popularity[i], i));
    let pool_len = ((num_items as f64 * tail_frac).ceil() as usize).clamp(1, num_items);
    pool.truncate(pool_len);
    if count > pool.len() {
        return Err(Error::Config(format!(
            "cannot target {count} items from a pool of {} (catalog {num_items}, tail fraction {tail_frac})",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_TARGETS);
    pool.shuffle(&mut rng);
    pool.truncate(count);
    TargetSet::new(pool, num_items)
}

struct AttackArtifacts {
    lm_attack: TinyLm,
    targets: TargetSet,
    pool: Option<Vec<RewriteResult>>,
}

fn load_rewrites_jsonl(path: &Path) -> Result<Vec<RewriteResult>> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::Artifact(format!("missing {}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RewriteResult = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Artifact(format!("{} holds no rewrites", path.display())));
    }
    Ok(out)
}

fn save_rewrites_jsonl(path: &Path, results: &[RewriteResult]) -> Result<()> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn stage_attack(
    ctx: &SeedCtx,
    ds: &Dataset,
    platform: &Platform,
    surrogate: Option<&RecModel>,
) -> Result<AttackArtifacts> {
    if ctx.done(Stage::Attack) {
        let t: TargetsArtifact = ctx.read_json("attack/targets.json")?;
        let pool_path = ctx.path("attack/pool.json");
        let pool = if pool_path.exists() {
            Some(serde_json::from_slice(&fs::read(pool_path)?)?)
        } else {
            None
        };
        return Ok(AttackArtifacts {
            lm_attack: load_checkpoint(ctx.path("models/lm_attack.json"))?,
            targets: TargetSet::new(t.items, ds.num_items())?,
            pool,
        });
    }

    let targets = sample_targets(
        ds,
        ctx.cfg.attack.num_targets,
        ctx.cfg.attack.target_tail_frac,
        ctx.seed,
    )?;
    ctx.write_json("attack/targets.json", &TargetsArtifact { items: targets.ids().to_vec() })?;
    let acfg = ctx.cfg.attack.attack_config(ctx.seed);

    let mut pool = None;
    let lm_attack = match ctx.cfg.attack.mode {
        AttackMode::None => platform.lm_adapted.clone(),
        AttackMode::TwoFtWhite | AttackMode::TwoFtBlack => {
            let mut lm = match ctx.cfg.attack.ablation {
                // Skipping phase 1 means starting from the raw LM.
                Ablation::Phase2Only => platform.lm_initial.clone(),
                _ => platform.lm_adapted.clone(),
            };
            if ctx.cfg.attack.ablation != Ablation::Phase1Only {
                let (scorer, base_table): (&dyn Scorer, &ItemEmbeddings) =
                    match ctx.cfg.attack.mode {
                        AttackMode::TwoFtWhite => (scorer_of(&platform.rec), table_of(&platform.rec)),
                        AttackMode::TwoFtBlack => {
                            let s = surrogate.ok_or_else(|| {
                                Error::Artifact("query-only attack needs a surrogate".into())
                            })?;
                            (scorer_of(s), table_of(s))
                        }
                        _ => unreachable!(),
                    };
                let summary =
                    phase2_finetune(&mut lm, &scorer, &ds.items, base_table, &targets, &acfg)?;
                write_phase2_csv(&ctx.path("attack/phase2_stats.csv"), &summary)?;
            }
            lm
        }
        AttackMode::Icl => {
            // The pool comes from a completed fine-tuning attack: either a
            // prior run's rewrites or a one-off harvest against this
            // platform.
            let results = match &ctx.cfg.icl.pool_path {
                Some(path) => load_rewrites_jsonl(path)?,
                None => {
                    let mut lm_pool = platform.lm_adapted.clone();
                    phase2_finetune(
                        &mut lm_pool,
                        &scorer_of(&platform.rec),
                        &ds.items,
                        table_of(&platform.rec),
                        &targets,
                        &acfg,
                    )?;
                    let mut users: Vec<UserId> = (0..ds.num_users).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ SALT_POOL_USERS);
                    users.shuffle(&mut rng);
                    users.truncate(50.min(ds.num_users).max(1));
                    users.sort_unstable();
                    let outcome = rewrite_targets(
                        &lm_pool,
                        &scorer_of(&platform.rec),
                        &ds.items,
                        table_of(&platform.rec),
                        &targets,
                        &users,
                        &ctx.cfg.attack.decode_config(ctx.seed),
                        &acfg,
                    )?;
                    outcome.results
                }
            };
            ctx.write_json("attack/pool.json", &results)?;
            pool = Some(results);
            platform.lm_adapted.clone()
        }
    };

    save_checkpoint(&lm_attack, ctx.path("models/lm_attack.json"))?;
    ctx.mark(Stage::Attack)?;
    Ok(AttackArtifacts { lm_attack, targets, pool })
}

fn write_phase2_csv(path: &Path, summary: &Phase2Summary) -> Result<()> {
    let mut out =
        String::from("epoch,mean_text_loss,mean_promotion_loss,val_promotion_loss\n");
    for e in &summary.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.mean_text_loss, e.mean_promotion_loss, e.val_promotion_loss
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// ============================================================================
// Stage: rewrite
// ============================================================================

/// Before/after measurement for externally produced rewrites (identity
/// baseline and prompt-attack texts): before on the platform table, after
/// with every target row re-embedded from its rewritten text.
fn measure_text_rewrites(
    lm_embed: &TinyLm,
    rec: &RecModel,
    targets: &TargetSet,
    texts: &[(ItemId, String, String)],
    users: &[UserId],
) -> Result<Vec<RewriteResult>> {
    let base = table_of(rec);
    let mut updated = base.clone();
    for (item, _orig, rewritten) in texts {
        let toks = lm_embed.vocab.tokenize(rewritten);
        updated.set(*item, embed_text(lm_embed, &toks)?)?;
    }
    let scorer = scorer_of(rec);
    let mut results = Vec::with_capacity(texts.len());
    for (item, orig, rewritten) in texts {
        let mut score_before = Vec::with_capacity(users.len());
        let mut score_after = Vec::with_capacity(users.len());
        let mut rank_before = 0.0;
        let mut rank_after = 0.0;
        for &u in users {
            score_before.push(scorer.score(u, *item, base.get(*item)?)?);
            score_after.push(scorer.score(u, *item, updated.get(*item)?)?);
            rank_before += rank_of(&scorer, u, *item, base)? as f64;
            rank_after += rank_of(&scorer, u, *item, &updated)? as f64;
        }
        results.push(RewriteResult {
            item_id: *item,
            original: orig.clone(),
            rewritten: rewritten.clone(),
            score_before,
            score_after,
            rank_before: rank_before / users.len() as f64,
            rank_after: rank_after / users.len() as f64,
        });
    }
    let _ = targets;
    Ok(results)
}

fn stage_rewrite(
    ctx: &SeedCtx,
    ds: &Dataset,
    platform: &Platform,
    attack: &AttackArtifacts,
) -> Result<Vec<RewriteResult>> {
    let out_path = ctx.path("rewrites.jsonl");
    if ctx.done(Stage::Rewrite) {
        return load_rewrites_jsonl(&out_path);
    }
    let users: Vec<UserId> = (0..ds.num_users).collect();
    let acfg = ctx.cfg.attack.attack_config(ctx.seed);

    let results = match ctx.cfg.attack.mode {
        AttackMode::None => {
            let texts: Vec<(ItemId, String, String)> = attack
                .targets
                .ids()
                .iter()
                .map(|&i| {
                    let d = ds.items[i].description.clone();
                    (i, d.clone(), d)
                })
                .collect();
            measure_text_rewrites(&platform.lm_adapted, &platform.rec, &attack.targets, &texts, &users)?
        }
        AttackMode::TwoFtWhite | AttackMode::TwoFtBlack => {
            let outcome = rewrite_targets(
                &attack.lm_attack,
                &scorer_of(&platform.rec),
                &ds.items,
                table_of(&platform.rec),
                &attack.targets,
                &users,
                &ctx.cfg.attack.decode_config(ctx.seed),
                &acfg,
            )?;
            outcome.results
        }
        AttackMode::Icl => {
            let pool_results = attack
                .pool
                .as_ref()
                .ok_or_else(|| Error::Artifact("prompt attack has no example pool".into()))?;
            let pool = FewShotPool::from_rewrites(pool_results)?;
            let generator = ExemplarBiasedGenerator {
                lm: &attack.lm_attack,
                beta: ctx.cfg.icl.beta,
                prefix_tokens: ctx.cfg.icl.prefix_tokens,
            };
            let decode = ctx.cfg.attack.decode_config(ctx.seed);
            let prompts_dir = ctx.path("attack/prompts");
            fs::create_dir_all(&prompts_dir)?;
            let mut texts = Vec::new();
            for &item in attack.targets.ids() {
                let k = ctx.cfg.icl.k.min(pool.len());
                let examples =
                    sample_examples(&pool, k, target_seed(ctx.seed ^ SALT_ICL, item))?;
                let prompt = build_prompt(
                    &ctx.cfg.icl.system_message,
                    &examples,
                    &ds.items[item].description,
                )?
                .render();
                fs::write(prompts_dir.join(format!("item-{item}.txt")), &prompt)?;
                let rewritten = rewrite_via_generator(&generator, &prompt, &decode)?;
                texts.push((item, ds.items[item].description.clone(), rewritten));
            }
            measure_text_rewrites(&platform.lm_adapted, &platform.rec, &attack.targets, &texts, &users)?
        }
    };

    save_rewrites_jsonl(&out_path, &results)?;
    ctx.mark(Stage::Rewrite)?;
    Ok(results)
}

// ============================================================================
// Stage: evaluate
// ============================================================================

fn stage_evaluate(
    ctx: &SeedCtx,
    ds: &Dataset,
    platform: &Platform,
    attack: &AttackArtifacts,
    rewrites: &[RewriteResult],
) -> Result<SeedInputs> {
    if ctx.done(Stage::Evaluate) {
        return ctx.read_json("eval/seed_inputs.json");
    }

    let rec = &platform.rec;
    let scorer = scorer_of(rec);
    let base = table_of(rec);
    // Deployment view after the attack: the platform re-embeds the published
    // text with ITS OWN encoder. The attacker's tuned embedding table never
    // reaches the platform — only the tokens do.
    let mut updated = base.clone();
    for r in rewrites {
        let toks = platform.lm_adapted.vocab.tokenize(&r.rewritten);
        updated.set(r.item_id, embed_text(&platform.lm_adapted, &toks)?)?;
    }

    let users: Vec<UserId> = (0..ds.num_users).collect();
    let targets = attack.targets.ids();

    let mut ranks_before = Vec::with_capacity(users.len() * targets.len());
    let mut ranks_after = Vec::with_capacity(users.len() * targets.len());
    let mut scores_before = Vec::with_capacity(users.len() * targets.len());
    let mut scores_after = Vec::with_capacity(users.len() * targets.len());
    for &u in &users {
        for &t in targets {
            ranks_before.push(rank_of(&scorer, u, t, base)? as f64);
            ranks_after.push(rank_of(&scorer, u, t, &updated)? as f64);
            scores_before.push(scorer.score(u, t, base.get(t)?)?);
            scores_after.push(scorer.score(u, t, updated.get(t)?)?);
        }
    }

    let appear_before = appear_at_k(&scorer, targets, &users, ctx.cfg.eval.k, base)?;
    let appear_after = appear_at_k(&scorer, targets, &users, ctx.cfg.eval.k, &updated)?;

    // Semantic drift, measured with the fixed public encoder so the metric
    // is comparable across attack arms.
    let embedder = &platform.lm_adapted;
    let mut sim_sum = 0.0;
    for r in rewrites {
        let eo = embed_text(embedder, &embedder.vocab.tokenize(&r.original))?;
        let er = embed_text(embedder, &embedder.vocab.tokenize(&r.rewritten))?;
        sim_sum += cosine_similarity(&eo, &er)?;
    }
    let semantic_similarity = sim_sum / rewrites.len() as f64;

    let descriptions: Vec<String> = ds.items.iter().map(|i| i.description.clone()).collect();
    let (_, held) = split_held_out(&descriptions);
    let perplexity = held_out_perplexity(&attack.lm_attack, &held)?;

    let test = ds.interactions_in(&ds.splits.test);
    let rmse_before = rmse_on(rec, &test, base)?;
    let rmse_after = rmse_on(rec, &test, &updated)?;

    let hash_after = hash_of(rec);
    let stability = StabilityArtifact {
        param_hash_before: platform.summary.param_hash.clone(),
        param_hash_unchanged: hash_after == platform.summary.param_hash,
        param_hash_after: hash_after,
        rmse_before,
        rmse_after,
        rmse_relative_change: if rmse_before == 0.0 {
            (rmse_after - rmse_before).abs()
        } else {
            (rmse_after - rmse_before).abs() / rmse_before
        },
    };
    ctx.write_json("eval/stability.json", &stability)?;

    let inputs = SeedInputs {
        seed: ctx.seed,
        ranks_before: Some(ranks_before),
        ranks_after: Some(ranks_after),
        scores_before: Some(scores_before),
        scores_after: Some(scores_after),
        appear_before: Some(appear_before),
        appear_after: Some(appear_after),
        semantic_similarity: Some(semantic_similarity),
        perplexity: Some(perplexity),
        rmse_before: Some(rmse_before),
        rmse_after: Some(rmse_after),
    };
    ctx.write_json("eval/seed_inputs.json", &inputs)?;
    ctx.mark(Stage::Evaluate)?;
    Ok(inputs)
}

// ============================================================================
// Run drivers
// ============================================================================

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: EvalReport,
}

const SNAPSHOT_NAME: &str = "config_snapshot.toml";

fn ensure_snapshot(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let snap = cfg.output_dir.join(SNAPSHOT_NAME);
    let current = cfg.to_toml_string()?;
    if snap.exists() {
        let existing = fs::read_to_string(&snap)?;
        if existing != current {
            return Err(Error::Config(format!(
                "output dir {} holds artifacts from a different config; \
                 use a fresh directory or restore the old config",
                cfg.output_dir.display()
            )));
        }
    } else {
        fs::write(&snap, current)?;
    }
    Ok(())
}

/// Execute one seed's stages up to and including `through`.
fn run_seed(cfg: &ExperimentConfig, seed: u64, through: Stage) -> Result<Option<SeedInputs>> {
    let ctx = SeedCtx::new(cfg, seed)?;
    let ds = stage_data(&ctx)?;
    if through == Stage::Data {
        return Ok(None);
    }
    let platform = stage_train_rec(&ctx, &ds)?;
    if through == Stage::TrainRec {
        return Ok(None);
    }
    let surrogate = stage_surrogate(&ctx, &ds, &platform)?;
    if through == Stage::Surrogate {
        return Ok(None);
    }
    let attack = stage_attack(&ctx, &ds, &platform, surrogate.as_ref())?;
    if through == Stage::Attack {
        return Ok(None);
    }
    let rewrites = stage_rewrite(&ctx, &ds, &platform, &attack)?;
    if through == Stage::Rewrite {
        return Ok(None);
    }
    let inputs = stage_evaluate(&ctx, &ds, &platform, &attack, &rewrites)?;
    Ok(Some(inputs))
}

/// Run every seed through the given stage. Completed stages are skipped via
/// their markers, so this both resumes failed runs and extends partial ones.
pub fn run_until(cfg: &ExperimentConfig, through: Stage) -> Result<()> {
    cfg.validate()?;
    ensure_snapshot(cfg)?;
    for &seed in &cfg.seeds {
        run_seed(cfg, seed, through)?;
    }
    Ok(())
}

/// Full pipeline: all stages for every seed, then the cross-seed report.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    ensure_snapshot(cfg)?;

    let mut inputs = Vec::with_capacity(cfg.seeds.len());
    let mut csv_rows: Vec<TargetCsvRow> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for &seed in &cfg.seeds {
        let seed_inputs = run_seed(cfg, seed, Stage::Evaluate)?
            .expect("evaluate stage returns inputs");
        inputs.push(seed_inputs);
        let ctx = SeedCtx::new(cfg, seed)?;
        let ds = stage_data(&ctx)?;
        dims.get_or_insert((ds.num_users, ds.num_items()));
        for r in load_rewrites_jsonl(&ctx.path("rewrites.jsonl"))? {
            csv_rows.push(TargetCsvRow {
                seed,
                item_id: r.item_id,
                rank_before: r.rank_before,
                rank_after: r.rank_after,
            });
        }
    }
    let (num_users, num_candidates) = dims.expect("at least one seed");

    let report = build_report(
        &inputs,
        cfg.eval.k,
        num_users,
        num_candidates,
        cfg.attack.num_targets,
    )?;
    write_report_json(&report, cfg.output_dir.join("report.json"))?;
    write_target_csv(&csv_rows, cfg.output_dir.join("targets.csv"))?;
    Ok(RunOutcome { run_dir: cfg.output_dir.clone(), report })
}

/// Convenience for tests and the report subcommand: load an existing report.
pub fn load_report(run_dir: &Path) -> Result<EvalReport> {
    let path = run_dir.join("report.json");
    let bytes =
        fs::read(&path).map_err(|_| Error::Artifact(format!("missing {}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config(dir: &Path, mode: AttackMode) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            seeds: vec![11],
            dataset: DatasetSection {
                synthetic: Some(SynthConfig {
                    num_users: 40,
                    num_items: 30,
                    interactions_per_user: 14,
                    vocab_size: 120,
                    num_quality_phrases: 5,
                    phrase_effect_scale: 0.3,
                    noise_std: 0.3,
                    seed: 0,
                }),
                ..Default::default()
            },
            lm: LmSection { dim: 10, hidden: 16, context: 4 },
            recommender: RecommenderSection {
                epochs: 12,
                ..Default::default()
            },
            attack: AttackSection {
                mode,
                num_targets: 3,
                lambda: 25.0,
                lr: 0.1,
                phase1_epochs: 3,
                phase2_epochs: 3,
                ..Default::default()
            },
            blackbox: BlackBoxSection {
                num_fake_users: 30,
                interactions_per_fake: 8,
                surrogate_epochs: 12,
                ..Default::default()
            },
            icl: IclSection { k: 2, ..Default::default() },
            eval: EvalSection { k: 10 },
        }
    }

    #[test]
    fn config_validation_catches_source_and_seed_mistakes() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();

        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.seeds = vec![1];

        cfg.dataset.jsonl = Some(PathBuf::from("x.jsonl"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.dataset.synthetic = None;
        cfg.validate().unwrap();
        cfg.dataset.jsonl = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_roundtrip_keeps_mode_spellings() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("mode = \"2ft-white\""));
        assert!(text.contains("ablation = \"both\""));
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.attack.mode, AttackMode::TwoFtWhite);
        assert_eq!(back.seeds, cfg.seeds);

        let minimal = "
            output_dir = 'runs/min'
            seeds = [5]
            [attack]
            mode = '2ft-black'
            [dataset.synthetic]
            num_users = 12
            num_items = 9
            interactions_per_user = 6
        ";
        let cfg = ExperimentConfig::from_toml_str(minimal).unwrap();
        assert_eq!(cfg.attack.mode, AttackMode::TwoFtBlack);
        assert_eq!(cfg.dataset.synthetic.as_ref().unwrap().num_users, 12);
        // Unspecified knobs fall back to defaults.
        assert_eq!(cfg.eval.k, 20);
        assert_eq!(cfg.icl.k, 5);
    }

    #[test]
    fn baseline_mode_reports_identical_before_and_after() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path(), AttackMode::None);
        let outcome = run(&cfg).unwrap();
        let m = &outcome.report.mean;
        assert_eq!(m.avg_predicted_rank_before, m.avg_predicted_rank_after);
        assert_eq!(m.appear_at_k_before, m.appear_at_k_after);
        assert_eq!(m.promotion_success_rate, 0.0);
        assert!((m.semantic_similarity - 1.0).abs() < 1e-12);
        assert_eq!(m.rmse_overall_before, m.rmse_overall_after);
        assert_eq!(m.p_value, 0.5, "no shift → symmetric null");
    }

    #[test]
    fn white_box_run_produces_artifacts_and_resumes_without_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path(), AttackMode::TwoFtWhite);
        let outcome = run(&cfg).unwrap();

        let seed_dir = dir.path().join("seed-11");
        for artifact in [
            "data/items.jsonl",
            "models/lm_initial.json",
            "models/lm_adapted.json",
            "models/lm_attack.json",
            "models/recommender.json",
            "models/phase1_summary.json",
            "rec_summary.json",
            "attack/targets.json",
            "attack/phase2_stats.csv",
            "rewrites.jsonl",
            "eval/seed_inputs.json",
            "eval/stability.json",
        ] {
            assert!(seed_dir.join(artifact).exists(), "missing {artifact}");
        }
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("targets.csv").exists());
        assert!(dir.path().join(SNAPSHOT_NAME).exists());

        // Rerun over the same directory: markers short-circuit every stage
        // and the report bytes stay identical.
        let before = fs::read(dir.path().join("report.json")).unwrap();
        let outcome2 = run(&cfg).unwrap();
        let after = fs::read(dir.path().join("report.json")).unwrap();
        assert_eq!(before, after);
        assert_eq!(outcome.report, outcome2.report);

        // The attack must not have touched the platform model.
        let stability: StabilityArtifact =
            serde_json::from_slice(&fs::read(seed_dir.join("eval/stability.json")).unwrap())
                .unwrap();
        assert!(stability.param_hash_unchanged);
    }

    #[test]
    fn reruns_into_fresh_directories_are_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut c1 = desk_config(d1.path(), AttackMode::TwoFtWhite);
        let mut c2 = desk_config(d2.path(), AttackMode::TwoFtWhite);
        c1.attack.phase2_epochs = 2;
        c2.attack.phase2_epochs = 2;
        run(&c1).unwrap();
        run(&c2).unwrap();
        let r1 = fs::read(d1.path().join("report.json")).unwrap();
        let r2 = fs::read(d2.path().join("report.json")).unwrap();
        assert_eq!(r1, r2);
        let t1 = fs::read(d1.path().join("targets.csv")).unwrap();
        let t2 = fs::read(d2.path().join("targets.csv")).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn config_mismatch_in_output_dir_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path(), AttackMode::None);
        run_until(&cfg, Stage::Data).unwrap();
        let mut changed = cfg.clone();
        changed.attack.lambda += 1.0;
        assert!(matches!(run(&changed), Err(Error::Config(_))));
    }

    #[test]
    fn black_box_run_logs_queries_and_never_skips_the_surrogate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path(), AttackMode::TwoFtBlack);
        run(&cfg).unwrap();
        let seed_dir = dir.path().join("seed-11");
        assert!(seed_dir.join("models/surrogate.json").exists());
        assert!(seed_dir.join("blackbox/fidelity.json").exists());
        let log: AccessLogSummary = serde_json::from_slice(
            &fs::read(seed_dir.join("blackbox/access_log.json")).unwrap(),
        )
        .unwrap();
        // RIC: |Z| profiles × N probes, all score queries.
        assert_eq!(log.total_queries, 30 * 8);
        assert_eq!(log.score_queries, log.total_queries);
    }

    #[test]
    fn icl_run_writes_prompts_and_pool() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path(), AttackMode::Icl);
        run(&cfg).unwrap();
        let seed_dir = dir.path().join("seed-11");
        assert!(seed_dir.join("attack/pool.json").exists());
        let targets: TargetsArtifact = serde_json::from_slice(
            &fs::read(seed_dir.join("attack/targets.json")).unwrap(),
        )
        .unwrap();
        for t in &targets.items {
            let p = seed_dir.join(format!("attack/prompts/item-{t}.txt"));
            let text = fs::read_to_string(&p).unwrap();
            assert!(text.contains("System: "));
            assert!(text.contains("Task: "));
        }
    }
}
