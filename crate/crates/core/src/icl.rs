//! Prompt-only rewriting: build a few-shot prompt from previously harvested
//! rewrite pairs and hand it to a pluggable text generator.
//!
//! This attack path never touches the recommender — everything here is
//! string construction plus a generator call. The prompt has a fixed section
//! order: a system message, k worked examples (original → rewritten), and a
//! task block that restates the rewriting instruction with two constraints
//! (follow the examples' style; stay relevant to the original) followed by
//! the target description. The section wording is a paraphrase of the
//! published figure, which is only available as an image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::RewriteResult;
use crate::error::{Error, Result};
use crate::recommender::MAX_DESC_WORDS;
use crate::textenc::{
    generate_with_bias, DecodeConfig, TextGenerator, TinyLm, NUM_RESERVED,
};
use crate::ItemId;

/// Default system message. Deliberately neutral: naming the manipulation
/// objective would get the prompt filtered, so the framing is ordinary
/// copywriting. Stored verbatim in experiment configs so it can be varied.
pub const DEFAULT_SYSTEM_MESSAGE: &str = "You are a product copywriter for an \
online catalog. You revise item descriptions so they read naturally and \
appeal to shoppers.";

pub const DEFAULT_TASK_INSTRUCTION: &str =
    "Rewrite the product description below.";

/// The two rewriting constraints. Both must appear in every rendered prompt.
pub const CONSTRAINT_STYLE: &str =
    "The new text must follow the writing style of the provided examples.";
pub const CONSTRAINT_RELEVANCE: &str =
    "The new text must stay relevant to the original description.";

/// Line labels used when rendering examples and the target. The bundled
/// generator parses these back out of the prompt, so they are shared consts.
const ORIGINAL_LABEL: &str = "Original: ";
const REWRITTEN_LABEL: &str = "Rewritten: ";
const TARGET_LABEL: &str = "Description: ";

// ============================================================================
// Prompt construction
// ============================================================================

/// A structured prompt; [`render`](PromptTemplate::render) flattens it to
/// text in the fixed section order system → examples → task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptTemplate {
    pub system_message: String,
    /// (original, rewritten) pairs, in presentation order.
    pub examples: Vec<(String, String)>,
    pub task_instruction: String,
    /// Exactly two clauses: style-following and relevance.
    pub constraints: [String; 2],
    pub target_description: String,
}

impl PromptTemplate {
    /// Pure function of the template fields; same template → same bytes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("System: ");
        out.push_str(&self.system_message);
        out.push('\n');
        for (idx, (orig, rew)) in self.examples.iter().enumerate() {
            out.push('\n');
            out.push_str(&format!("Example {}:\n", idx + 1));
            out.push_str(ORIGINAL_LABEL);
            out.push_str(orig);
            out.push('\n');
            out.push_str(REWRITTEN_LABEL);
            out.push_str(rew);
            out.push('\n');
        }
        out.push('\n');
        out.push_str("Task: ");
        out.push_str(&self.task_instruction);
        out.push('\n');
        out.push_str(&format!("Constraints: (1) {} (2) {}\n", self.constraints[0], self.constraints[1]));
        out.push_str(TARGET_LABEL);
        out.push_str(&self.target_description);
        out.push('\n');
        // Trailing label cues the generator to continue with the rewrite.
        out.push_str(REWRITTEN_LABEL.trim_end());
        out.push('\n');
        out
    }
}

/// Rewrite pairs harvested from a completed fine-tuning attack run. The
/// fine-tuning only has to happen once; pools round-trip through JSON so
/// later prompt-only runs can load them directly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FewShotPool {
    pairs: Vec<(String, String)>,
}

impl FewShotPool {
    /// Keeps one pair per distinct original (first occurrence wins) and
    /// drops pairs with an empty side.
    pub fn from_rewrites(results: &[RewriteResult]) -> Result<FewShotPool> {
        let mut seen = std::collections::BTreeSet::new();
        let mut pairs = Vec::new();
        for r in results {
            if r.original.trim().is_empty() || r.rewritten.trim().is_empty() {
                continue;
            }
            if seen.insert(r.original.clone()) {
                pairs.push((r.original.clone(), r.rewritten.clone()));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config("no usable rewrite pairs for the pool".into()));
        }
        Ok(FewShotPool { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-target sampling seed, so each target sees a different (but
/// reproducible) example subset under one experiment seed.
pub fn target_seed(base_seed: u64, item: ItemId) -> u64 {
    base_seed ^ (item as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// k distinct pairs, uniform without replacement.
pub fn sample_examples(
    pool: &FewShotPool,
    k: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if k > pool.pairs.len() {
        return Err(Error::Config(format!(
            "asked for {k} examples but the pool holds {}",
            pool.pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.pairs.len()).collect();
    idx.shuffle(&mut rng);
    Ok(idx[..k].iter().map(|&i| pool.pairs[i].clone()).collect())
}

pub fn build_prompt(
    system_message: &str,
    examples: &[(String, String)],
    target_description: &str,
) -> Result<PromptTemplate> {
    if target_description.trim().is_empty() {
        return Err(Error::EmptyText("target description is empty".into()));
    }
    Ok(PromptTemplate {
        system_message: system_message.to_string(),
        examples: examples.to_vec(),
        task_instruction: DEFAULT_TASK_INSTRUCTION.to_string(),
        constraints: [CONSTRAINT_STYLE.to_string(), CONSTRAINT_RELEVANCE.to_string()],
        target_description: target_description.to_string(),
    })
}

// ============================================================================
// Generation
// ============================================================================

/// Short content hash for correlating generation failures with exported
/// prompt files.
pub fn prompt_text_hash(prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    format!("{:x}", h.finalize())[..12].to_string()
}

/// Feed a rendered prompt to any [`TextGenerator`] and truncate the result
/// to the catalog's description length cap. Generator failures come back as
/// generation errors tagged with the prompt hash.
pub fn rewrite_via_generator<G: TextGenerator>(
    generator: &G,
    prompt: &str,
    decode: &DecodeConfig,
) -> Result<String> {
    let text = generator.generate_text(prompt, decode).map_err(|e| Error::Generation {
        prompt_hash: prompt_text_hash(prompt),
        msg: e.to_string(),
    })?;
    let words: Vec<&str> = text.split_whitespace().take(MAX_DESC_WORDS).collect();
    Ok(words.join(" "))
}

/// Generator adapter that makes a fixed-window LM *usable* for few-shot
/// prompting. The LM's context is far too small to attend over a whole
/// prompt, so the adapter supplies the in-context mechanism itself: it
/// parses the rewritten-example spans out of the prompt and turns their
/// token statistics into a logit bias of β·ln(1+count) per non-reserved
/// token, then decodes a continuation of the target description under that
/// bias. With no examples in the prompt the bias vanishes and this reduces
/// to plain zero-shot decoding.
pub struct ExemplarBiasedGenerator<'a> {
    pub lm: &'a TinyLm,
    /// Bias strength β ≥ 0.
    pub beta: f64,
    /// How many leading tokens of the target description seed the decode.
    pub prefix_tokens: usize,
}

impl<'a> ExemplarBiasedGenerator<'a> {
    pub fn new(lm: &'a TinyLm, beta: f64) -> ExemplarBiasedGenerator<'a> {
        ExemplarBiasedGenerator { lm, beta, prefix_tokens: 4 }
    }

    /// Rewritten-example spans and the target description, recovered from
    /// the labeled prompt lines. The trailing bare cue label is skipped.
    fn parse_prompt(prompt: &str) -> Result<(Vec<&str>, &str)> {
        let mut spans = Vec::new();
        let mut target = None;
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix(REWRITTEN_LABEL) {
                if !rest.trim().is_empty() {
                    spans.push(rest);
                }
            } else if let Some(rest) = line.strip_prefix(TARGET_LABEL) {
                target = Some(rest);
            }
        }
        let target = target.ok_or_else(|| Error::Generation {
            prompt_hash: prompt_text_hash(prompt),
            msg: format!("prompt has no '{}' line", TARGET_LABEL.trim_end()),
        })?;
        Ok((spans, target))
    }

    fn exemplar_bias(&self, spans: &[&str]) -> Option<Vec<f64>> {
        let mut counts = vec![0usize; self.lm.vocab_size()];
        for span in spans {
            for t in self.lm.vocab.tokenize(span) {
                if t as usize >= NUM_RESERVED {
                    counts[t as usize] += 1;
                }
            }
        }
        if self.beta == 0.0 || counts.iter().all(|&c| c == 0) {
            return None;
        }
        Some(
            counts
                .iter()
                .map(|&c| self.beta * (1.0 + c as f64).ln())
                .collect(),
        )
    }
}

impl TextGenerator for ExemplarBiasedGenerator<'_> {
    fn generate_text(&self, prompt: &str, cfg: &DecodeConfig) -> Result<String> {
        let (spans, target) = Self::parse_prompt(prompt)?;
        let bias = self.exemplar_bias(&spans);
        let target_tokens = self.lm.vocab.tokenize(target);
        if target_tokens.is_empty() {
            return Err(Error::EmptyText("target description tokenized to nothing".into()));
        }
        let take = self.prefix_tokens.max(1).min(target_tokens.len());
        let prefix = &target_tokens[..take];
        let continuation = generate_with_bias(self.lm, prefix, cfg, bias.as_deref())?;
        let mut all = prefix.to_vec();
        all.extend(continuation);
        Ok(self.lm.vocab.decode(&all))
    }
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textenc::Vocabulary;

    fn pool_of(n: usize) -> FewShotPool {
        let results: Vec<RewriteResult> = (0..n)
            .map(|i| RewriteResult {
                item_id: i,
                original: format!("original text {i}"),
                rewritten: format!("rewritten text {i}"),
                score_before: vec![],
                score_after: vec![],
                rank_before: 0.0,
                rank_after: 0.0,
            })
            .collect();
        FewShotPool::from_rewrites(&results).unwrap()
    }

    #[test]
    fn pool_dedupes_originals_and_rejects_empty() {
        let mut results = vec![
            RewriteResult {
                item_id: 0,
                original: "same".into(),
                rewritten: "first".into(),
                score_before: vec![],
                score_after: vec![],
                rank_before: 0.0,
                rank_after: 0.0,
            };
            3
        ];
        results[1].rewritten = "second".into();
        let pool = FewShotPool::from_rewrites(&results).unwrap();
        assert_eq!(pool.len(), 1);
        assert!(FewShotPool::from_rewrites(&[]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_exhaustive_and_rejects_overdraw() {
        let pool = pool_of(6);
        let a = sample_examples(&pool, 3, 42).unwrap();
        let b = sample_examples(&pool, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let all: std::collections::BTreeSet<_> =
            a.iter().map(|(o, _)| o.clone()).collect();
        assert_eq!(all.len(), 3, "sampled examples must be distinct");

        // k = pool size → the whole pool, shuffled.
        let full = sample_examples(&pool, 6, 9).unwrap();
        let set: std::collections::BTreeSet<_> = full.iter().collect();
        assert_eq!(set.len(), 6);

        assert!(matches!(sample_examples(&pool, 7, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        // 1000 single draws from a 10-pool; each element expected 100 times.
        // Chi-square(9) stays under 21.7 (p ≈ 0.01) for uniform sampling.
        let pool = pool_of(10);
        let mut counts = [0usize; 10];
        for seed in 0..1000u64 {
            let ex = sample_examples(&pool, 1, seed).unwrap();
            let idx: usize = ex[0].0.rsplit(' ').next().unwrap().parse().unwrap();
            counts[idx] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - 100.0;
                d * d / 100.0
            })
            .sum();
        assert!(chi2 < 21.7, "chi-square {chi2} too extreme for uniform");
    }

    #[test]
    fn prompt_structure_and_purity() {
        let pool = pool_of(4);
        let ex = sample_examples(&pool, 2, 7).unwrap();
        let t = build_prompt(DEFAULT_SYSTEM_MESSAGE, &ex, "a target description").unwrap();
        let text = t.render();
        assert_eq!(text, t.render(), "rendering must be pure");

        assert_eq!(text.matches("System: ").count(), 1);
        assert_eq!(text.matches(ORIGINAL_LABEL).count(), 2);
        // Two example rewrites plus the trailing cue label.
        assert_eq!(text.matches(REWRITTEN_LABEL.trim_end()).count(), 3);
        assert_eq!(text.matches("Example ").count(), 2);
        assert!(text.contains(CONSTRAINT_STYLE));
        assert!(text.contains(CONSTRAINT_RELEVANCE));
        assert!(text.contains("a target description"));

        // Section order: system before examples before task.
        let sys = text.find("System: ").unwrap();
        let ex1 = text.find("Example 1:").unwrap();
        let task = text.find("Task: ").unwrap();
        assert!(sys < ex1 && ex1 < task);

        // Zero-shot: no example block at all.
        let zs = build_prompt(DEFAULT_SYSTEM_MESSAGE, &[], "something").unwrap().render();
        assert!(!zs.contains("Example "));
        assert!(!zs.contains(ORIGINAL_LABEL));

        assert!(matches!(
            build_prompt(DEFAULT_SYSTEM_MESSAGE, &ex, "   "),
            Err(Error::EmptyText(_))
        ));
    }

    struct EchoStub(String);
    impl TextGenerator for EchoStub {
        fn generate_text(&self, _prompt: &str, _cfg: &DecodeConfig) -> Result<String> {
            Ok(self.0.clone())
        }
    }

    struct FailStub;
    impl TextGenerator for FailStub {
        fn generate_text(&self, _prompt: &str, _cfg: &DecodeConfig) -> Result<String> {
            Err(Error::Contract("backend down".into()))
        }
    }

    #[test]
    fn generator_adapter_contract_echo_truncation_and_error_hash() {
        let short = EchoStub("hello rewritten world".into());
        let out = rewrite_via_generator(&short, "prompt", &DecodeConfig::greedy(5)).unwrap();
        assert_eq!(out, "hello rewritten world");

        let long = EchoStub(vec!["word"; 150].join(" "));
        let out = rewrite_via_generator(&long, "prompt", &DecodeConfig::greedy(5)).unwrap();
        assert_eq!(out.split_whitespace().count(), MAX_DESC_WORDS);

        let err = rewrite_via_generator(&FailStub, "prompt", &DecodeConfig::greedy(5));
        match err {
            Err(Error::Generation { prompt_hash, msg }) => {
                assert_eq!(prompt_hash, prompt_text_hash("prompt"));
                assert!(msg.contains("backend down"));
            }
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    fn tiny_lm() -> TinyLm {
        let corpus = [
            "bright copper kettle with sturdy handle",
            "warm woolen mitten in winter colors",
            "sparkle finish chrome kettle for tea",
            "classic leather satchel with brass buckle",
        ];
        let vocab = Vocabulary::build(corpus.iter().copied());
        TinyLm::new(vocab, 10, 12, 3, 99)
    }

    #[test]
    fn biased_generation_pulls_in_exemplar_tokens_and_k0_matches_plain_decode() {
        let lm = tiny_lm();
        let examples = vec![(
            "original words".to_string(),
            "sparkle sparkle sparkle chrome".to_string(),
        )];
        let prompt_few =
            build_prompt(DEFAULT_SYSTEM_MESSAGE, &examples, "classic leather satchel with brass")
                .unwrap()
                .render();
        let prompt_zero =
            build_prompt(DEFAULT_SYSTEM_MESSAGE, &[], "classic leather satchel with brass")
                .unwrap()
                .render();

        let cfg = DecodeConfig::greedy(8);
        let strong = ExemplarBiasedGenerator { lm: &lm, beta: 25.0, prefix_tokens: 4 };
        let few = strong.generate_text(&prompt_few, &cfg).unwrap();
        assert!(
            few.contains("sparkle") || few.contains("chrome"),
            "expected exemplar vocabulary in biased output: {few}"
        );

        // Zero examples → no bias → identical to decoding the raw LM on the
        // same description prefix.
        let zero = strong.generate_text(&prompt_zero, &cfg).unwrap();
        let toks = lm.vocab.tokenize("classic leather satchel with brass");
        let plain = generate_with_bias(&lm, &toks[..4], &cfg, None).unwrap();
        let mut whole = toks[..4].to_vec();
        whole.extend(plain);
        assert_eq!(zero, lm.vocab.decode(&whole));

        // Determinism under greedy decode.
        assert_eq!(few, strong.generate_text(&prompt_few, &cfg).unwrap());

        // Both start with the target prefix (continuation semantics).
        assert!(few.starts_with("classic leather satchel with"));
        assert!(zero.starts_with("classic leather satchel with"));
    }

    #[test]
    fn parse_failure_reports_prompt_hash() {
        let lm = tiny_lm();
        let g = ExemplarBiasedGenerator::new(&lm, 1.0);
        let bad = "System: hi\nTask: rewrite\n";
        match g.generate_text(bad, &DecodeConfig::greedy(4)) {
            Err(Error::Generation { prompt_hash, .. }) => {
                assert_eq!(prompt_hash, prompt_text_hash(bad));
            }
            other => panic!("expected generation error, got {other:?}"),
        }
    }
}
