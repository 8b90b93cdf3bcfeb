//! Dataset synthesis, ingestion, filtering, and splits.
//!
//! Two ways in: [`generate_synthetic`] builds a corpus where descriptions
//! *provably* influence ratings (a hidden phrase-weight table is added to the
//! rating model), and [`ingest_jsonl`] loads real interaction logs and applies
//! the usual cold-start filters. Both produce a [`Dataset`] with dense ids.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathutil::standard_normal;
use crate::{ItemId, UserId};

// ============================================================================
// Types
// ============================================================================

/// A catalog item and its text attribute.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Item {
    pub item_id: ItemId,
    pub title: Option<String>,
    /// Raw description text. Word-level preprocessing (lowercasing,
    /// punctuation stripping, truncation) happens at tokenization time.
    pub description: String,
    /// Genre tag for synthetic data; `None` for ingested datasets.
    pub genre: Option<usize>,
}

/// One user-item event. `rating` carries a 1..5 value for rating datasets or
/// an implicit 0/1 flag; `timestamp` orders a user's history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

/// Disjoint index sets into `Dataset::interactions`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    pub splits: Splits,
    pub num_users: usize,
}

/// Knobs for the synthetic corpus.
///
/// `phrase_effect_scale` is the strength of the planted text signal: every
/// quality phrase carries a positive hidden weight proportional to it, added
/// to the rating of any item whose description contains the phrase. Zero
/// disconnects text from ratings entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions_per_user: usize,
    pub vocab_size: usize,
    pub num_quality_phrases: usize,
    pub phrase_effect_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 500,
            num_items: 300,
            interactions_per_user: 40,
            vocab_size: 400,
            num_quality_phrases: 12,
            phrase_effect_scale: 0.25,
            noise_std: 0.35,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_items == 0
            || self.interactions_per_user == 0
            || self.vocab_size == 0
            || self.num_quality_phrases == 0
        {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be ≥ 0".into()));
        }
        if self.interactions_per_user > self.num_items {
            return Err(Error::Config(format!(
                "interactions_per_user ({}) exceeds num_items ({})",
                self.interactions_per_user, self.num_items
            )));
        }
        if self.vocab_size < 8 * NUM_GENRES {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}",
                8 * NUM_GENRES
            )));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic corpus, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Each quality phrase is a two-word bigram planted contiguously.
    pub phrases: Vec<(String, String)>,
    /// Hidden additive rating weight of each phrase (≥ 0).
    pub phrase_weights: Vec<f64>,
    /// Number of planted phrases per item.
    pub item_phrase_counts: Vec<usize>,
    pub item_genre: Vec<usize>,
}

// ============================================================================
// Word-level preprocessing
// ============================================================================

/// Normalize text to lowercase words: punctuation characters are dropped,
/// whitespace delimits.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let w: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if w.is_empty() {
                None
            } else {
                Some(w)
            }
        })
        .collect()
}

/// First `max_words` tokens of a sequence (descriptions are capped at 100
/// words before any embedding or generation).
pub fn truncate_description<T: Clone>(tokens: &[T], max_words: usize) -> Vec<T> {
    tokens[..tokens.len().min(max_words)].to_vec()
}

// ============================================================================
// Synthetic generation
// ============================================================================

const NUM_GENRES: usize = 4;
const DESC_MIN_WORDS: usize = 40;
const DESC_MAX_WORDS: usize = 70;
/// Probability that any given quality phrase is planted in an item.
const PHRASE_PLANT_PROB: f64 = 0.3;
/// Zipf exponent for item popularity. A skewed catalog keeps tail items
/// sparse in the interaction log, which is what forces a trained recommender
/// to read quality from descriptions instead of memorizing it per item.
const POPULARITY_EXPONENT: f64 = 1.0;

const CONSONANTS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for an index: two or three
/// consonant-vowel syllables, unique per index.
fn synth_word(idx: usize) -> String {
    let syll = |i: usize| format!("{}{}", CONSONANTS[(i / 5) % 14], VOWELS[i % 5]);
    let lo = idx % 70;
    let hi = idx / 70;
    if hi == 0 {
        format!("{}{}", syll(lo), syll((lo + 31) % 70))
    } else {
        format!("{}{}{}", syll(hi % 70), syll(lo), syll((lo + hi + 17) % 70))
    }
}

fn genre_opener(genre: usize) -> Vec<String> {
    // Openers reuse a dedicated slice of the word space so they never collide
    // with filler or phrase words (see offsets in `generate_synthetic_detailed`).
    (0..3).map(|j| synth_word(900_000 + genre * 10 + j)).collect()
}

/// Generate a synthetic corpus plus its hidden ground truth.
///
/// Ratings follow `3.0 + user_bias + item_bias + genre_affinity + phrase
/// weights + noise`, clipped to `[1, 5]`, so a text-aware model can pick up
/// the phrase signal through descriptions alone.
pub fn generate_synthetic_detailed(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Word pools. Filler words occupy indices [0, vocab_size); phrase words
    // and genre openers live in disjoint high ranges.
    let filler: Vec<String> = (0..cfg.vocab_size).map(synth_word).collect();
    let phrases: Vec<(String, String)> = (0..cfg.num_quality_phrases)
        .map(|j| (synth_word(800_000 + 2 * j), synth_word(800_000 + 2 * j + 1)))
        .collect();
    let phrase_weights: Vec<f64> = (0..cfg.num_quality_phrases)
        .map(|_| cfg.phrase_effect_scale * rng.gen_range(0.5..1.5))
        .collect();
    debug_assert!(phrase_weights.iter().all(|w| *w >= 0.0));

    // Partition filler into a shared pool and per-genre pools.
    let shared_end = cfg.vocab_size * 3 / 5;
    let genre_span = (cfg.vocab_size - shared_end) / NUM_GENRES;

    let mut items = Vec::with_capacity(cfg.num_items);
    let mut item_phrase_counts = vec![0usize; cfg.num_items];
    let mut item_genre = vec![0usize; cfg.num_items];
    let mut item_phrase_lift = vec![0.0f64; cfg.num_items];

    for i in 0..cfg.num_items {
        let genre = rng.gen_range(0..NUM_GENRES);
        item_genre[i] = genre;

        let mut words = genre_opener(genre);
        let target_len = rng.gen_range(DESC_MIN_WORDS..=DESC_MAX_WORDS);

        // Items mention each of their quality phrases one to three times, the
        // way marketing copy repeats its selling points; the hidden lift
        // counts each distinct phrase once.
        let mut planted: Vec<usize> = Vec::new();
        for (j, w) in phrase_weights.iter().enumerate() {
            if rng.gen_bool(PHRASE_PLANT_PROB) {
                let copies = rng.gen_range(1..=3);
                for _ in 0..copies {
                    planted.push(j);
                }
                item_phrase_lift[i] += w;
                item_phrase_counts[i] += 1;
            }
        }

        // Body: filler words, 60% from the genre pool, rest from the shared
        // pool, with phrase bigrams spliced in at random positions.
        while words.len() < target_len {
            let idx = if rng.gen_bool(0.6) && genre_span > 0 {
                shared_end + genre * genre_span + rng.gen_range(0..genre_span)
            } else {
                rng.gen_range(0..shared_end)
            };
            words.push(filler[idx].clone());
        }
        for &j in &planted {
            let pos = rng.gen_range(3..=words.len());
            words.insert(pos, phrases[j].1.clone());
            words.insert(pos, phrases[j].0.clone());
        }

        let title = format!("{} {}", words[0], synth_word(950_000 + i));
        items.push(Item {
            item_id: i,
            title: Some(title),
            description: words.join(" "),
            genre: Some(genre),
        });
    }

    // Users: a bias plus a per-genre affinity.
    let user_bias: Vec<f64> = (0..cfg.num_users)
        .map(|_| 0.35 * standard_normal(&mut rng))
        .collect();
    let user_affinity: Vec<[f64; NUM_GENRES]> = (0..cfg.num_users)
        .map(|_| {
            let mut a = [0.0; NUM_GENRES];
            for slot in a.iter_mut() {
                *slot = 0.35 * standard_normal(&mut rng);
            }
            a
        })
        .collect();
    let item_bias: Vec<f64> = (0..cfg.num_items)
        .map(|_| 0.25 * standard_normal(&mut rng))
        .collect();

    // Zipf popularity over a shuffled item order, so item id carries no
    // popularity information.
    let mut pop_rank: Vec<usize> = (0..cfg.num_items).collect();
    pop_rank.shuffle(&mut rng);
    let mut popularity = vec![0.0f64; cfg.num_items];
    for (rank, &i) in pop_rank.iter().enumerate() {
        popularity[i] = 1.0 / ((rank + 1) as f64).powf(POPULARITY_EXPONENT);
    }

    let mut interactions = Vec::with_capacity(cfg.num_users * cfg.interactions_per_user);
    let item_ids: Vec<ItemId> = (0..cfg.num_items).collect();
    for u in 0..cfg.num_users {
        let mut chosen: Vec<ItemId> = item_ids
            .choose_multiple_weighted(&mut rng, cfg.interactions_per_user, |&i| popularity[i])
            .map_err(|e| Error::Config(format!("popularity sampling failed: {e}")))?
            .copied()
            .collect();
        chosen.sort_unstable();
        for (j, &i) in chosen.iter().enumerate() {
            let raw = 3.0
                + user_bias[u]
                + item_bias[i]
                + user_affinity[u][item_genre[i]]
                + item_phrase_lift[i]
                + cfg.noise_std * standard_normal(&mut rng);
            interactions.push(Interaction {
                user_id: u,
                item_id: i,
                rating: raw.clamp(1.0, 5.0),
                timestamp: (u as i64) * 1000 + j as i64,
            });
        }
    }

    let splits = Splits {
        train: (0..interactions.len()).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let dataset = Dataset {
        items,
        interactions,
        splits,
        num_users: cfg.num_users,
    };
    let truth = SynthTruth {
        phrases,
        phrase_weights,
        item_phrase_counts,
        item_genre,
    };
    Ok((dataset, truth))
}

/// See [`generate_synthetic_detailed`]; this drops the ground truth.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_synthetic_detailed(cfg).map(|(d, _)| d)
}

// ============================================================================
// JSONL ingestion
// ============================================================================

#[derive(Deserialize)]
struct RawRecord {
    user: serde_json::Value,
    item: serde_json::Value,
    rating: f64,
    ts: i64,
    description: String,
}

fn key_of(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Load `{"user", "item", "rating", "ts", "description"}` JSONL and apply the
/// cold-start filters: users need `min_user_interactions` events and items
/// need `min_desc_words` description words. Removal iterates to a fixed point
/// (dropping an item can push a user under the threshold), then ids are
/// re-densified in first-appearance order.
pub fn ingest_jsonl<P: AsRef<Path>>(
    path: P,
    min_user_interactions: usize,
    min_desc_words: usize,
) -> Result<Dataset> {
    let file = fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);

    struct Event {
        user_key: String,
        item_key: String,
        rating: f64,
        ts: i64,
    }
    let mut events: Vec<Event> = Vec::new();
    let mut descriptions: BTreeMap<String, String> = BTreeMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let user_key = key_of(&rec.user).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "user must be a string or integer".into(),
        })?;
        let item_key = key_of(&rec.item).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "item must be a string or integer".into(),
        })?;
        if !rec.rating.is_finite() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "rating must be finite".into(),
            });
        }
        descriptions.entry(item_key.clone()).or_insert(rec.description);
        events.push(Event {
            user_key,
            item_key,
            rating: rec.rating,
            ts: rec.ts,
        });
    }

    // Items are admitted by description length alone; this is decided once.
    let word_ok: BTreeMap<&String, bool> = descriptions
        .iter()
        .map(|(k, d)| (k, normalize_words(d).len() >= min_desc_words))
        .collect();

    let mut user_alive: BTreeMap<&String, bool> =
        events.iter().map(|e| (&e.user_key, true)).collect();

    // Fixed-point loop: recount each user's interactions over surviving
    // items, drop users under the threshold, repeat until stable.
    loop {
        let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
        for e in &events {
            if user_alive[&e.user_key] && word_ok[&e.item_key] {
                *counts.entry(&e.user_key).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for (user, alive) in user_alive.iter_mut() {
            if *alive && counts.get(user).copied().unwrap_or(0) < min_user_interactions {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Re-densify in first-appearance order over surviving events.
    let mut user_ids: BTreeMap<String, UserId> = BTreeMap::new();
    let mut item_ids: BTreeMap<String, ItemId> = BTreeMap::new();
    let mut user_order: Vec<String> = Vec::new();
    let mut item_order: Vec<String> = Vec::new();
    let mut interactions: Vec<Interaction> = Vec::new();

    for e in &events {
        if !user_alive[&e.user_key] || !word_ok[&e.item_key] {
            continue;
        }
        let next_user = user_ids.len();
        let user_id = *user_ids.entry(e.user_key.clone()).or_insert_with(|| {
            user_order.push(e.user_key.clone());
            next_user
        });
        let next_item = item_ids.len();
        let item_id = *item_ids.entry(e.item_key.clone()).or_insert_with(|| {
            item_order.push(e.item_key.clone());
            next_item
        });
        interactions.push(Interaction {
            user_id,
            item_id,
            rating: e.rating,
            timestamp: e.ts,
        });
    }

    if interactions.is_empty() {
        return Err(Error::EmptyDataset(
            "no interactions survive the cold-start filters".into(),
        ));
    }

    let items: Vec<Item> = item_order
        .iter()
        .enumerate()
        .map(|(id, key)| Item {
            item_id: id,
            title: None,
            description: descriptions[key].clone(),
            genre: None,
        })
        .collect();

    let splits = Splits {
        train: (0..interactions.len()).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    Ok(Dataset {
        items,
        num_users: user_ids.len(),
        interactions,
        splits,
    })
}

// ============================================================================
// Splitting
// ============================================================================

/// Randomly assign interactions to train/val/test. Counts follow the floor
/// rule with the remainder going to train: `n_val = ⌊r_val·n⌋`,
/// `n_test = ⌊r_test·n⌋`, `n_train = n − n_val − n_test`.
pub fn split(mut dataset: Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios sum to {}, expected 1",
            r_train + r_val + r_test
        )));
    }
    let n = dataset.interactions.len();
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    dataset.splits = Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    Ok(dataset)
}

// ============================================================================
// Dataset helpers and persistence
// ============================================================================

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn interactions_in(&self, indices: &[usize]) -> Vec<Interaction> {
        indices.iter().map(|&i| self.interactions[i]).collect()
    }

    /// Per-user train-split history, each sorted by timestamp (ties keep
    /// interaction order, which is itself deterministic).
    pub fn train_histories(&self) -> Vec<Vec<Interaction>> {
        let mut hist: Vec<Vec<Interaction>> = vec![Vec::new(); self.num_users];
        for &idx in &self.splits.train {
            let it = self.interactions[idx];
            hist[it.user_id].push(it);
        }
        for h in &mut hist {
            h.sort_by_key(|it| it.timestamp);
        }
        hist
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.item_id != i {
                return Err(Error::Index(format!("item id {} at position {i}", item.item_id)));
            }
            if normalize_words(&item.description).is_empty() {
                return Err(Error::EmptyDataset(format!(
                    "item {i} has an empty description after preprocessing"
                )));
            }
        }
        for it in &self.interactions {
            if it.user_id >= self.num_users || it.item_id >= self.items.len() {
                return Err(Error::Index(format!(
                    "interaction references user {} / item {} out of range",
                    it.user_id, it.item_id
                )));
            }
        }
        let mut seen = vec![false; self.interactions.len()];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= seen.len() || seen[i] {
                return Err(Error::Index(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Index("splits do not cover all interactions".into()));
        }
        Ok(())
    }

    /// Persist as a directory: `items.jsonl`, `interactions.jsonl`
    /// (ingestion-compatible), and `splits.json`.
    pub fn save_dir<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut items = fs::File::create(dir.join("items.jsonl"))?;
        for item in &self.items {
            writeln!(items, "{}", serde_json::to_string(item)?)?;
        }
        let mut inter = fs::File::create(dir.join("interactions.jsonl"))?;
        for it in &self.interactions {
            let rec = serde_json::json!({
                "user": it.user_id,
                "item": it.item_id,
                "rating": it.rating,
                "ts": it.timestamp,
            });
            writeln!(inter, "{rec}")?;
        }
        let splits = serde_json::json!({
            "num_users": self.num_users,
            "train": self.splits.train,
            "val": self.splits.val,
            "test": self.splits.test,
        });
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&splits)?)?;
        Ok(())
    }

    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
        let dir = dir.as_ref();
        let mut items: Vec<Item> = Vec::new();
        for (lineno, line) in BufReader::new(fs::File::open(dir.join("items.jsonl"))?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?);
        }

        #[derive(Deserialize)]
        struct Rec {
            user: UserId,
            item: ItemId,
            rating: f64,
            ts: i64,
        }
        let mut interactions: Vec<Interaction> = Vec::new();
        for (lineno, line) in BufReader::new(fs::File::open(dir.join("interactions.jsonl"))?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            interactions.push(Interaction {
                user_id: r.user,
                item_id: r.item,
                rating: r.rating,
                timestamp: r.ts,
            });
        }

        #[derive(Deserialize)]
        struct SplitFile {
            num_users: usize,
            train: Vec<usize>,
            val: Vec<usize>,
            test: Vec<usize>,
        }
        let sf: SplitFile = serde_json::from_str(&fs::read_to_string(dir.join("splits.json"))?)?;
        let ds = Dataset {
            items,
            interactions,
            splits: Splits {
                train: sf.train,
                val: sf.val,
                test: sf.test,
            },
            num_users: sf.num_users,
        };
        ds.validate()?;
        Ok(ds)
    }
}

// ============================================================================
// Tests
// ============================================================================
