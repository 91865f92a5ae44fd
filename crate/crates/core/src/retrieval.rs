//! Sentiment-consistent review retrieval and dialogue augmentation.
//!
//! A strategy is written `<C|R>-<S|H>-<S|W>`: correctly or randomly matched
//! item reviews, ranking by sentiment distance or helpful score, and
//! sentence-wise or word-wise composition of the chosen sentence.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, Review, ReviewDatabase, ReviewId, TokenId, Vocabulary, SEP};
use crate::sentiment::{utterance_polarity, Polarity, SentimentIndex, SentimentModel};

pub const DEFAULT_BUDGET: usize = 20;
pub const DEFAULT_LINK_RATE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    Correct,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    Sentiment,
    Helpful,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    SentenceWise,
    WordWise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalStrategy {
    pub matching: Matching,
    pub ranking: Ranking,
    pub composition: Composition,
    pub budget: usize,
}

impl Default for RetrievalStrategy {
    fn default() -> Self {
        Self {
            matching: Matching::Correct,
            ranking: Ranking::Sentiment,
            composition: Composition::SentenceWise,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StrategyError {
    #[error("invalid retrieval strategy '{0}', expected <C|R>-<S|H>-<S|W>")]
    Syntax(String),
    #[error("review budget must be at least 1")]
    ZeroBudget,
}

impl RetrievalStrategy {
    pub fn with_budget(self, budget: usize) -> Result<Self, StrategyError> {
        if budget == 0 {
            return Err(StrategyError::ZeroBudget);
        }
        Ok(Self { budget, ..self })
    }

    /// The three-letter code, e.g. `C-S-S`.
    pub fn code(&self) -> String {
        let m = match self.matching {
            Matching::Correct => 'C',
            Matching::Random => 'R',
        };
        let r = match self.ranking {
            Ranking::Sentiment => 'S',
            Ranking::Helpful => 'H',
        };
        let c = match self.composition {
            Composition::SentenceWise => 'S',
            Composition::WordWise => 'W',
        };
        format!("{m}-{r}-{c}")
    }
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for RetrievalStrategy {
    type Err = StrategyError;

    /// Parses a strategy code with the default budget.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StrategyError::Syntax(s.to_string());
        let parts: Vec<&str> = s.trim().split('-').collect();
        let [m, r, c] = parts.as_slice() else {
            return Err(bad());
        };
        let matching = match *m {
            "C" => Matching::Correct,
            "R" => Matching::Random,
            _ => return Err(bad()),
        };
        let ranking = match *r {
            "S" => Ranking::Sentiment,
            "H" => Ranking::Helpful,
            _ => return Err(bad()),
        };
        let composition = match *c {
            "S" => Composition::SentenceWise,
            "W" => Composition::WordWise,
            _ => return Err(bad()),
        };
        Ok(Self {
            matching,
            ranking,
            composition,
            budget: DEFAULT_BUDGET,
        })
    }
}

/// Anything that assigns a sentiment value to a review sentence.
pub trait SentenceScorer {
    fn score(&self, review: &Review, sentence: usize) -> f64;
}

impl SentenceScorer for SentimentIndex {
    /// Sentences missing from the index score as neutral.
    fn score(&self, review: &Review, sentence: usize) -> f64 {
        self.get(review.id, sentence).unwrap_or(0.5)
    }
}

impl SentenceScorer for SentimentModel {
    fn score(&self, review: &Review, sentence: usize) -> f64 {
        self.predict(&review.sentences[sentence]).unwrap_or(0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewSentence {
    /// Item whose review supplied the sentence.
    pub item: String,
    pub tokens: Vec<String>,
    pub source_review: ReviewId,
    pub sentence_index: usize,
    pub v: f64,
}

struct Candidate<'a> {
    review: &'a Review,
    index: usize,
    v: f64,
}

fn provenance_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.review
        .helpful_score
        .cmp(&a.review.helpful_score)
        .then_with(|| a.review.id.cmp(&b.review.id))
        .then_with(|| a.index.cmp(&b.index))
}

/// Selects one review sentence for `item` given the target sentiment
/// `v_star`. Returns `None` when the item has no reviews.
pub fn retrieve<S: SentenceScorer + ?Sized, R: Rng>(
    item: &str,
    v_star: f64,
    db: &ReviewDatabase,
    scorer: &S,
    strategy: &RetrievalStrategy,
    rng: &mut R,
) -> Option<ReviewSentence> {
    if !db.contains(item) {
        return None;
    }
    let source = match strategy.matching {
        Matching::Correct => db.get(item)?,
        Matching::Random => {
            let k = rng.random_range(0..db.item_count());
            let key = db.items().nth(k)?;
            db.get(key)?
        }
    };
    let cands: Vec<Candidate> = source
        .iter()
        .flat_map(|r| {
            (0..r.sentences.len()).map(move |i| (r, i))
        })
        .map(|(review, index)| Candidate {
            review,
            index,
            v: scorer.score(review, index),
        })
        .collect();
    let best = match strategy.ranking {
        Ranking::Sentiment => {
            let want = Polarity::of_score(v_star);
            let consistent: Vec<&Candidate> = cands
                .iter()
                .filter(|c| Polarity::of_score(c.v) == want)
                .collect();
            let pool: Vec<&Candidate> = if consistent.is_empty() {
                cands.iter().collect()
            } else {
                consistent
            };
            pool.into_iter().min_by(|a, b| {
                (a.v - v_star)
                    .abs()
                    .total_cmp(&(b.v - v_star).abs())
                    .then_with(|| provenance_order(a, b))
            })?
        }
        Ranking::Helpful => cands.iter().min_by(|a, b| provenance_order(a, b))?,
    };
    let raw = &best.review.sentences[best.index];
    Some(ReviewSentence {
        item: best.review.item.clone(),
        tokens: compose_sentence(raw, strategy, rng),
        source_review: best.review.id,
        sentence_index: best.index,
        v: best.v,
    })
}

/// Cuts a sentence to the budget: a prefix (sentence-wise) or a uniformly
/// sampled, order-preserving subsequence (word-wise).
pub fn compose_sentence<R: Rng>(
    raw: &[String],
    strategy: &RetrievalStrategy,
    rng: &mut R,
) -> Vec<String> {
    let budget = strategy.budget.max(1);
    if raw.len() <= budget {
        return raw.to_vec();
    }
    match strategy.composition {
        Composition::SentenceWise => raw[..budget].to_vec(),
        Composition::WordWise => sample_positions(raw.len(), budget, rng)
            .into_iter()
            .map(|i| raw[i].clone())
            .collect(),
    }
}

/// `k` distinct positions of `0..n` drawn by a partial Fisher-Yates shuffle,
/// returned in ascending order.
pub fn sample_positions<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// One inserted review sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewSetEntry {
    pub turn: usize,
    pub item: String,
    pub polarity: Polarity,
    pub sentence: ReviewSentence,
    pub token_ids: Vec<TokenId>,
    /// Index of the inserted `SEP` in the augmented utterance.
    pub insert_at: usize,
}

impl ReviewSetEntry {
    /// Tokens occupied in the augmented utterance (`SEP` included).
    pub fn span_len(&self) -> usize {
        1 + self.token_ids.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewSet {
    pub entries: Vec<ReviewSetEntry>,
}

impl ReviewSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries retrieved in turns before `turn`.
    pub fn before(&self, turn: usize) -> impl Iterator<Item = &ReviewSetEntry> + '_ {
        self.entries.iter().filter(move |e| e.turn < turn)
    }

    /// Review token ids before `turn`, sentences separated by `SEP`.
    pub fn token_ids_before(&self, turn: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (i, e) in self.before(turn).enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(&e.token_ids);
        }
        out
    }
}

/// Seeded generator for one dialogue, so augmentation of a dialogue does
/// not depend on which other dialogues were processed first.
pub fn dialogue_rng(seed: u64, dialogue_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(dialogue_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Inserts `SEP` plus a retrieved sentence right after the first mention of
/// each item that wins a `link_rate` coin flip. Target sentiment comes from
/// the mention's attitude.
pub fn augment_dialogue<S: SentenceScorer + ?Sized, R: Rng>(
    dialogue: &Dialogue,
    db: &ReviewDatabase,
    scorer: &S,
    vocab: &Vocabulary,
    strategy: &RetrievalStrategy,
    link_rate: f64,
    rng: &mut R,
) -> (Dialogue, ReviewSet) {
    let mut out = dialogue.clone();
    let mut set = ReviewSet::default();
    let mut seen: Vec<String> = Vec::new();
    for (turn, utt) in dialogue.turns.iter().enumerate() {
        let mut order: Vec<usize> = (0..utt.item_mentions.len()).collect();
        order.sort_by_key(|&i| utt.item_mentions[i].position.unwrap_or(usize::MAX));
        let mut inserted = 0usize;
        for mi in order {
            let mention = &utt.item_mentions[mi];
            if seen.contains(&mention.key) {
                continue;
            }
            seen.push(mention.key.clone());
            if !rng.random_bool(link_rate.clamp(0.0, 1.0)) {
                continue;
            }
            let polarity =
                utterance_polarity(utt, &mention.key).expect("mention comes from this utterance");
            let Some(sentence) = retrieve(
                &mention.key,
                polarity.target_score(),
                db,
                scorer,
                strategy,
                rng,
            ) else {
                continue;
            };
            let target = &mut out.turns[turn];
            let at = match mention.position {
                Some(p) => p + 1 + inserted,
                None => target.tokens.len(),
            };
            let token_ids = vocab.encode(&sentence.tokens);
            let mut span = Vec::with_capacity(1 + token_ids.len());
            span.push(SEP);
            span.extend_from_slice(&token_ids);
            let len = span.len();
            target.tokens.splice(at..at, span);
            for m in &mut target.item_mentions {
                if let Some(p) = m.position.as_mut() {
                    if *p >= at {
                        *p += len;
                    }
                }
            }
            inserted += len;
            set.entries.push(ReviewSetEntry {
                turn,
                item: mention.key.clone(),
                polarity,
                sentence,
                token_ids,
                insert_at: at,
            });
        }
    }
    (out, set)
}

/// Removes every inserted span, recovering the input of [`augment_dialogue`].
pub fn strip_augmentation(augmented: &Dialogue, set: &ReviewSet) -> Dialogue {
    let mut out = augmented.clone();
    let mut entries: Vec<&ReviewSetEntry> = set.entries.iter().collect();
    entries.sort_by(|a, b| b.turn.cmp(&a.turn).then(b.insert_at.cmp(&a.insert_at)));
    for e in entries {
        let utt = &mut out.turns[e.turn];
        let len = e.span_len();
        utt.tokens.drain(e.insert_at..e.insert_at + len);
        for m in &mut utt.item_mentions {
            if let Some(p) = m.position.as_mut() {
                if *p >= e.insert_at + len {
                    *p -= len;
                }
            }
        }
    }
    out
}
