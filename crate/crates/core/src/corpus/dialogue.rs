use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kg::{EntityId, KnowledgeGraph};
use super::text::tokenize;
use super::vocab::{TokenId, Vocabulary, UNK};
use super::{open_lines, CorpusError};

/// Longest context (and single utterance) kept, in tokens.
pub const MAX_CONTEXT_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seeker,
    Recommender,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attitude {
    Liked,
    Disliked,
    #[default]
    DidNotSay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl ItemId {
    /// Placeholder for items outside the catalog.
    pub const UNKNOWN: ItemId = ItemId(u32::MAX);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_known(self) -> bool {
        self != Self::UNKNOWN
    }
}

/// Canonical form of an item key.
pub fn normalize_item_key(key: &str) -> String {
    key.trim().trim_start_matches('@').to_lowercase()
}

/// The single token an item mention occupies in utterance text.
pub fn item_placeholder(key: &str) -> String {
    format!("@{}", normalize_item_key(key))
}

/// The set of recommendable items, indexed densely in sorted key order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Catalog {
    items: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl From<Vec<String>> for Catalog {
    fn from(items: Vec<String>) -> Self {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), ItemId(i as u32)))
            .collect();
        Self { items, index }
    }
}

impl From<Catalog> for Vec<String> {
    fn from(c: Catalog) -> Self {
        c.items
    }
}

impl Catalog {
    pub fn from_keys<I: IntoIterator<Item = S>, S: AsRef<str>>(keys: I) -> Self {
        let set: BTreeSet<String> = keys
            .into_iter()
            .map(|k| normalize_item_key(k.as_ref()))
            .filter(|k| !k.is_empty())
            .collect();
        Self::from(set.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, key: &str) -> ItemId {
        self.index
            .get(&normalize_item_key(key))
            .copied()
            .unwrap_or(ItemId::UNKNOWN)
    }

    pub fn key(&self, id: ItemId) -> Option<&str> {
        self.items.get(id.index()).map(String::as_str)
    }

    pub fn keys(&self) -> &[String] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMention {
    pub item: ItemId,
    /// Normalized item key, kept even when `item` is unknown so review
    /// lookup still works.
    pub key: String,
    pub attitude: Attitude,
    /// Token index of the item placeholder, if it occurs in the text.
    pub position: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Role,
    pub tokens: Vec<TokenId>,
    pub item_mentions: Vec<ItemMention>,
    pub entity_mentions: Vec<EntityId>,
}

impl Utterance {
    pub fn mention_of(&self, key: &str) -> Option<&ItemMention> {
        let key = normalize_item_key(key);
        self.item_mentions.iter().find(|m| m.key == key)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecTarget {
    pub turn: usize,
    pub item: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Utterance>,
    /// Recommendation targets ordered by turn; a turn may carry several.
    pub rec_targets: Vec<RecTarget>,
}

// Wire records (dialogues.jsonl).

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub item: String,
    #[serde(default)]
    pub attitude: Attitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<MentionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub turn: usize,
    pub item: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
    #[serde(default)]
    pub targets: Vec<TargetRecord>,
}

/// Parses and structurally validates `dialogues.jsonl`. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn read_dialogue_records(path: &Path) -> Result<Vec<DialogueRecord>, CorpusError> {
    let reader = open_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        validate_record(&rec).map_err(|message| CorpusError::Malformed {
            line: line_no,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn validate_record(rec: &DialogueRecord) -> Result<(), String> {
    if rec.turns.is_empty() {
        return Err(format!("dialogue {} has no turns", rec.id));
    }
    for (i, turn) in rec.turns.iter().enumerate() {
        let expected = if i % 2 == 0 {
            Role::Seeker
        } else {
            Role::Recommender
        };
        if turn.role != expected {
            return Err(format!(
                "dialogue {}: turn {i} is {:?}, expected {:?} (roles alternate starting with seeker)",
                rec.id, turn.role, expected
            ));
        }
        if tokenize(&turn.text).is_empty() {
            return Err(format!("dialogue {}: turn {i} has no tokens", rec.id));
        }
    }
    for t in &rec.targets {
        let Some(turn) = rec.turns.get(t.turn) else {
            return Err(format!(
                "dialogue {}: target turn {} out of range",
                rec.id, t.turn
            ));
        };
        if turn.role != Role::Recommender {
            return Err(format!(
                "dialogue {}: target turn {} is not a recommender turn",
                rec.id, t.turn
            ));
        }
        let key = normalize_item_key(&t.item);
        if !turn
            .mentions
            .iter()
            .any(|m| normalize_item_key(&m.item) == key)
        {
            return Err(format!(
                "dialogue {}: target {} is not mentioned in turn {}",
                rec.id, t.item, t.turn
            ));
        }
    }
    Ok(())
}

/// Result of [`load_dialogues`] with ingestion counters.
#[derive(Clone, Debug, Default)]
pub struct DialogueLoad {
    pub dialogues: Vec<Dialogue>,
    /// Item mentions or targets outside the catalog (mapped to
    /// [`ItemId::UNKNOWN`]).
    pub unknown_items: usize,
    /// Tokens mapped to UNK.
    pub unknown_tokens: usize,
    /// Utterances cut to [`MAX_CONTEXT_TOKENS`].
    pub truncated_utterances: usize,
}

/// Converts validated records into [`Dialogue`]s against a fixed vocabulary
/// and catalog. Entity mentions are linked when a graph is given.
pub fn build_dialogues(
    records: &[DialogueRecord],
    vocab: &Vocabulary,
    catalog: &Catalog,
    kg: Option<&KnowledgeGraph>,
) -> DialogueLoad {
    let mut load = DialogueLoad::default();
    for rec in records {
        let mut turns = Vec::with_capacity(rec.turns.len());
        for turn in &rec.turns {
            let mut words = tokenize(&turn.text);
            if words.len() > MAX_CONTEXT_TOKENS {
                words.drain(..words.len() - MAX_CONTEXT_TOKENS);
                load.truncated_utterances += 1;
            }
            let tokens = vocab.encode(&words);
            load.unknown_tokens += tokens.iter().filter(|&&t| t == UNK).count();
            let item_mentions = turn
                .mentions
                .iter()
                .map(|m| {
                    let key = normalize_item_key(&m.item);
                    let item = catalog.id(&key);
                    if !item.is_known() {
                        load.unknown_items += 1;
                    }
                    let ph = item_placeholder(&key);
                    ItemMention {
                        position: words.iter().position(|w| *w == ph),
                        item,
                        key,
                        attitude: m.attitude,
                    }
                })
                .collect();
            let entity_mentions = kg.map(|g| g.link_entities(&words)).unwrap_or_default();
            turns.push(Utterance {
                speaker: turn.role,
                tokens,
                item_mentions,
                entity_mentions,
            });
        }
        let mut rec_targets: Vec<RecTarget> = rec
            .targets
            .iter()
            .map(|t| {
                let item = catalog.id(&t.item);
                if !item.is_known() {
                    load.unknown_items += 1;
                }
                RecTarget { turn: t.turn, item }
            })
            .collect();
        rec_targets.sort_by_key(|t| t.turn);
        load.dialogues.push(Dialogue {
            id: rec.id.clone(),
            turns,
            rec_targets,
        });
    }
    load
}

/// Reads `dialogues.jsonl` and builds dialogues in one step.
pub fn load_dialogues(
    path: &Path,
    vocab: &Vocabulary,
    catalog: &Catalog,
    kg: Option<&KnowledgeGraph>,
) -> Result<DialogueLoad, CorpusError> {
    let records = read_dialogue_records(path)?;
    Ok(build_dialogues(&records, vocab, catalog, kg))
}

/// Flattens turns into one token stream, `SEP` between turns, keeping the
/// most recent `max_tokens`.
pub fn flatten_context(turns: &[Vec<TokenId>], max_tokens: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (i, t) in turns.iter().enumerate() {
        if i > 0 {
            out.push(super::vocab::SEP);
        }
        out.extend_from_slice(t);
    }
    if out.len() > max_tokens {
        out.drain(..out.len() - max_tokens);
    }
    out
}
