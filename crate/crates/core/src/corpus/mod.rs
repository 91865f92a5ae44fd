//! Ingestion and validation of dialogues, reviews and the knowledge graph.
//!
//! File formats (all UTF-8, one record per line):
//!
//! * `dialogues.jsonl`: `{id, turns:[{role, text, mentions:[{item, attitude}]}], targets:[{turn, item}]}`
//! * `reviews.jsonl`: `{item, text, rating, helpful}` plus optional numeric `id`
//! * `kg.tsv`: `head \t relation \t tail`
//! * `lexicon.tsv`: `surface \t entity`
//!
//! Items appear in dialogue text as single `@<item>` placeholder tokens.

pub mod dialogue;
pub mod fixture;
pub mod kg;
pub mod review;
pub mod text;
pub mod vocab;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

pub use dialogue::{
    build_dialogues, flatten_context, item_placeholder, load_dialogues, normalize_item_key,
    read_dialogue_records, Attitude, Catalog, Dialogue, DialogueLoad, DialogueRecord, ItemId,
    ItemMention, MentionRecord, RecTarget, Role, TargetRecord, TurnRecord, Utterance,
    MAX_CONTEXT_TOKENS,
};
pub use kg::{load_kg, EntityId, EntityLinker, EntitySpan, KgLoad, KnowledgeGraph, RelationId, Triple};
pub use review::{
    load_reviews, Review, ReviewDatabase, ReviewId, ReviewLoad, ReviewRecord,
    MAX_REVIEWS_PER_ITEM,
};
pub use text::{split_sentences, tokenize};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, SEP, UNK};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub(crate) fn open_lines(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CorpusError::io(path, e))
}

/// Token streams of every dialogue turn and review sentence, for building a
/// shared vocabulary.
pub fn corpus_token_streams(records: &[DialogueRecord], reviews: &ReviewDatabase) -> Vec<Vec<String>> {
    let mut streams: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| r.turns.iter().map(|t| tokenize(&t.text)))
        .collect();
    streams.extend(reviews.reviews().flat_map(|r| r.sentences.iter().cloned()));
    streams
}

/// Catalog of every item mentioned in the dialogues or reviewed.
pub fn catalog_from_corpus(records: &[DialogueRecord], reviews: &ReviewDatabase) -> Catalog {
    let mentioned = records
        .iter()
        .flat_map(|r| r.turns.iter().flat_map(|t| t.mentions.iter().map(|m| m.item.clone())))
        .chain(records.iter().flat_map(|r| r.targets.iter().map(|t| t.item.clone())));
    Catalog::from_keys(mentioned.chain(reviews.items().map(str::to_string)))
}
