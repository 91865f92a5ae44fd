use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dialogue::normalize_item_key;
use super::text::{split_sentences, tokenize};
use super::{open_lines, CorpusError};

/// Reviews kept per item.
pub const MAX_REVIEWS_PER_ITEM: usize = 30;

pub type ReviewId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: ReviewId,
    pub item: String,
    pub sentences: Vec<Vec<String>>,
    pub rating: u8,
    pub helpful_score: u64,
}

/// One line of `reviews.jsonl`. `id` defaults to the 0-based record index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<ReviewId>,
    pub item: String,
    pub text: String,
    pub rating: i64,
    pub helpful: u64,
}

/// Per-item review lists, each sorted by helpful score (descending, ties by
/// review id ascending) and capped at [`MAX_REVIEWS_PER_ITEM`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDatabase {
    items: BTreeMap<String, Vec<Review>>,
}

impl ReviewDatabase {
    pub fn from_reviews<I: IntoIterator<Item = Review>>(reviews: I) -> Self {
        let mut items: BTreeMap<String, Vec<Review>> = BTreeMap::new();
        for r in reviews {
            items.entry(r.item.clone()).or_default().push(r);
        }
        for list in items.values_mut() {
            list.sort_by(|a, b| {
                b.helpful_score
                    .cmp(&a.helpful_score)
                    .then_with(|| a.id.cmp(&b.id))
            });
            list.truncate(MAX_REVIEWS_PER_ITEM);
        }
        Self { items }
    }

    pub fn get(&self, item: &str) -> Option<&[Review]> {
        self.items
            .get(&normalize_item_key(item))
            .map(Vec::as_slice)
    }

    pub fn contains(&self, item: &str) -> bool {
        self.items.contains_key(&normalize_item_key(item))
    }

    /// Item keys in ascending order.
    pub fn items(&self) -> impl Iterator<Item = &str> + '_ {
        self.items.keys().map(String::as_str)
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn reviews(&self) -> impl Iterator<Item = &Review> + '_ {
        self.items.values().flatten()
    }

    pub fn review_count(&self) -> usize {
        self.items.values().map(Vec::len).sum()
    }

    pub fn find(&self, id: ReviewId) -> Option<&Review> {
        self.reviews().find(|r| r.id == id)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReviewLoad {
    pub db: ReviewDatabase,
    /// `(line, reason)` for every rejected record.
    pub rejected: Vec<(usize, String)>,
}

/// Converts a wire record, validating the rating range and text.
pub fn review_from_record(rec: &ReviewRecord, default_id: ReviewId) -> Result<Review, String> {
    if !(1..=10).contains(&rec.rating) {
        return Err(format!("rating {} outside [1,10]", rec.rating));
    }
    let item = normalize_item_key(&rec.item);
    if item.is_empty() {
        return Err("empty item key".into());
    }
    let sentences = split_sentences(&tokenize(&rec.text));
    if sentences.is_empty() {
        return Err("review has no non-empty sentence".into());
    }
    Ok(Review {
        id: rec.id.unwrap_or(default_id),
        item,
        sentences,
        rating: rec.rating as u8,
        helpful_score: rec.helpful,
    })
}

/// Reads `reviews.jsonl`. Invalid records are skipped and reported; only I/O
/// failures abort.
pub fn load_reviews(path: &Path) -> Result<ReviewLoad, CorpusError> {
    let reader = open_lines(path)?;
    let mut reviews = Vec::new();
    let mut rejected = Vec::new();
    let mut index: ReviewId = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let default_id = index;
        index += 1;
        let parsed = serde_json::from_str::<ReviewRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| review_from_record(&rec, default_id));
        match parsed {
            Ok(r) => reviews.push(r),
            Err(reason) => rejected.push((line_no, reason)),
        }
    }
    Ok(ReviewLoad {
        db: ReviewDatabase::from_reviews(reviews),
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn rec(id: u64, item: &str, helpful: u64) -> Review {
        Review {
            id,
            item: item.into(),
            sentences: vec![vec!["ok".into()]],
            rating: 7,
            helpful_score: helpful,
        }
    }

    #[test]
    fn keeps_thirty_most_helpful() {
        let db = ReviewDatabase::from_reviews((0..35).map(|i| rec(i, "m1", 100 + i)));
        let list = db.get("m1").unwrap();
        assert_eq!(list.len(), 30);
        // helpful 100..104 (ids 0..4) are the five dropped
        assert!(list.iter().all(|r| r.id >= 5));
        assert!(list.windows(2).all(|w| w[0].helpful_score >= w[1].helpful_score));
    }

    #[test]
    fn ties_order_by_review_id_matching_bruteforce() {
        let input: Vec<Review> = [(9, 3), (2, 5), (4, 3), (1, 3), (7, 5), (3, 0)]
            .iter()
            .map(|&(id, h)| rec(id, "m", h))
            .collect();
        let db = ReviewDatabase::from_reviews(input.clone());
        let got: Vec<u64> = db.get("m").unwrap().iter().map(|r| r.id).collect();
        // Oracle: repeatedly extract the max-helpful, min-id record.
        let mut pool = input;
        let mut expect = Vec::new();
        while !pool.is_empty() {
            let mut best = 0;
            for (i, r) in pool.iter().enumerate() {
                let b = &pool[best];
                if r.helpful_score > b.helpful_score
                    || (r.helpful_score == b.helpful_score && r.id < b.id)
                {
                    best = i;
                }
            }
            expect.push(pool.remove(best).id);
        }
        assert_eq!(got, expect);
        assert_eq!(got, vec![2, 7, 1, 4, 9, 3]);
    }

    #[test]
    fn item_without_reviews_is_absent() {
        let db = ReviewDatabase::from_reviews(vec![rec(0, "m1", 1)]);
        assert!(db.get("m2").is_none());
        assert!(!db.contains("m2"));
    }

    #[test]
    fn out_of_range_ratings_are_skipped_not_fatal() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"item":"m1","text":"Great. Fun!","rating":9,"helpful":4}}"#).unwrap();
        writeln!(f, r#"{{"item":"m1","text":"Bad.","rating":11,"helpful":2}}"#).unwrap();
        writeln!(f, r#"{{"item":"m1","text":"Meh.","rating":0,"helpful":2}}"#).unwrap();
        writeln!(f, r#"{{"item":"m2","text":"fine","rating":5,"helpful":1}}"#).unwrap();
        let load = load_reviews(f.path()).unwrap();
        assert_eq!(load.rejected.len(), 2);
        assert_eq!(load.rejected[0].0, 2);
        assert_eq!(load.db.review_count(), 2);
        let m1 = &load.db.get("m1").unwrap()[0];
        assert_eq!(m1.sentences.len(), 2);
        assert_eq!(m1.id, 0);
        assert_eq!(load.db.get("m2").unwrap()[0].id, 3);
    }
}
