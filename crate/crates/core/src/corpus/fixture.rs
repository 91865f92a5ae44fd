//! Seeded synthetic corpus in the ingestion formats.
//!
//! Items carry one genre, one actor and one director; about 40% of items
//! receive reviews. Mention attitudes follow the liked / disliked /
//! did-not-say mix of the movie-dialogue corpus this system targets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialogue::{Attitude, DialogueRecord, MentionRecord, Role, TargetRecord, TurnRecord};
use super::review::ReviewRecord;

const GENRES: [&str; 10] = [
    "comedy", "horror", "thriller", "romance", "drama", "western", "musical", "documentary",
    "animation", "fantasy",
];
const FIRST: [&str; 10] = [
    "ava", "liam", "nora", "omar", "iris", "felix", "maya", "hugo", "lena", "theo",
];
const LAST: [&str; 10] = [
    "stone", "frost", "reyes", "okafor", "lund", "moreau", "vance", "castell", "brandt", "quill",
];
const POSITIVE: [&str; 6] = ["brilliant", "wonderful", "moving", "clever", "gripping", "charming"];
const NEGATIVE: [&str; 6] = ["boring", "awful", "clumsy", "dull", "tedious", "messy"];
const FOODS: [&str; 5] = ["pasta", "curry", "ramen", "tacos", "burger"];

/// Shares of liked, disliked and did-not-say mention labels.
pub const ATTITUDE_MIX: [f64; 3] = [0.812, 0.049, 0.139];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub dialogues: usize,
    pub items: usize,
    /// Non-item entities (genres, actors, directors in equal thirds).
    pub attributes: usize,
    /// Fraction of items that receive reviews.
    pub review_link_fraction: f64,
    pub min_reviews: usize,
    pub max_reviews: usize,
    /// Seeker/recommender exchanges per dialogue, inclusive range.
    pub min_exchanges: usize,
    pub max_exchanges: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            dialogues: 20,
            items: 50,
            attributes: 30,
            review_link_fraction: 0.4,
            min_reviews: 3,
            max_reviews: 6,
            min_exchanges: 2,
            max_exchanges: 3,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
struct ItemFacts {
    key: String,
    genre: usize,
    actor: usize,
    director: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Fixture {
    pub dialogues: Vec<DialogueRecord>,
    pub reviews: Vec<ReviewRecord>,
    /// Off-topic (food) reviews for the irrelevant-corpus setting.
    pub irrelevant_reviews: Vec<ReviewRecord>,
    pub triples: Vec<(String, String, String)>,
    pub lexicon: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixturePaths {
    pub dialogues: PathBuf,
    pub reviews: PathBuf,
    pub irrelevant_reviews: PathBuf,
    pub kg: PathBuf,
    pub lexicon: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dialogues: dir.join("dialogues.jsonl"),
            reviews: dir.join("reviews.jsonl"),
            irrelevant_reviews: dir.join("irrelevant_reviews.jsonl"),
            kg: dir.join("kg.tsv"),
            lexicon: dir.join("lexicon.tsv"),
        }
    }
}

fn person(i: usize) -> String {
    format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len() + i) % LAST.len()])
}

struct Names {
    genres: Vec<String>,
    actors: Vec<String>,
    directors: Vec<String>,
}

impl Names {
    fn new(attributes: usize) -> Self {
        let per = (attributes / 3).max(1);
        let genres = (0..per)
            .map(|i| match GENRES.get(i) {
                Some(g) => g.to_string(),
                None => format!("genre{i}"),
            })
            .collect();
        let actors = (0..per).map(person).collect();
        let directors = (0..per).map(|i| person(i + 50)).collect();
        Self {
            genres,
            actors,
            directors,
        }
    }

    fn entity(kind: &str, surface: &str) -> String {
        format!("{kind}:{}", surface.replace(' ', "_"))
    }
}

fn sample_attitude(rng: &mut ChaCha8Rng) -> Attitude {
    let x: f64 = rng.random();
    if x < ATTITUDE_MIX[0] {
        Attitude::Liked
    } else if x < ATTITUDE_MIX[0] + ATTITUDE_MIX[1] {
        Attitude::Disliked
    } else {
        Attitude::DidNotSay
    }
}

impl Fixture {
    pub fn generate(cfg: &FixtureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let names = Names::new(cfg.attributes);
        let items: Vec<ItemFacts> = (0..cfg.items)
            .map(|i| ItemFacts {
                key: format!("m{i}"),
                genre: rng.random_range(0..names.genres.len()),
                actor: rng.random_range(0..names.actors.len()),
                director: rng.random_range(0..names.directors.len()),
            })
            .collect();

        let mut lexicon = Vec::new();
        for g in &names.genres {
            lexicon.push((g.clone(), Names::entity("genre", g)));
        }
        for a in &names.actors {
            lexicon.push((a.clone(), Names::entity("actor", a)));
        }
        for d in &names.directors {
            lexicon.push((d.clone(), Names::entity("director", d)));
        }
        for it in &items {
            lexicon.push((format!("@{}", it.key), it.key.clone()));
        }

        let mut triples = Vec::new();
        for it in &items {
            triples.push((
                it.key.clone(),
                "genre".to_string(),
                Names::entity("genre", &names.genres[it.genre]),
            ));
            triples.push((
                it.key.clone(),
                "starring".to_string(),
                Names::entity("actor", &names.actors[it.actor]),
            ));
            triples.push((
                it.key.clone(),
                "directed_by".to_string(),
                Names::entity("director", &names.directors[it.director]),
            ));
        }

        let n_linked = ((cfg.items as f64) * cfg.review_link_fraction).round() as usize;
        let mut order: Vec<usize> = (0..cfg.items).collect();
        order.shuffle(&mut rng);
        let mut linked: Vec<usize> = order[..n_linked.min(cfg.items)].to_vec();
        linked.sort_unstable();

        let mut reviews = Vec::new();
        let mut next_id = 0u64;
        for &i in &linked {
            let it = &items[i];
            let n = rng.random_range(cfg.min_reviews..=cfg.max_reviews.max(cfg.min_reviews));
            for k in 0..n {
                // Alternate the first two so every linked item has both polarities.
                let positive = match k {
                    0 => true,
                    1 => false,
                    _ => rng.random_bool(0.6),
                };
                let rating = if positive {
                    rng.random_range(6..=10)
                } else {
                    rng.random_range(1..=5)
                };
                let words = if positive { &POSITIVE } else { &NEGATIVE };
                let w1 = words[rng.random_range(0..words.len())];
                let w2 = words[rng.random_range(0..words.len())];
                let genre = &names.genres[it.genre];
                let text = if rng.random_bool(0.5) {
                    format!(
                        "A {w1} {genre} film. {} was {w2} in it.",
                        names.actors[it.actor]
                    )
                } else {
                    format!(
                        "{} made a {w1} movie! The {genre} parts felt {w2}. Would say it is {w1}.",
                        names.directors[it.director]
                    )
                };
                reviews.push(ReviewRecord {
                    id: Some(next_id),
                    item: it.key.clone(),
                    text,
                    rating,
                    helpful: rng.random_range(0..20),
                });
                next_id += 1;
            }
        }

        let mut irrelevant_reviews = Vec::new();
        for (f, food) in FOODS.iter().enumerate() {
            for k in 0..3 {
                let positive = k != 1;
                let adj = if positive { "tasty" } else { "bland" };
                irrelevant_reviews.push(ReviewRecord {
                    id: Some(10_000 + (f * 3 + k) as u64),
                    item: format!("f{f}"),
                    text: format!("The {food} was {adj}. Service felt slow."),
                    rating: if positive { 8 } else { 3 },
                    helpful: (k * 2) as u64,
                });
            }
        }

        let mut dialogues = Vec::new();
        for d in 0..cfg.dialogues {
            dialogues.push(Self::dialogue(d, cfg, &items, &names, &mut rng));
        }

        Self {
            dialogues,
            reviews,
            irrelevant_reviews,
            triples,
            lexicon,
        }
    }

    fn dialogue(
        d: usize,
        cfg: &FixtureConfig,
        items: &[ItemFacts],
        names: &Names,
        rng: &mut ChaCha8Rng,
    ) -> DialogueRecord {
        let exchanges = rng.random_range(cfg.min_exchanges..=cfg.max_exchanges.max(cfg.min_exchanges));
        let mut turns = Vec::new();
        let mut targets = Vec::new();
        let mut used: Vec<usize> = Vec::new();
        let pick_fresh = |rng: &mut ChaCha8Rng, used: &mut Vec<usize>, genre: Option<usize>| {
            let pool: Vec<usize> = (0..items.len())
                .filter(|i| !used.contains(i) && genre.is_none_or(|g| items[*i].genre == g))
                .collect();
            let pool = if pool.is_empty() {
                (0..items.len()).filter(|i| !used.contains(i)).collect()
            } else {
                pool
            };
            let i = pool[rng.random_range(0..pool.len())];
            used.push(i);
            i
        };

        for x in 0..exchanges {
            let seen = pick_fresh(rng, &mut used, None);
            let it = &items[seen];
            let attitude = sample_attitude(rng);
            let genre = &names.genres[it.genre];
            let text = match (x, attitude) {
                (0, Attitude::Disliked) => {
                    format!("hi ! i did not like @{} but i want a good {genre} movie", it.key)
                }
                (0, _) => format!("hi ! i am looking for a {genre} movie like @{}", it.key),
                (_, Attitude::Liked) => format!("i really liked @{} too", it.key),
                (_, Attitude::Disliked) => format!("i did not like @{} at all", it.key),
                (_, Attitude::DidNotSay) => format!("have you seen @{} ?", it.key),
            };
            turns.push(TurnRecord {
                role: Role::Seeker,
                text,
                mentions: vec![MentionRecord {
                    item: it.key.clone(),
                    attitude,
                }],
            });

            let rec = pick_fresh(rng, &mut used, Some(it.genre));
            let r = &items[rec];
            let text = if rng.random_bool(0.5) {
                format!(
                    "you should watch @{} , it stars {} .",
                    r.key, names.actors[r.actor]
                )
            } else {
                format!(
                    "try @{} by {} , a great {} .",
                    r.key, names.directors[r.director], names.genres[r.genre]
                )
            };
            targets.push(TargetRecord {
                turn: turns.len(),
                item: r.key.clone(),
            });
            turns.push(TurnRecord {
                role: Role::Recommender,
                text,
                mentions: vec![MentionRecord {
                    item: r.key.clone(),
                    attitude: sample_attitude(rng),
                }],
            });
        }
        DialogueRecord {
            id: format!("d{d}"),
            turns,
            targets,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<FixturePaths> {
        std::fs::create_dir_all(dir)?;
        let paths = FixturePaths::in_dir(dir);
        write_jsonl(&paths.dialogues, &self.dialogues)?;
        write_jsonl(&paths.reviews, &self.reviews)?;
        write_jsonl(&paths.irrelevant_reviews, &self.irrelevant_reviews)?;
        let mut kg = BufWriter::new(File::create(&paths.kg)?);
        for (h, r, t) in &self.triples {
            writeln!(kg, "{h}\t{r}\t{t}")?;
        }
        kg.flush()?;
        let mut lex = BufWriter::new(File::create(&paths.lexicon)?);
        for (s, e) in &self.lexicon {
            writeln!(lex, "{s}\t{e}")?;
        }
        lex.flush()?;
        Ok(paths)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_kg, load_reviews, read_dialogue_records};

    #[test]
    fn default_fixture_loads_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let paths = Fixture::generate(&FixtureConfig::default())
            .write(dir.path())
            .unwrap();
        let dialogues = read_dialogue_records(&paths.dialogues).unwrap();
        assert_eq!(dialogues.len(), 20);
        let reviews = load_reviews(&paths.reviews).unwrap();
        assert!(reviews.rejected.is_empty());
        assert_eq!(reviews.db.item_count(), 20);
        let kg = load_kg(&paths.kg, &paths.lexicon).unwrap();
        assert!(kg.rejected.is_empty());
        assert_eq!(kg.kg.entity_count(), 80);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = Fixture::generate(&FixtureConfig::default());
        let b = Fixture::generate(&FixtureConfig::default());
        assert_eq!(a.dialogues, b.dialogues);
        assert_eq!(a.reviews, b.reviews);
        let c = Fixture::generate(&FixtureConfig {
            seed: 43,
            ..FixtureConfig::default()
        });
        assert_ne!(a.dialogues, c.dialogues);
    }

    #[test]
    fn attitude_mix_is_roughly_reproduced() {
        let f = Fixture::generate(&FixtureConfig {
            dialogues: 400,
            ..FixtureConfig::default()
        });
        let all: Vec<Attitude> = f
            .dialogues
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| t.mentions.iter().map(|m| m.attitude)))
            .collect();
        let liked = all.iter().filter(|a| **a == Attitude::Liked).count() as f64 / all.len() as f64;
        assert!((liked - ATTITUDE_MIX[0]).abs() < 0.05, "{liked}");
    }
}
