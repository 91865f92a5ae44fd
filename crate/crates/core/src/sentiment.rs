//! Review sentiment: rating-derived labels, a transformer scorer mapping a
//! sentence to `v ∈ [0, 1]`, and utterance-level polarity from attitudes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Attitude, Review, ReviewDatabase, ReviewId, Utterance, Vocabulary};
use crate::nn::{
    self, embed_with_positions, AdamConfig, EncoderConfig, Linear, Mat, NnError, ParamId,
    ParamStore, Schedule, Tape, TransformerEncoder, Var,
};

/// Ratings strictly above this are positive.
pub const DEFAULT_RATING_THRESHOLD: i64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Score split at the midpoint: positive iff `v > 0.5`.
    pub fn of_score(v: f64) -> Self {
        if v > 0.5 {
            Self::Positive
        } else {
            Self::Negative
        }
    }

    /// The ideal score for this polarity.
    pub fn target_score(self) -> f64 {
        match self {
            Self::Positive => 1.0,
            Self::Negative => 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SentimentError {
    #[error("rating {0} outside [1,10]")]
    RatingOutOfRange(i64),
    #[error("no training sentences")]
    EmptyCorpus,
    #[error("training data contains only {0:?} examples")]
    SingleClass(Polarity),
    #[error("cannot score an empty token sequence")]
    EmptyInput,
    #[error("item '{0}' is not mentioned in the utterance")]
    NotMentioned(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn label_from_rating(rating: i64) -> Result<Polarity, SentimentError> {
    label_with_threshold(rating, DEFAULT_RATING_THRESHOLD)
}

pub fn label_with_threshold(rating: i64, threshold: i64) -> Result<Polarity, SentimentError> {
    if !(1..=10).contains(&rating) {
        return Err(SentimentError::RatingOutOfRange(rating));
    }
    Ok(if rating > threshold {
        Polarity::Positive
    } else {
        Polarity::Negative
    })
}

/// Target polarity toward `item` as annotated in the utterance. Items the
/// user expressed no attitude about count as positive.
pub fn utterance_polarity(utt: &Utterance, item: &str) -> Result<Polarity, SentimentError> {
    let m = utt
        .mention_of(item)
        .ok_or_else(|| SentimentError::NotMentioned(item.to_string()))?;
    Ok(match m.attitude {
        Attitude::Liked | Attitude::DidNotSay => Polarity::Positive,
        Attitude::Disliked => Polarity::Negative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub rating_threshold: i64,
    /// Tokens kept per sentence.
    pub max_len: usize,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SentimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 3,
            rating_threshold: DEFAULT_RATING_THRESHOLD,
            max_len: 64,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Deterministic 64-bit mix of a review id, used for the train/valid split.
pub fn id_hash(id: ReviewId) -> u64 {
    let mut z = id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// True when the review falls in the validation share.
pub fn in_validation(id: ReviewId, fraction: f64) -> bool {
    (id_hash(id) % 10_000) as f64 / 10_000.0 < fraction
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: SentimentConfig,
    vocab: Vocabulary,
    digest: Option<String>,
}

/// Transformer encoder, mean pooling, one linear unit and a sigmoid.
#[derive(Clone, Debug)]
pub struct SentimentModel {
    cfg: SentimentConfig,
    vocab: Vocabulary,
    store: ParamStore,
    embed: ParamId,
    encoder: TransformerEncoder,
    head: Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub train_size: usize,
    pub valid_size: usize,
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
struct Instance {
    ids: Vec<usize>,
    label: f64,
}

impl SentimentModel {
    pub fn new(vocab: Vocabulary, cfg: SentimentConfig) -> Result<Self, SentimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.encoder.d_model;
        let embed = store.add_uniform("sent.embed", vocab.len(), d, 0.1, &mut rng);
        let encoder = TransformerEncoder::new(&mut store, "sent.enc", cfg.encoder, &mut rng)?;
        let head = Linear::new(&mut store, "sent.head", d, 1, true, &mut rng);
        Ok(Self {
            cfg,
            vocab,
            store,
            embed,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &SentimentConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn encode_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .take(self.cfg.max_len)
            .map(|t| self.vocab.id(t.as_ref()))
            .collect()
    }

    /// `1 × 1` probability of positive sentiment.
    fn forward(&self, t: &mut Tape, ids: &[usize]) -> Result<Var, NnError> {
        let x = embed_with_positions(t, self.embed, ids);
        let h = self.encoder.forward(t, x, None)?;
        let pooled = t.mean_rows(h);
        let z = self.head.forward(t, pooled);
        Ok(t.sigmoid(z))
    }

    fn batch_loss(&self, t: &mut Tape, batch: &[&Instance]) -> Var {
        let mut probs = Vec::with_capacity(batch.len());
        for inst in batch {
            probs.push(self.forward(t, &inst.ids).expect("encoder shapes are fixed"));
        }
        let p = t.concat_rows(&probs);
        let y = Mat::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].label);
        bce(t, p, y)
    }

    /// Mean loss over a split with the parameters in `store`.
    fn eval_loss(&self, store: &ParamStore, split: &[Instance]) -> f64 {
        if split.is_empty() {
            return 0.0;
        }
        let refs: Vec<&Instance> = split.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(64) {
            let mut t = Tape::new(store);
            let l = self.batch_loss(&mut t, chunk);
            total += t.value(l)[[0, 0]] * chunk.len() as f64;
        }
        total / split.len() as f64
    }

    /// Sentiment value of a token sequence. Deterministic.
    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<f64, SentimentError> {
        if tokens.is_empty() {
            return Err(SentimentError::EmptyInput);
        }
        let ids = self.encode_ids(tokens);
        let mut t = Tape::new(&self.store);
        let p = self.forward(&mut t, &ids)?;
        Ok(t.value(p)[[0, 0]].clamp(0.0, 1.0))
    }

    pub fn save(&self, path: &Path, digest: Option<&str>) -> Result<(), SentimentError> {
        let meta = Meta {
            kind: "sentiment".into(),
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            digest: digest.map(str::to_string),
        };
        Ok(nn::checkpoint::save(path, &self.store, &meta)?)
    }

    /// Loads a checkpoint; returns the model and its recorded corpus digest.
    pub fn load(path: &Path) -> Result<(Self, Option<String>), SentimentError> {
        let archive = nn::checkpoint::Archive::load(path)?;
        let meta: Meta = archive.meta()?;
        if meta.kind != "sentiment" {
            return Err(NnError::Checkpoint(format!("expected a sentiment checkpoint, found {}", meta.kind)).into());
        }
        let mut model = Self::new(meta.vocab, meta.config)?;
        archive.restore_into(&mut model.store)?;
        Ok((model, meta.digest))
    }
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 labels `y`.
fn bce(t: &mut Tape, p: Var, y: Mat) -> Var {
    let n = y.nrows();
    let one_minus_y = y.mapv(|v| 1.0 - v);
    let ones = t.constant(Mat::ones((n, 1)));
    let q = t.sub(ones, p);
    let lp = t.log(p);
    let lq = t.log(q);
    let a = t.mul_const(lp, y);
    let b = t.mul_const(lq, one_minus_y);
    let s = t.add(a, b);
    let m = t.mean(s);
    t.scale(m, -1.0)
}

/// Trains a scorer on every review sentence, labelled by its review's rating.
/// Reviews are split into train/validation by id hash.
pub fn train_sentiment(
    db: &ReviewDatabase,
    cfg: &SentimentConfig,
) -> Result<(SentimentModel, SentimentReport), SentimentError> {
    let streams: Vec<&[String]> = db
        .reviews()
        .flat_map(|r| r.sentences.iter().map(Vec::as_slice))
        .collect();
    if streams.is_empty() {
        return Err(SentimentError::EmptyCorpus);
    }
    let vocab = Vocabulary::build(streams.iter().copied(), 1);
    let model = SentimentModel::new(vocab, cfg.clone())?;

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let (mut pos, mut neg) = (0usize, 0usize);
    for r in db.reviews() {
        let label = label_with_threshold(r.rating as i64, cfg.rating_threshold)?;
        let y = match label {
            Polarity::Positive => {
                pos += 1;
                1.0
            }
            Polarity::Negative => {
                neg += 1;
                0.0
            }
        };
        let dest = if in_validation(r.id, cfg.valid_fraction) {
            &mut valid
        } else {
            &mut train
        };
        for s in &r.sentences {
            dest.push(Instance {
                ids: model.encode_ids(s),
                label: y,
            });
        }
    }
    match (pos, neg) {
        (0, 0) => return Err(SentimentError::EmptyCorpus),
        (_, 0) => return Err(SentimentError::SingleClass(Polarity::Positive)),
        (0, _) => return Err(SentimentError::SingleClass(Polarity::Negative)),
        _ => {}
    }
    if train.is_empty() {
        std::mem::swap(&mut train, &mut valid);
    }

    let mut model = model;
    let schedule = Schedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        patience: cfg.patience,
        seed: cfg.seed,
    };
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut store = std::mem::take(&mut model.store);
    let trainable = store.ids().collect();
    let fit = {
        let view = &model;
        nn::fit(
            &mut store,
            trainable,
            adam,
            &schedule,
            &train,
            &valid,
            |t, batch| view.batch_loss(t, batch),
            |s, split| view.eval_loss(s, split),
        )
    };
    model.store = store;
    let valid_accuracy = (!valid.is_empty()).then(|| {
        let hits = valid
            .iter()
            .filter(|inst| {
                let mut t = Tape::new(&model.store);
                let p = model.forward(&mut t, &inst.ids).expect("fixed shapes");
                (t.value(p)[[0, 0]] > 0.5) == (inst.label > 0.5)
            })
            .count();
        hits as f64 / valid.len() as f64
    });
    Ok((
        model,
        SentimentReport {
            train_losses: fit.train_losses,
            valid_losses: fit.valid_losses,
            train_size: train.len(),
            valid_size: valid.len(),
            valid_accuracy,
        },
    ))
}

/// Precomputed sentiment values for every sentence of a review database.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentimentIndex {
    scores: BTreeMap<(ReviewId, usize), f64>,
}

impl SentimentIndex {
    pub fn build(db: &ReviewDatabase, model: &SentimentModel) -> Result<Self, SentimentError> {
        let mut scores = BTreeMap::new();
        for r in db.reviews() {
            for (i, s) in r.sentences.iter().enumerate() {
                scores.insert((r.id, i), model.predict(s)?);
            }
        }
        Ok(Self { scores })
    }

    pub fn from_scores(scores: BTreeMap<(ReviewId, usize), f64>) -> Self {
        Self { scores }
    }

    /// Scores sentences by a closure, e.g. a rating-based stand-in.
    pub fn from_fn<F: Fn(&Review, usize) -> f64>(db: &ReviewDatabase, f: F) -> Self {
        let mut scores = BTreeMap::new();
        for r in db.reviews() {
            for i in 0..r.sentences.len() {
                scores.insert((r.id, i), f(r, i));
            }
        }
        Self { scores }
    }

    pub fn get(&self, review: ReviewId, sentence: usize) -> Option<f64> {
        self.scores.get(&(review, sentence)).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, ItemId, ItemMention, Review, Role};

    #[test]
    fn rating_threshold_partitions_range() {
        for r in 1..=10 {
            let expect = if r > 5 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            assert_eq!(label_from_rating(r).unwrap(), expect);
        }
        assert_eq!(label_from_rating(8).unwrap(), Polarity::Positive);
        assert_eq!(label_from_rating(3).unwrap(), Polarity::Negative);
        assert_eq!(label_from_rating(5).unwrap(), Polarity::Negative);
        assert!(label_from_rating(0).is_err());
        assert!(label_from_rating(11).is_err());
    }

    fn utt(att: Attitude) -> Utterance {
        Utterance {
            speaker: Role::Seeker,
            tokens: vec![5],
            item_mentions: vec![ItemMention {
                item: ItemId(0),
                key: "m1".into(),
                attitude: att,
                position: Some(0),
            }],
            entity_mentions: vec![],
        }
    }

    #[test]
    fn attitudes_map_to_polarity() {
        assert_eq!(utterance_polarity(&utt(Attitude::Liked), "m1").unwrap(), Polarity::Positive);
        assert_eq!(utterance_polarity(&utt(Attitude::Disliked), "m1").unwrap(), Polarity::Negative);
        assert_eq!(utterance_polarity(&utt(Attitude::DidNotSay), "@M1").unwrap(), Polarity::Positive);
        assert!(utterance_polarity(&utt(Attitude::Liked), "m2").is_err());
    }

    fn review(id: u64, text: &str, rating: u8) -> Review {
        Review {
            id,
            item: format!("m{}", id % 7),
            sentences: crate::corpus::split_sentences(&tokenize(text)),
            rating,
            helpful_score: 0,
        }
    }

    fn tiny_cfg() -> SentimentConfig {
        SentimentConfig {
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                ffn_dim: 8,
                dropout: 0.0,
            },
            epochs: 2,
            ..SentimentConfig::default()
        }
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        let empty = ReviewDatabase::default();
        assert!(matches!(
            train_sentiment(&empty, &tiny_cfg()),
            Err(SentimentError::EmptyCorpus)
        ));
        let all_pos = ReviewDatabase::from_reviews((0..5).map(|i| review(i, "great fun.", 9)));
        assert!(matches!(
            train_sentiment(&all_pos, &tiny_cfg()),
            Err(SentimentError::SingleClass(Polarity::Positive))
        ));
    }

    #[test]
    fn prediction_is_a_deterministic_probability() {
        let db = ReviewDatabase::from_reviews(
            (0..10).map(|i| review(i, if i % 2 == 0 { "great fun." } else { "dull mess." }, if i % 2 == 0 { 9 } else { 2 })),
        );
        let (model, _) = train_sentiment(&db, &tiny_cfg()).unwrap();
        let toks = tokenize("great dull unseen");
        let a = model.predict(&toks).unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, model.predict(&toks).unwrap());
        assert!(model.predict::<String>(&[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_scores() {
        let db = ReviewDatabase::from_reviews(
            (0..6).map(|i| review(i, if i < 3 { "good." } else { "bad." }, if i < 3 { 8 } else { 1 })),
        );
        let (model, _) = train_sentiment(&db, &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.safetensors");
        model.save(&path, Some("abc")).unwrap();
        let (back, digest) = SentimentModel::load(&path).unwrap();
        assert_eq!(digest.as_deref(), Some("abc"));
        let toks = tokenize("good bad");
        assert_eq!(model.predict(&toks).unwrap(), back.predict(&toks).unwrap());
    }

    #[test]
    fn split_is_stable_and_roughly_proportional() {
        let n = (0..10_000u64).filter(|&i| in_validation(i, 0.1)).count();
        assert!((800..1200).contains(&n), "{n}");
        assert_eq!(in_validation(17, 0.1), in_validation(17, 0.1));
    }
}
