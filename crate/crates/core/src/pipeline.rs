//! Three-stage training (sentiment, recommender, dialogue), evaluation and
//! ablation grids, driven by a TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_dialogues, catalog_from_corpus, corpus_token_streams, flatten_context, load_kg,
    load_reviews, read_dialogue_records, Catalog, CorpusError, Dialogue, DialogueRecord,
    EntityLinker, KnowledgeGraph, ReviewDatabase, Role, Vocabulary, EOS, MAX_CONTEXT_TOKENS,
};
use crate::dialogue::{
    entity_surface_tokens, DecodeMode, DialogueConfig, DialogueError, DialogueExample,
    DialogueInput, DialogueModel, DialogueVariant,
};
use crate::metrics::{self, MetricError};
use crate::nn::{AdamConfig, EncoderConfig, FitReport, Schedule};
use crate::recommender::{RecConfig, RecError, RecInstance, Recommender};
use crate::retrieval::{
    augment_dialogue, dialogue_rng, RetrievalStrategy, ReviewSet, StrategyError,
};
use crate::sentiment::{train_sentiment, SentimentConfig, SentimentError, SentimentIndex, SentimentModel};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("sentiment: {0}")]
    Sentiment(#[from] SentimentError),
    #[error("recommender: {0}")]
    Recommender(#[from] RecError),
    #[error("dialogue: {0}")]
    Dialogue(#[from] DialogueError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("stage {stage} needs the {needed} checkpoint at {path}")]
    MissingCheckpoint {
        stage: String,
        needed: String,
        path: String,
    },
    #[error("{0} checkpoint was trained on a different corpus")]
    DigestMismatch(String),
    #[error("checkpoint catalog has {checkpoint} items, evaluation corpus has {corpus}")]
    CatalogMismatch { checkpoint: usize, corpus: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sentiment,
    Recommender,
    Dialogue,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Sentiment, Stage::Recommender, Stage::Dialogue];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sentiment => "sentiment",
            Stage::Recommender => "recommender",
            Stage::Dialogue => "dialogue",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub dialogues: PathBuf,
    pub reviews: PathBuf,
    pub kg: PathBuf,
    pub lexicon: PathBuf,
    /// Reviews of unrelated products, used by the `iCorpus` strategy.
    pub irrelevant_reviews: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// `<C|R>-<S|H>-<S|W>` or `iCorpus`.
    pub strategy: String,
    pub budget: usize,
    pub link_rate: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            strategy: "C-S-S".into(),
            budget: 20,
            link_rate: 0.4,
        }
    }
}

/// Where retrieved sentences come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReviewSource {
    Items,
    Irrelevant,
}

/// Parses a strategy code. `iCorpus` draws random sentences from the
/// unrelated review corpus, ranked by sentiment, sentence-wise.
pub fn parse_strategy(code: &str, budget: usize) -> Result<(RetrievalStrategy, ReviewSource), StrategyError> {
    if code.trim().eq_ignore_ascii_case("icorpus") {
        let s: RetrievalStrategy = "R-S-S".parse()?;
        return Ok((s.with_budget(budget)?, ReviewSource::Irrelevant));
    }
    let s: RetrievalStrategy = code.parse()?;
    Ok((s.with_budget(budget)?, ReviewSource::Items))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentimentSection {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub max_len: usize,
    pub rating_threshold: i64,
    pub valid_fraction: f64,
}

impl Default for SentimentSection {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let s = SentimentConfig::default();
        Self {
            d_model: enc.d_model,
            heads: enc.heads,
            layers: enc.layers,
            ffn_dim: enc.ffn_dim,
            dropout: enc.dropout,
            epochs: s.epochs,
            max_len: s.max_len,
            rating_threshold: s.rating_threshold,
            valid_fraction: s.valid_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderSection {
    pub dim: usize,
    pub gnn_layers: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for RecommenderSection {
    fn default() -> Self {
        let r = RecConfig::default();
        Self {
            dim: r.dim,
            gnn_layers: r.gnn_layers,
            head_hidden: r.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialogueSection {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_response_len: usize,
    /// Beam width for evaluation decoding; 1 is greedy.
    pub beam: usize,
}

impl Default for DialogueSection {
    fn default() -> Self {
        let d = DialogueConfig::default();
        Self {
            d_model: d.d_model,
            heads: d.heads,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            ffn_dim: d.ffn_dim,
            dropout: d.dropout,
            max_response_len: d.max_response_len,
            beam: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    /// Share of dialogues held out for validation.
    pub valid_fraction: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 30,
            patience: 3,
            valid_fraction: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    pub use_kg: bool,
    pub review_copy: bool,
    pub review_attention: bool,
    pub review_encoder: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            use_kg: true,
            review_copy: true,
            review_attention: true,
            review_encoder: true,
        }
    }
}

impl VariantFlags {
    /// `full`, `-KG`, `-revCP`, `-revRA` or `-revEN`.
    pub fn from_name(name: &str) -> Option<Self> {
        let full = Self::default();
        Some(match name.trim() {
            "full" => full,
            "-KG" => Self { use_kg: false, ..full },
            "-revCP" => Self { review_copy: false, ..full },
            "-revRA" => Self { review_attention: false, ..full },
            "-revEN" => Self { review_encoder: false, ..full },
            _ => return None,
        })
    }

    pub fn name(&self) -> String {
        let mut off = Vec::new();
        if !self.use_kg {
            off.push("-KG");
        }
        if !self.review_copy {
            off.push("-revCP");
        }
        if !self.review_attention {
            off.push("-revRA");
        }
        if !self.review_encoder {
            off.push("-revEN");
        }
        if off.is_empty() {
            "full".into()
        } else {
            off.join("")
        }
    }

    pub fn dialogue(&self) -> DialogueVariant {
        DialogueVariant {
            review_copy: self.review_copy,
            review_attention: self.review_attention,
            review_encoder: self.review_encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<String>,
    pub budgets: Vec<usize>,
    pub strategies: Vec<String>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            variants: vec!["full".into()],
            budgets: vec![20],
            strategies: vec!["C-S-S".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_count: usize,
    pub stages: Vec<Stage>,
    pub data: DataPaths,
    pub retrieval: RetrievalSection,
    pub sentiment: SentimentSection,
    pub recommender: RecommenderSection,
    pub dialogue: DialogueSection,
    pub train: TrainSection,
    pub variant: VariantFlags,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            min_count: 1,
            stages: Stage::ALL.to_vec(),
            data: DataPaths::default(),
            retrieval: RetrievalSection::default(),
            sentiment: SentimentSection::default(),
            recommender: RecommenderSection::default(),
            dialogue: DialogueSection::default(),
            train: TrainSection::default(),
            variant: VariantFlags::default(),
            ablation: AblationGrid::default(),
        }
    }
}

/// Writes a generated fixture into `out` together with a `config.toml`
/// pointing at it through relative paths; returns the config path.
pub fn scaffold_fixture(out: &Path, fixture: &crate::corpus::fixture::FixtureConfig) -> Result<PathBuf, PipelineError> {
    let paths = crate::corpus::fixture::Fixture::generate(fixture)
        .write(out)
        .map_err(io_err(out))?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("fixture file name"));
    let cfg = RunConfig {
        data: DataPaths {
            dialogues: rel(&paths.dialogues),
            reviews: rel(&paths.reviews),
            kg: rel(&paths.kg),
            lexicon: rel(&paths.lexicon),
            irrelevant_reviews: Some(rel(&paths.irrelevant_reviews)),
        },
        out_dir: PathBuf::from("run"),
        ..RunConfig::default()
    };
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    Ok(cfg_path)
}

impl RunConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.dialogues);
        fix(&mut self.data.reviews);
        fix(&mut self.data.kg);
        fix(&mut self.data.lexicon);
        if let Some(p) = self.data.irrelevant_reviews.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        for (name, v) in [
            ("retrieval.budget", self.retrieval.budget),
            ("sentiment.d_model", self.sentiment.d_model),
            ("sentiment.heads", self.sentiment.heads),
            ("sentiment.epochs", self.sentiment.epochs),
            ("sentiment.max_len", self.sentiment.max_len),
            ("recommender.dim", self.recommender.dim),
            ("dialogue.d_model", self.dialogue.d_model),
            ("dialogue.heads", self.dialogue.heads),
            ("dialogue.ffn_dim", self.dialogue.ffn_dim),
            ("dialogue.max_response_len", self.dialogue.max_response_len),
            ("dialogue.beam", self.dialogue.beam),
            ("train.batch_size", self.train.batch_size),
            ("train.epochs", self.train.epochs),
            ("min_count", self.min_count),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.train.learning_rate <= 0.0 {
            return bad("train.learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.retrieval.link_rate) {
            return bad("retrieval.link_rate must lie in [0, 1]");
        }
        for (name, f) in [
            ("train.valid_fraction", self.train.valid_fraction),
            ("sentiment.valid_fraction", self.sentiment.valid_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        for (name, p) in [("sentiment.dropout", self.sentiment.dropout), ("dialogue.dropout", self.dialogue.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        parse_strategy(&self.retrieval.strategy, self.retrieval.budget)?;
        check_stage_order(&self.stages)?;
        Ok(())
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("{}.safetensors", stage.name()))
    }

    pub fn sentiment_config(&self) -> SentimentConfig {
        let s = &self.sentiment;
        SentimentConfig {
            encoder: EncoderConfig {
                d_model: s.d_model,
                heads: s.heads,
                layers: s.layers,
                ffn_dim: s.ffn_dim,
                dropout: s.dropout,
            },
            epochs: s.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            patience: self.train.patience,
            rating_threshold: s.rating_threshold,
            max_len: s.max_len,
            valid_fraction: s.valid_fraction,
            seed: self.seed,
        }
    }

    fn rec_config(&self) -> RecConfig {
        RecConfig {
            dim: self.recommender.dim,
            gnn_layers: if self.variant.use_kg { self.recommender.gnn_layers } else { 0 },
            head_hidden: self.recommender.head_hidden.clone(),
            seed: self.seed.wrapping_add(1),
        }
    }

    fn dialogue_config(&self) -> DialogueConfig {
        let d = &self.dialogue;
        DialogueConfig {
            d_model: d.d_model,
            heads: d.heads,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            ffn_dim: d.ffn_dim,
            dropout: d.dropout,
            max_response_len: d.max_response_len,
            variant: self.variant.dialogue(),
            seed: self.seed.wrapping_add(2),
        }
    }

    fn schedule(&self, offset: u64) -> Schedule {
        Schedule {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            seed: self.seed.wrapping_add(offset),
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.learning_rate,
            clip_norm: (self.train.clip_norm > 0.0).then_some(self.train.clip_norm),
            ..AdamConfig::default()
        }
    }

    pub fn decode_mode(&self) -> DecodeMode {
        if self.dialogue.beam > 1 {
            DecodeMode::Beam(self.dialogue.beam)
        } else {
            DecodeMode::Greedy
        }
    }
}

/// Stages must be listed without repeats in sentiment → recommender →
/// dialogue order.
pub fn check_stage_order(stages: &[Stage]) -> Result<(), PipelineError> {
    if stages.is_empty() {
        return Err(PipelineError::StageOrder("no stages selected".into()));
    }
    for w in stages.windows(2) {
        if w[0] >= w[1] {
            return Err(PipelineError::StageOrder(format!(
                "{} cannot run after {}",
                w[1].name(),
                w[0].name()
            )));
        }
    }
    Ok(())
}

/// Everything loaded from the data files.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<DialogueRecord>,
    pub reviews: ReviewDatabase,
    pub irrelevant: Option<ReviewDatabase>,
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub dialogues: Vec<Dialogue>,
    /// Hex SHA-256 over the input files.
    pub digest: String,
    pub rejected_reviews: usize,
    pub rejected_triples: usize,
}

impl Corpus {
    /// Loads and links the corpus. Without `vocab` a vocabulary is built
    /// from every dialogue turn and review sentence.
    pub fn load(data: &DataPaths, min_count: usize, vocab: Option<Vocabulary>) -> Result<Self, PipelineError> {
        for (name, p) in [
            ("data.dialogues", &data.dialogues),
            ("data.reviews", &data.reviews),
            ("data.kg", &data.kg),
            ("data.lexicon", &data.lexicon),
        ] {
            if p.as_os_str().is_empty() {
                return Err(PipelineError::Config(format!("{name} is not set")));
            }
        }
        let mut hasher = Sha256::new();
        let mut files = vec![&data.dialogues, &data.reviews, &data.kg, &data.lexicon];
        files.extend(data.irrelevant_reviews.as_ref());
        for p in files {
            let bytes = fs::read(p).map_err(io_err(p))?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        let digest = hex::encode(hasher.finalize());

        let records = read_dialogue_records(&data.dialogues)?;
        let review_load = load_reviews(&data.reviews)?;
        let kg_load = load_kg(&data.kg, &data.lexicon)?;
        let irrelevant = match &data.irrelevant_reviews {
            Some(p) => Some(load_reviews(p)?.db),
            None => None,
        };
        for (line, why) in review_load.rejected.iter().chain(&kg_load.rejected) {
            log::warn!("rejected input line {line}: {why}");
        }
        let vocab = vocab.unwrap_or_else(|| {
            let mut streams = corpus_token_streams(&records, &review_load.db);
            if let Some(db) = &irrelevant {
                streams.extend(db.reviews().flat_map(|r| r.sentences.iter().cloned()));
            }
            Vocabulary::build(streams.iter().map(Vec::as_slice), min_count)
        });
        let catalog = catalog_from_corpus(&records, &review_load.db);
        let built = build_dialogues(&records, &vocab, &catalog, Some(&kg_load.kg));
        Ok(Self {
            records,
            reviews: review_load.db,
            irrelevant,
            kg: kg_load.kg,
            vocab,
            catalog,
            dialogues: built.dialogues,
            digest,
            rejected_reviews: review_load.rejected.len(),
            rejected_triples: kg_load.rejected.len(),
        })
    }

    pub fn retrieval_db(&self, source: ReviewSource) -> Result<&ReviewDatabase, PipelineError> {
        match source {
            ReviewSource::Items => Ok(&self.reviews),
            ReviewSource::Irrelevant => self
                .irrelevant
                .as_ref()
                .ok_or_else(|| PipelineError::Config("iCorpus needs data.irrelevant_reviews".into())),
        }
    }
}

/// Deterministic train/validation assignment of a dialogue id.
pub fn is_validation_dialogue(id: &str, fraction: f64) -> bool {
    let h = Sha256::digest(id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    (u64::from_le_bytes(b) % 10_000) as f64 / 10_000.0 < fraction
}

/// Recommendation instances and response examples of one dialogue.
/// Turn `t` sees turns before `t` plus reviews retrieved in them.
pub fn dialogue_instances(
    dialogue: &Dialogue,
    reviews: &ReviewSet,
    linker: &dyn EntityLinker,
) -> (Vec<RecInstance>, Vec<DialogueExample>) {
    let entities_before = |t: usize| {
        let sentences: Vec<&[String]> = reviews.before(t).map(|e| e.sentence.tokens.as_slice()).collect();
        crate::recommender::build_entity_set(&dialogue.turns[..t], &sentences, linker)
    };
    let rec = dialogue
        .rec_targets
        .iter()
        .filter(|rt| rt.item.is_known() && rt.turn < dialogue.turns.len())
        .map(|rt| RecInstance {
            dialogue: dialogue.id.clone(),
            turn: rt.turn,
            entities: entities_before(rt.turn),
            target: rt.item,
        })
        .collect();
    let dlg = dialogue
        .turns
        .iter()
        .enumerate()
        .filter(|(t, u)| *t > 0 && u.speaker == Role::Recommender)
        .map(|(t, u)| {
            let ctx: Vec<Vec<usize>> = dialogue.turns[..t].iter().map(|u| u.tokens.clone()).collect();
            DialogueExample {
                dialogue: dialogue.id.clone(),
                turn: t,
                input: DialogueInput {
                    context: flatten_context(&ctx, MAX_CONTEXT_TOKENS),
                    reviews: reviews.token_ids_before(t),
                    entities: entities_before(t).merged(),
                },
                response: u.tokens.clone(),
            }
        })
        .collect();
    (rec, dlg)
}

/// Augmented training material for one split.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub rec: Vec<RecInstance>,
    pub dialogue: Vec<DialogueExample>,
    pub review_sentences: usize,
}

pub struct Materialized {
    pub train: SplitData,
    pub valid: SplitData,
}

/// Retrieves reviews for each dialogue and builds per-split instances.
pub fn materialize(
    corpus: &Corpus,
    cfg: &RunConfig,
    scorer: &SentimentIndex,
) -> Result<Materialized, PipelineError> {
    let (strategy, source) = parse_strategy(&cfg.retrieval.strategy, cfg.retrieval.budget)?;
    let db = corpus.retrieval_db(source)?;
    let mut out = Materialized {
        train: SplitData::default(),
        valid: SplitData::default(),
    };
    for d in &corpus.dialogues {
        let mut rng = dialogue_rng(cfg.seed, &d.id);
        let (_, set) = augment_dialogue(d, db, scorer, &corpus.vocab, &strategy, cfg.retrieval.link_rate, &mut rng);
        let (rec, dlg) = dialogue_instances(d, &set, &corpus.kg);
        let split = if is_validation_dialogue(&d.id, cfg.train.valid_fraction) {
            &mut out.valid
        } else {
            &mut out.train
        };
        split.rec.extend(rec);
        split.dialogue.extend(dlg);
        split.review_sentences += set.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecMetrics {
    pub instances: usize,
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "recall@50")]
    pub recall_at_50: f64,
    pub rec_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    pub responses: usize,
    pub ppl: f64,
    pub gen_loss: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub dist4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub recommendation: Option<RecMetrics>,
    pub generation: Option<GenMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub train: Vec<f64>,
    pub valid: Vec<f64>,
    pub best_epoch: usize,
}

impl From<&FitReport> for StageLosses {
    fn from(r: &FitReport) -> Self {
        Self {
            train: r.train_losses.clone(),
            valid: r.valid_losses.clone(),
            best_epoch: r.best_epoch,
        }
    }
}

/// Everything in `metrics.json`. Wall-clock times go to `timing.json` so
/// that this file is reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corpus_digest: String,
    pub variant: String,
    pub strategy: String,
    pub budget: usize,
    pub train: SplitMetrics,
    pub valid: Option<SplitMetrics>,
    pub losses: Losses,
    pub recommender_parameters: usize,
    pub dialogue_parameters: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub sentiment: Option<StageLosses>,
    pub recommender: Option<StageLosses>,
    pub dialogue: Option<StageLosses>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub sentiment_secs: Option<f64>,
    pub recommender_secs: Option<f64>,
    pub dialogue_secs: Option<f64>,
    pub evaluation_secs: f64,
    pub total_secs: f64,
}

pub fn recommendation_metrics(rec: &Recommender, instances: &[RecInstance]) -> Result<Option<RecMetrics>, PipelineError> {
    if instances.is_empty() {
        return Ok(None);
    }
    let states = rec.entity_matrix();
    let preds: Vec<Vec<f64>> = instances
        .iter()
        .map(|i| rec.recommend_with(&states, &i.entities))
        .collect();
    let ranked: Vec<Vec<usize>> = preds.iter().map(|p| metrics::top_k(p, 50)).collect();
    let targets: Vec<usize> = instances.iter().map(|i| i.target.index()).collect();
    Ok(Some(RecMetrics {
        instances: instances.len(),
        recall_at_1: metrics::recall_at_k(&ranked, &targets, 1),
        recall_at_10: metrics::recall_at_k(&ranked, &targets, 10),
        recall_at_50: metrics::recall_at_k(&ranked, &targets, 50),
        rec_loss: metrics::rec_loss(&preds, &targets)?,
    }))
}

/// Strips a trailing EOS from generated tokens.
pub fn response_tokens(mut generated: Vec<usize>) -> Vec<usize> {
    if generated.last() == Some(&EOS) {
        generated.pop();
    }
    generated
}

pub fn generation_metrics(
    dlg: &DialogueModel,
    examples: &[DialogueExample],
    mode: DecodeMode,
) -> Result<Option<GenMetrics>, PipelineError> {
    if examples.is_empty() {
        return Ok(None);
    }
    let probs = dlg.token_probabilities(examples)?;
    let max_len = dlg.config().max_response_len;
    let generated = examples
        .iter()
        .map(|ex| dlg.generate(&ex.input, max_len, mode).map(response_tokens))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(GenMetrics {
        responses: examples.len(),
        ppl: metrics::perplexity(&probs)?,
        gen_loss: metrics::gen_loss(&probs),
        dist2: metrics::distinct_n(&generated, 2),
        dist3: metrics::distinct_n(&generated, 3),
        dist4: metrics::distinct_n(&generated, 4),
    }))
}

fn split_metrics(
    rec: &Recommender,
    dlg: Option<&DialogueModel>,
    split: &SplitData,
    mode: DecodeMode,
) -> Result<SplitMetrics, PipelineError> {
    Ok(SplitMetrics {
        recommendation: recommendation_metrics(rec, &split.rec)?,
        generation: match dlg {
            Some(d) => generation_metrics(d, &split.dialogue, mode)?,
            None => None,
        },
    })
}

/// Paths and results of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: MetricsReport,
    pub timing: Timing,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    corpus_digest: &'a str,
    stages_trained: &'a [Stage],
    checkpoints: Vec<String>,
    dialogues: usize,
    train_rec_instances: usize,
    valid_rec_instances: usize,
    train_responses: usize,
    valid_responses: usize,
    review_sentences: usize,
    rejected_reviews: usize,
    rejected_triples: usize,
}

fn check_digest(stage: Stage, found: Option<String>, expected: &str) -> Result<(), PipelineError> {
    match found {
        Some(d) if d != expected => Err(PipelineError::DigestMismatch(stage.name().into())),
        _ => Ok(()),
    }
}

fn require(cfg: &RunConfig, stage: Stage, needed: Stage) -> Result<PathBuf, PipelineError> {
    let path = cfg.checkpoint(needed);
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingCheckpoint {
            stage: stage.name().into(),
            needed: needed.name().into(),
            path: path.display().to_string(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs the configured stages, writes checkpoints, `metrics.json`,
/// `timing.json` and `run_manifest.json` into `out_dir`.
///
/// Stages left out of `cfg.stages` are loaded from existing checkpoints
/// when a later stage needs them.
pub fn train_all(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let corpus = Corpus::load(&cfg.data, cfg.min_count, None)?;
    let runs = |s: Stage| cfg.stages.contains(&s);
    let mut timing = Timing::default();
    let mut losses = Losses::default();

    let sentiment = if runs(Stage::Sentiment) {
        let t0 = Instant::now();
        let (model, report) = train_sentiment(&corpus.reviews, &cfg.sentiment_config())?;
        model.save(&cfg.checkpoint(Stage::Sentiment), Some(&corpus.digest))?;
        losses.sentiment = Some(StageLosses {
            train: report.train_losses,
            valid: report.valid_losses,
            best_epoch: 0,
        });
        timing.sentiment_secs = Some(t0.elapsed().as_secs_f64());
        model
    } else {
        let first = *cfg.stages.first().expect("validated");
        let (model, digest) = SentimentModel::load(&require(cfg, first, Stage::Sentiment)?)?;
        check_digest(Stage::Sentiment, digest, &corpus.digest)?;
        model
    };

    let (_, source) = parse_strategy(&cfg.retrieval.strategy, cfg.retrieval.budget)?;
    let scorer = SentimentIndex::build(corpus.retrieval_db(source)?, &sentiment)?;
    let data = materialize(&corpus, cfg, &scorer)?;

    let rec = if runs(Stage::Recommender) {
        let t0 = Instant::now();
        let mut rec = Recommender::new(&corpus.kg, corpus.catalog.clone(), cfg.rec_config())?;
        let report = rec.train(&data.train.rec, &data.valid.rec, &cfg.schedule(11), cfg.adam())?;
        rec.save(&cfg.checkpoint(Stage::Recommender), Some(&corpus.digest))?;
        losses.recommender = Some((&report).into());
        timing.recommender_secs = Some(t0.elapsed().as_secs_f64());
        rec
    } else {
        let path = if runs(Stage::Dialogue) {
            require(cfg, Stage::Dialogue, Stage::Recommender)?
        } else {
            cfg.checkpoint(Stage::Recommender)
        };
        if !path.exists() {
            return finish_without_models(cfg, &corpus, &data, losses, timing, started);
        }
        let (rec, digest) = Recommender::load(&path, &corpus.kg)?;
        check_digest(Stage::Recommender, digest, &corpus.digest)?;
        rec
    };

    let dlg = if runs(Stage::Dialogue) {
        let t0 = Instant::now();
        let mut dlg = DialogueModel::new(
            corpus.vocab.clone(),
            rec.entity_matrix(),
            entity_surface_tokens(&corpus.kg, &corpus.vocab),
            cfg.dialogue_config(),
        )?;
        let report = dlg.train(&data.train.dialogue, &data.valid.dialogue, &cfg.schedule(22), cfg.adam());
        dlg.save(&cfg.checkpoint(Stage::Dialogue), Some(&corpus.digest))?;
        losses.dialogue = Some((&report).into());
        timing.dialogue_secs = Some(t0.elapsed().as_secs_f64());
        Some(dlg)
    } else {
        let path = cfg.checkpoint(Stage::Dialogue);
        if path.exists() {
            let (dlg, digest) = DialogueModel::load(&path)?;
            check_digest(Stage::Dialogue, digest, &corpus.digest)?;
            Some(dlg)
        } else {
            None
        }
    };

    let t0 = Instant::now();
    let mode = cfg.decode_mode();
    let metrics = MetricsReport {
        corpus_digest: corpus.digest.clone(),
        variant: cfg.variant.name(),
        strategy: cfg.retrieval.strategy.clone(),
        budget: cfg.retrieval.budget,
        train: split_metrics(&rec, dlg.as_ref(), &data.train, mode)?,
        valid: if data.valid.rec.is_empty() && data.valid.dialogue.is_empty() {
            None
        } else {
            Some(split_metrics(&rec, dlg.as_ref(), &data.valid, mode)?)
        },
        losses,
        recommender_parameters: rec.num_parameters(),
        dialogue_parameters: dlg.as_ref().map(DialogueModel::num_parameters),
    };
    timing.evaluation_secs = t0.elapsed().as_secs_f64();
    timing.total_secs = started.elapsed().as_secs_f64();
    write_outputs(cfg, &corpus, &data, metrics, timing)
}

fn finish_without_models(
    cfg: &RunConfig,
    corpus: &Corpus,
    data: &Materialized,
    losses: Losses,
    mut timing: Timing,
    started: Instant,
) -> Result<RunOutcome, PipelineError> {
    timing.total_secs = started.elapsed().as_secs_f64();
    let empty = SplitMetrics {
        recommendation: None,
        generation: None,
    };
    let metrics = MetricsReport {
        corpus_digest: corpus.digest.clone(),
        variant: cfg.variant.name(),
        strategy: cfg.retrieval.strategy.clone(),
        budget: cfg.retrieval.budget,
        train: empty,
        valid: None,
        losses,
        recommender_parameters: 0,
        dialogue_parameters: None,
    };
    write_outputs(cfg, corpus, data, metrics, timing)
}

fn write_outputs(
    cfg: &RunConfig,
    corpus: &Corpus,
    data: &Materialized,
    metrics: MetricsReport,
    timing: Timing,
) -> Result<RunOutcome, PipelineError> {
    let checkpoints: Vec<PathBuf> = Stage::ALL
        .iter()
        .map(|&s| cfg.checkpoint(s))
        .filter(|p| p.exists())
        .collect();
    let metrics_path = cfg.out_dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    write_json(&cfg.out_dir.join("timing.json"), &timing)?;
    let manifest = Manifest {
        config: cfg,
        corpus_digest: &corpus.digest,
        stages_trained: &cfg.stages,
        checkpoints: checkpoints.iter().map(|p| p.display().to_string()).collect(),
        dialogues: corpus.dialogues.len(),
        train_rec_instances: data.train.rec.len(),
        valid_rec_instances: data.valid.rec.len(),
        train_responses: data.train.dialogue.len(),
        valid_responses: data.valid.dialogue.len(),
        review_sentences: data.train.review_sentences + data.valid.review_sentences,
        rejected_reviews: corpus.rejected_reviews,
        rejected_triples: corpus.rejected_triples,
    };
    write_json(&cfg.out_dir.join("run_manifest.json"), &manifest)?;
    Ok(RunOutcome {
        metrics,
        timing,
        metrics_path,
        checkpoints,
    })
}

/// Trained models loaded from a run directory.
pub struct Checkpoints {
    pub sentiment: SentimentModel,
    pub recommender: Recommender,
    pub dialogue: DialogueModel,
    pub digest: Option<String>,
}

impl Checkpoints {
    pub fn load(dir: &Path, kg: &KnowledgeGraph) -> Result<Self, PipelineError> {
        let path = |s: Stage| dir.join(format!("{}.safetensors", s.name()));
        for s in Stage::ALL {
            if !path(s).exists() {
                return Err(PipelineError::MissingCheckpoint {
                    stage: "evaluate".into(),
                    needed: s.name().into(),
                    path: path(s).display().to_string(),
                });
            }
        }
        let (sentiment, digest) = SentimentModel::load(&path(Stage::Sentiment))?;
        let (recommender, _) = Recommender::load(&path(Stage::Recommender), kg)?;
        let (dialogue, _) = DialogueModel::load(&path(Stage::Dialogue))?;
        Ok(Self {
            sentiment,
            recommender,
            dialogue,
            digest,
        })
    }
}

/// Scores saved checkpoints of `cfg.out_dir` on the configured corpus and
/// writes `eval_metrics.json`. The corpus is encoded with the checkpoint
/// vocabulary; its catalog must match the recommender's.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricsReport, PipelineError> {
    cfg.validate()?;
    let dlg_path = cfg.checkpoint(Stage::Dialogue);
    if !dlg_path.exists() {
        return Err(PipelineError::MissingCheckpoint {
            stage: "evaluate".into(),
            needed: Stage::Dialogue.name().into(),
            path: dlg_path.display().to_string(),
        });
    }
    let (dlg, _) = DialogueModel::load(&dlg_path)?;
    let corpus = Corpus::load(&cfg.data, cfg.min_count, Some(dlg.vocab().clone()))?;
    let rec_path = require(cfg, Stage::Dialogue, Stage::Recommender)?;
    let catalog = Recommender::checkpoint_catalog(&rec_path)?;
    if catalog != corpus.catalog {
        return Err(PipelineError::CatalogMismatch {
            checkpoint: catalog.len(),
            corpus: corpus.catalog.len(),
        });
    }
    let models = Checkpoints::load(&cfg.out_dir.join("checkpoints"), &corpus.kg)?;
    if models.digest.as_deref().is_some_and(|d| d != corpus.digest) {
        log::warn!("evaluating on a corpus that differs from the training corpus");
    }
    let (_, source) = parse_strategy(&cfg.retrieval.strategy, cfg.retrieval.budget)?;
    let scorer = SentimentIndex::build(corpus.retrieval_db(source)?, &models.sentiment)?;
    let data = materialize(&corpus, cfg, &scorer)?;
    let mode = cfg.decode_mode();
    let report = MetricsReport {
        corpus_digest: corpus.digest.clone(),
        variant: cfg.variant.name(),
        strategy: cfg.retrieval.strategy.clone(),
        budget: cfg.retrieval.budget,
        train: split_metrics(&models.recommender, Some(&models.dialogue), &data.train, mode)?,
        valid: if data.valid.rec.is_empty() && data.valid.dialogue.is_empty() {
            None
        } else {
            Some(split_metrics(&models.recommender, Some(&models.dialogue), &data.valid, mode)?)
        },
        losses: Losses::default(),
        recommender_parameters: models.recommender.num_parameters(),
        dialogue_parameters: Some(models.dialogue.num_parameters()),
    };
    write_json(&cfg.out_dir.join("eval_metrics.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub strategy: String,
    pub budget: usize,
    pub split: String,
    #[serde(rename = "recall@1")]
    pub recall_at_1: Option<f64>,
    #[serde(rename = "recall@10")]
    pub recall_at_10: Option<f64>,
    #[serde(rename = "recall@50")]
    pub recall_at_50: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    pub dist4: Option<f64>,
    pub ppl: Option<f64>,
    pub recommender_parameters: usize,
    pub dialogue_parameters: Option<usize>,
}

impl AblationRow {
    fn from_report(m: &MetricsReport) -> Self {
        let (split, s) = match &m.valid {
            Some(v) => ("valid", v),
            None => ("train", &m.train),
        };
        let r = s.recommendation.as_ref();
        let g = s.generation.as_ref();
        Self {
            variant: m.variant.clone(),
            strategy: m.strategy.clone(),
            budget: m.budget,
            split: split.into(),
            recall_at_1: r.map(|r| r.recall_at_1),
            recall_at_10: r.map(|r| r.recall_at_10),
            recall_at_50: r.map(|r| r.recall_at_50),
            dist2: g.map(|g| g.dist2),
            dist3: g.map(|g| g.dist3),
            dist4: g.map(|g| g.dist4),
            ppl: g.map(|g| g.ppl),
            recommender_parameters: m.recommender_parameters,
            dialogue_parameters: m.dialogue_parameters,
        }
    }
}

fn cell_dir_name(variant: &str, strategy: &str, budget: usize) -> String {
    let clean: String = format!("{variant}_{strategy}_{budget}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    clean.trim_matches('-').to_string()
}

/// One full run per (variant, budget, strategy) cell under
/// `out_dir/ablation/`, sharing the first cell's sentiment checkpoint.
/// Writes `out_dir/ablation.csv`.
pub fn run_ablation(cfg: &RunConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>, PipelineError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for v in &grid.variants {
        let flags = VariantFlags::from_name(v)
            .ok_or_else(|| PipelineError::Config(format!("unknown variant '{v}'")))?;
        for &b in &grid.budgets {
            for s in &grid.strategies {
                parse_strategy(s, b)?;
                cells.push((flags, s.clone(), b));
            }
        }
    }
    if cells.is_empty() {
        return Err(PipelineError::Config("ablation grid is empty".into()));
    }
    let root = cfg.out_dir.join("ablation");
    let mut rows = Vec::with_capacity(cells.len());
    let mut shared_sentiment: Option<PathBuf> = None;
    for (flags, strategy, budget) in cells {
        let mut cell = cfg.clone();
        cell.variant = flags;
        cell.retrieval.strategy = strategy.clone();
        cell.retrieval.budget = budget;
        cell.out_dir = root.join(cell_dir_name(&flags.name(), &strategy, budget));
        cell.stages = Stage::ALL.to_vec();
        if let Some(src) = &shared_sentiment {
            let dst = cell.checkpoint(Stage::Sentiment);
            let dir = dst.parent().expect("checkpoint dir");
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            fs::copy(src, &dst).map_err(io_err(&dst))?;
            cell.stages = vec![Stage::Recommender, Stage::Dialogue];
        }
        log::info!("ablation cell {} {} {}", flags.name(), strategy, budget);
        let outcome = train_all(&cell)?;
        shared_sentiment.get_or_insert_with(|| cell.checkpoint(Stage::Sentiment));
        rows.push(AblationRow::from_report(&outcome.metrics));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}
