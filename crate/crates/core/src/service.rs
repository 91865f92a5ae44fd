//! Turn-by-turn inference over trained checkpoints and its HTTP+JSON API.
//!
//! Routes:
//!
//! * `POST /sessions` → `{session_id}`
//! * `POST /sessions/{id}/messages` with `{text}` →
//!   `{response, recommendations:[{item, score}], reviews:[{item, snippet, review_id}]}`
//! * `GET /sessions/{id}/recommendations?k=10` → `{recommendations:[{item, score}]}`
//!
//! Errors are `{code, message}` with a matching status.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::corpus::{
    flatten_context, load_kg, load_reviews, text::join_tokens, tokenize, Attitude, Catalog,
    EntityLinker, ItemMention, KnowledgeGraph, ReviewDatabase, Role, Utterance, MAX_CONTEXT_TOKENS,
};
use crate::dialogue::{DecodeMode, DialogueInput, DialogueModel};
use crate::nn::Mat;
use crate::pipeline::{parse_strategy, response_tokens, Checkpoints, PipelineError, ReviewSource, RunConfig};
use crate::recommender::{EntitySet, Recommender};
use crate::retrieval::{dialogue_rng, retrieve, RetrievalStrategy, ReviewSet, ReviewSetEntry};
use crate::sentiment::{utterance_polarity, SentimentIndex};

pub const DEFAULT_TOP_K: usize = 10;
pub const SESSION_IDLE_LIMIT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("message text is empty")]
    EmptyText,
    #[error("{0}")]
    BadRequest(String),
    #[error("no route for {0}")]
    NoRoute(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::EmptyText => "empty_text",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NoRoute(_) => "not_found",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::NoRoute(_) => StatusCode::NOT_FOUND,
            ServiceError::EmptyText | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewSnippet {
    pub item: String,
    pub snippet: String,
    pub review_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    pub response: String,
    pub recommendations: Vec<Recommendation>,
    pub reviews: Vec<ReviewSnippet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub recommendations: Vec<Recommendation>,
}

const NEGATIVE_CUES: [&str; 9] = [
    "hate", "hated", "dislike", "disliked", "awful", "boring", "worst", "terrible", "bad",
];
const POSITIVE_CUES: [&str; 10] = [
    "like", "liked", "love", "loved", "enjoy", "enjoyed", "great", "favorite", "awesome", "good",
];
const NEGATORS: [&str; 6] = ["not", "never", "didn't", "don't", "doesn't", "no"];

/// Cue-word attitude of an utterance: negative cues or a negated positive
/// cue mean disliked, a plain positive cue liked, otherwise unstated.
pub fn detect_attitude<S: AsRef<str>>(tokens: &[S]) -> Attitude {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let negated = |i: usize| toks[i.saturating_sub(2)..i].iter().any(|t| NEGATORS.contains(t));
    let mut liked = false;
    for (i, t) in toks.iter().enumerate() {
        if NEGATIVE_CUES.contains(t) {
            return Attitude::Disliked;
        }
        if POSITIVE_CUES.contains(t) {
            if negated(i) {
                return Attitude::Disliked;
            }
            liked = true;
        }
    }
    if liked {
        Attitude::Liked
    } else {
        Attitude::DidNotSay
    }
}

/// Per-conversation state.
#[derive(Clone, Debug)]
pub struct Session {
    pub turns: Vec<Utterance>,
    pub review_set: ReviewSet,
    pub entities: EntitySet,
    seen_items: BTreeSet<String>,
    pub created_at: SystemTime,
    last_used: Instant,
}

impl Default for Session {
    fn default() -> Self {
        Self {
            turns: Vec::new(),
            review_set: ReviewSet::default(),
            entities: EntitySet::default(),
            seen_items: BTreeSet::new(),
            created_at: SystemTime::now(),
            last_used: Instant::now(),
        }
    }
}

/// Frozen models plus the review corpus they retrieve from.
pub struct Engine {
    kg: KnowledgeGraph,
    reviews: ReviewDatabase,
    scorer: SentimentIndex,
    recommender: Recommender,
    entity_states: Mat,
    dialogue: DialogueModel,
    strategy: RetrievalStrategy,
    top_k: usize,
    mode: DecodeMode,
    seed: u64,
}

impl Engine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kg: KnowledgeGraph,
        reviews: ReviewDatabase,
        scorer: SentimentIndex,
        recommender: Recommender,
        dialogue: DialogueModel,
        strategy: RetrievalStrategy,
        top_k: usize,
        seed: u64,
    ) -> Self {
        let entity_states = recommender.entity_matrix();
        Self {
            kg,
            reviews,
            scorer,
            recommender,
            entity_states,
            dialogue,
            strategy,
            top_k: top_k.max(1),
            mode: DecodeMode::Greedy,
            seed,
        }
    }

    /// Loads the corpus files named in `cfg` and the checkpoints in
    /// `checkpoint_dir` (by default `cfg.out_dir/checkpoints`).
    pub fn load(cfg: &RunConfig, checkpoint_dir: Option<&Path>, top_k: usize) -> Result<Self, PipelineError> {
        let kg = load_kg(&cfg.data.kg, &cfg.data.lexicon)?.kg;
        let (strategy, source) = parse_strategy(&cfg.retrieval.strategy, cfg.retrieval.budget)?;
        let review_path = match source {
            ReviewSource::Items => &cfg.data.reviews,
            ReviewSource::Irrelevant => cfg
                .data
                .irrelevant_reviews
                .as_ref()
                .ok_or_else(|| PipelineError::Config("iCorpus needs data.irrelevant_reviews".into()))?,
        };
        let reviews = load_reviews(review_path)?.db;
        let dir = checkpoint_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.out_dir.join("checkpoints"));
        let models = Checkpoints::load(&dir, &kg)?;
        let scorer = SentimentIndex::build(&reviews, &models.sentiment)?;
        Ok(Self::new(
            kg,
            reviews,
            scorer,
            models.recommender,
            models.dialogue,
            strategy,
            top_k,
            cfg.seed,
        ))
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn catalog(&self) -> &Catalog {
        self.recommender.catalog()
    }

    fn utterance(&self, speaker: Role, words: &[String], attitude: Attitude) -> Utterance {
        let vocab = self.dialogue.vocab();
        let catalog = self.catalog();
        let item_mentions = words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.starts_with('@') && catalog.id(w).is_known())
            .map(|(i, w)| ItemMention {
                item: catalog.id(w),
                key: crate::corpus::normalize_item_key(w),
                attitude,
                position: Some(i),
            })
            .collect();
        Utterance {
            speaker,
            tokens: vocab.encode(words),
            item_mentions,
            entity_mentions: self.kg.link(words),
        }
    }

    /// Current top-`k` items (clamped to the catalog size).
    pub fn recommendations(&self, session: &Session, k: usize) -> Vec<Recommendation> {
        self.recommender
            .rank_with(&self.entity_states, &session.entities, k)
            .into_iter()
            .map(|(id, score)| Recommendation {
                item: self.catalog().key(id).unwrap_or_default().to_string(),
                score,
            })
            .collect()
    }

    /// Appends an utterance to the session, retrieving one review sentence
    /// for each item mentioned for the first time. Returns the snippets.
    pub fn observe(&self, session: &mut Session, speaker: Role, text: &str) -> Result<Vec<ReviewSnippet>, ServiceError> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(ServiceError::EmptyText);
        }
        let turn = session.turns.len();
        let utt = self.utterance(speaker, &words, detect_attitude(&words));
        let mut rng = dialogue_rng(self.seed, &format!("turn-{turn}"));
        let mut snippets = Vec::new();
        for m in &utt.item_mentions {
            if !session.seen_items.insert(m.key.clone()) {
                continue;
            }
            let polarity = utterance_polarity(&utt, &m.key).map_err(|e| ServiceError::Internal(e.to_string()))?;
            let Some(sentence) = retrieve(
                &m.key,
                polarity.target_score(),
                &self.reviews,
                &self.scorer,
                &self.strategy,
                &mut rng,
            ) else {
                continue;
            };
            session.entities.reviews.extend(self.kg.link(&sentence.tokens));
            snippets.push(ReviewSnippet {
                item: m.key.clone(),
                snippet: join_tokens(&sentence.tokens),
                review_id: sentence.source_review,
            });
            session.review_set.entries.push(ReviewSetEntry {
                turn,
                item: m.key.clone(),
                polarity,
                token_ids: self.dialogue.vocab().encode(&sentence.tokens),
                sentence,
                insert_at: m.position.map_or(0, |p| p + 1),
            });
        }
        session.entities.context.extend(utt.entity_mentions.iter().copied());
        session.turns.push(utt);
        Ok(snippets)
    }

    /// Generates the system response to the current context and appends it.
    pub fn reply(&self, session: &mut Session) -> Result<String, ServiceError> {
        let ctx: Vec<Vec<usize>> = session.turns.iter().map(|u| u.tokens.clone()).collect();
        let input = DialogueInput {
            context: flatten_context(&ctx, MAX_CONTEXT_TOKENS),
            reviews: session.review_set.token_ids_before(usize::MAX),
            entities: session.entities.merged(),
        };
        let max_len = self.dialogue.config().max_response_len;
        let generated = self
            .dialogue
            .generate(&input, max_len, self.mode)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let words = self.dialogue.vocab().decode(&response_tokens(generated));
        let system = self.utterance(Role::Recommender, &words, Attitude::DidNotSay);
        session.entities.context.extend(system.entity_mentions.iter().copied());
        session.turns.push(system);
        Ok(join_tokens(&words))
    }

    /// One user turn: retrieval for newly mentioned items, recommendation
    /// and response generation.
    pub fn step(&self, session: &mut Session, text: &str) -> Result<StepReply, ServiceError> {
        let reviews = self.observe(session, Role::Seeker, text)?;
        let recommendations = self.recommendations(session, self.top_k);
        let response = self.reply(session)?;
        Ok(StepReply {
            response,
            recommendations,
            reviews,
        })
    }
}


/// In-memory sessions over a shared engine. Steps within one session are
/// serialized by its own lock.
pub struct SessionManager {
    engine: Arc<Engine>,
    sessions: Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
    idle_limit: Duration,
}

impl SessionManager {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self::with_idle_limit(engine, SESSION_IDLE_LIMIT)
    }

    pub fn with_idle_limit(engine: Arc<Engine>, idle_limit: Duration) -> Self {
        Self {
            engine,
            sessions: Mutex::new(HashMap::new()),
            idle_limit,
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn open(&self) -> String {
        let id = Uuid::new_v4();
        self.sessions
            .lock()
            .expect("session table lock")
            .insert(id, Arc::new(Mutex::new(Session::default())));
        id.to_string()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        let unknown = || ServiceError::UnknownSession(id.to_string());
        let uuid = Uuid::parse_str(id).map_err(|_| unknown())?;
        self.sessions
            .lock()
            .expect("session table lock")
            .get(&uuid)
            .cloned()
            .ok_or_else(unknown)
    }

    pub fn step(&self, id: &str, text: &str) -> Result<StepReply, ServiceError> {
        let handle = self.session(id)?;
        let mut s = handle.lock().map_err(|_| ServiceError::Internal("session poisoned".into()))?;
        s.last_used = Instant::now();
        self.engine.step(&mut s, text)
    }

    pub fn recommendations(&self, id: &str, k: usize) -> Result<Vec<Recommendation>, ServiceError> {
        if k == 0 {
            return Err(ServiceError::BadRequest("k must be at least 1".into()));
        }
        let handle = self.session(id)?;
        let mut s = handle.lock().map_err(|_| ServiceError::Internal("session poisoned".into()))?;
        s.last_used = Instant::now();
        Ok(self.engine.recommendations(&s, k))
    }

    /// Number of turns in a session.
    pub fn context_len(&self, id: &str) -> Result<usize, ServiceError> {
        let handle = self.session(id)?;
        let s = handle.lock().map_err(|_| ServiceError::Internal("session poisoned".into()))?;
        Ok(s.turns.len())
    }

    /// Drops sessions idle for longer than the limit; returns how many.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table lock");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_used) <= self.idle_limit,
            Err(_) => true,
        });
        before - table.len()
    }
}

type Shared = Arc<SessionManager>;

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn open_session(State(mgr): State<Shared>) -> impl IntoResponse {
    (
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: mgr.open(),
        }),
    )
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
}

async fn post_message(
    State(mgr): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<Json<StepReply>, ServiceError> {
    let Json(body) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let reply = blocking(move || mgr.step(&id, &body.text)).await?;
    Ok(Json(reply))
}

#[derive(Deserialize)]
struct KParam {
    k: Option<usize>,
}

async fn get_recommendations(
    State(mgr): State<Shared>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<KParam>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<RecommendationList>, ServiceError> {
    let Query(q) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let k = q.k.unwrap_or(mgr.engine().top_k());
    let recommendations = blocking(move || mgr.recommendations(&id, k)).await?;
    Ok(Json(RecommendationList { recommendations }))
}

async fn not_found(uri: axum::http::Uri) -> ServiceError {
    ServiceError::NoRoute(uri.path().to_string())
}

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/sessions", post(open_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/recommendations", get(get_recommendations))
        .fallback(not_found)
        .with_state(manager)
}

/// Serves until the process is stopped, evicting idle sessions every
/// minute.
pub async fn serve(manager: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let sweeper = Arc::clone(&manager);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle(Instant::now());
            if n > 0 {
                log::info!("evicted {n} idle session(s)");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(manager)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn attitude_cues() {
        assert_eq!(detect_attitude(&toks("I loved @m1")), Attitude::Liked);
        assert_eq!(detect_attitude(&toks("I hated @m1")), Attitude::Disliked);
        assert_eq!(detect_attitude(&toks("I didn't like @m1")), Attitude::Disliked);
        assert_eq!(detect_attitude(&toks("i did not like @m1")), Attitude::Disliked);
        assert_eq!(detect_attitude(&toks("have you seen @m1 ?")), Attitude::DidNotSay);
    }

    #[test]
    fn error_codes_and_statuses() {
        assert_eq!(ServiceError::UnknownSession("x".into()).status(), StatusCode::NOT_FOUND);
        assert_eq!(ServiceError::EmptyText.code(), "empty_text");
        assert_eq!(ServiceError::BadRequest("x".into()).status(), StatusCode::BAD_REQUEST);
    }
}
