//! Knowledge-graph entity encoding, attention-pooled user profiles and
//! catalog ranking.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Catalog, EntityId, EntityLinker, ItemId, KnowledgeGraph, Utterance,
};
use crate::metrics::top_k;
use crate::nn::{
    self, AdamConfig, Csr, FitReport, Linear, Mat, NnError, ParamId, ParamStore, Schedule, Tape,
    Var,
};

#[derive(Debug, thiserror::Error)]
pub enum RecError {
    #[error("entity set is empty")]
    EmptyEntitySet,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("target item {0} outside the catalog")]
    TargetOutOfCatalog(u32),
    #[error("checkpoint was built for {expected} entities, graph has {found}")]
    GraphMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    /// Entity embedding width.
    pub dim: usize,
    /// Graph convolution layers; 0 uses the raw table.
    pub gnn_layers: usize,
    /// Hidden widths of the scoring head; empty means a single linear map.
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            gnn_layers: 1,
            head_hidden: Vec::new(),
            seed: 0,
        }
    }
}

/// Context-derived entities followed by review-derived ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub context: Vec<EntityId>,
    pub reviews: Vec<EntityId>,
}

impl EntitySet {
    pub fn merged(&self) -> Vec<EntityId> {
        self.context.iter().chain(&self.reviews).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.context.len() + self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Entities of the context turns (in mention order) plus entities linked in
/// the review sentences. Duplicates are kept.
pub fn build_entity_set<S: AsRef<[String]>>(
    context: &[Utterance],
    review_sentences: &[S],
    linker: &dyn EntityLinker,
) -> EntitySet {
    EntitySet {
        context: context
            .iter()
            .flat_map(|u| u.entity_mentions.iter().copied())
            .collect(),
        reviews: review_sentences
            .iter()
            .flat_map(|s| linker.link(s.as_ref()))
            .collect(),
    }
}

/// Per-relation normalized adjacency, inverse relations included.
#[derive(Clone, Debug)]
pub struct RelationalGraph {
    pub entities: usize,
    pub adjacency: Vec<Arc<Csr>>,
}

impl RelationalGraph {
    /// Relation `r` sends tail → head; relation `r + R` sends head → tail.
    /// Edge weights are `1 / sqrt(in_deg(receiver) · out_deg(sender))`
    /// within the relation.
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let n = kg.entity_count();
        let r = kg.relation_count();
        let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * r];
        for t in kg.triples() {
            edges[t.relation.index()].push((t.head.index(), t.tail.index()));
            edges[r + t.relation.index()].push((t.tail.index(), t.head.index()));
        }
        Self::from_edges(n, &edges)
    }

    /// `edges[r]` lists `(receiver, sender)` pairs of relation `r`.
    pub fn from_edges(n: usize, edges: &[Vec<(usize, usize)>]) -> Self {
        let adjacency = edges
            .iter()
            .map(|es| {
                let mut din = vec![0usize; n];
                let mut dout = vec![0usize; n];
                for &(i, j) in es {
                    din[i] += 1;
                    dout[j] += 1;
                }
                let trips = es
                    .iter()
                    .map(|&(i, j)| (i, j, 1.0 / ((din[i] * dout[j]) as f64).sqrt()))
                    .collect();
                Arc::new(Csr::from_triplets(n, n, trips))
            })
            .collect();
        Self {
            entities: n,
            adjacency,
        }
    }

    pub fn relations(&self) -> usize {
        self.adjacency.len()
    }
}

#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub self_w: ParamId,
    pub rel_w: Vec<ParamId>,
    pub bias: ParamId,
}

impl GnnLayer {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        relations: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_w: store.add_xavier(format!("{name}.self"), dim, dim, rng),
            rel_w: (0..relations)
                .map(|r| store.add_xavier(format!("{name}.rel{r}"), dim, dim, rng))
                .collect(),
            bias: store.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }
}

/// Relational graph convolution: per layer
/// `H ← ReLU(H·W_self + Σ_r A_r·H·W_r + b)`. No layers returns `table`.
pub fn encode_kg(t: &mut Tape, graph: &RelationalGraph, table: Var, layers: &[GnnLayer]) -> Var {
    let mut h = table;
    for layer in layers {
        let ws = t.param(layer.self_w);
        let mut acc = t.matmul(h, ws);
        for (a, &w) in graph.adjacency.iter().zip(&layer.rel_w) {
            if a.nnz() == 0 {
                continue;
            }
            let wr = t.param(w);
            let hw = t.matmul(h, wr);
            let msg = t.spmm(Arc::clone(a), hw);
            acc = t.add(acc, msg);
        }
        let b = t.param(layer.bias);
        let pre = t.add_row(acc, b);
        h = t.relu(pre);
    }
    h
}

/// Self-attention pooling of entity rows `e` (l × d):
/// `α = softmax(b · tanh(E·Wᵀ)ᵀ)`, `u = α·E`. Returns `(u, α)` as rows.
pub fn attention_pool(t: &mut Tape, e: Var, w: Var, b: Var) -> (Var, Var) {
    let proj = t.matmul_t(e, w);
    let act = t.tanh(proj);
    let scores = t.matmul_t(b, act);
    let alpha = t.softmax(scores);
    let u = t.matmul(alpha, e);
    (u, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub u: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// One training or evaluation case: entities seen before a recommender
/// turn and the item it recommended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecInstance {
    pub dialogue: String,
    pub turn: usize,
    pub entities: EntitySet,
    pub target: ItemId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: RecConfig,
    catalog: Catalog,
    prior: Vec<f64>,
    entities: usize,
    relations: usize,
    digest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Recommender {
    cfg: RecConfig,
    catalog: Catalog,
    graph: RelationalGraph,
    store: ParamStore,
    table: ParamId,
    layers: Vec<GnnLayer>,
    attn_w: ParamId,
    attn_b: ParamId,
    head: Vec<Linear>,
    prior: Vec<f64>,
}

impl Recommender {
    pub fn new(kg: &KnowledgeGraph, catalog: Catalog, cfg: RecConfig) -> Result<Self, RecError> {
        Self::with_graph(RelationalGraph::from_kg(kg), catalog, cfg)
    }

    pub fn with_graph(
        graph: RelationalGraph,
        catalog: Catalog,
        cfg: RecConfig,
    ) -> Result<Self, RecError> {
        if catalog.is_empty() {
            return Err(RecError::EmptyCatalog);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let table = store.add_xavier("rec.entity", graph.entities.max(1), d, &mut rng);
        let layers = (0..cfg.gnn_layers)
            .map(|i| GnnLayer::new(&mut store, &format!("rec.gnn{i}"), d, graph.relations(), &mut rng))
            .collect();
        let attn_w = store.add_xavier("rec.attn.w", d, d, &mut rng);
        let attn_b = store.add_xavier("rec.attn.b", 1, d, &mut rng);
        let mut head = Vec::new();
        let mut width = d;
        for (i, &h) in cfg.head_hidden.iter().enumerate() {
            head.push(Linear::new(&mut store, &format!("rec.head{i}"), width, h, true, &mut rng));
            width = h;
        }
        head.push(Linear::new(&mut store, "rec.head.out", width, catalog.len(), true, &mut rng));
        let prior = vec![1.0 / catalog.len() as f64; catalog.len()];
        Ok(Self {
            cfg,
            catalog,
            graph,
            store,
            table,
            layers,
            attn_w,
            attn_b,
            head,
            prior,
        })
    }

    pub fn config(&self) -> &RecConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn table_param(&self) -> ParamId {
        self.table
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Cold-start distribution over the catalog.
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Sets the cold-start prior to add-one smoothed target frequencies.
    pub fn fit_prior(&mut self, instances: &[RecInstance]) {
        let mut counts = vec![1.0; self.catalog.len()];
        for inst in instances {
            if let Some(c) = counts.get_mut(inst.target.index()) {
                *c += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        self.prior = counts.into_iter().map(|c| c / total).collect();
    }

    /// Entity representations after graph convolution.
    pub fn entity_states(&self, t: &mut Tape) -> Var {
        let table = t.param(self.table);
        encode_kg(t, &self.graph, table, &self.layers)
    }

    /// Evaluation-mode entity matrix (entities × dim).
    pub fn entity_matrix(&self) -> Mat {
        let mut t = Tape::new(&self.store);
        let h = self.entity_states(&mut t);
        t.value(h).clone()
    }

    fn pool(&self, t: &mut Tape, states: Var, entities: &[EntityId]) -> (Var, Var) {
        let idx: Vec<usize> = entities.iter().map(|e| e.index()).collect();
        let e = t.gather_rows(states, &idx);
        let w = t.param(self.attn_w);
        let b = t.param(self.attn_b);
        attention_pool(t, e, w, b)
    }

    fn head_logits(&self, t: &mut Tape, u: Var) -> Var {
        let mut h = u;
        let last = self.head.len() - 1;
        for (i, lin) in self.head.iter().enumerate() {
            h = lin.forward(t, h);
            if i < last {
                h = t.relu(h);
            }
        }
        h
    }

    pub fn user_embedding(&self, set: &EntitySet) -> Result<UserProfile, RecError> {
        self.user_embedding_with(&self.entity_matrix(), set)
    }

    /// Like [`Self::user_embedding`] with precomputed entity states.
    pub fn user_embedding_with(&self, states: &Mat, set: &EntitySet) -> Result<UserProfile, RecError> {
        if set.is_empty() {
            return Err(RecError::EmptyEntitySet);
        }
        let mut t = Tape::new(&self.store);
        let h = t.constant(states.clone());
        let (u, alpha) = self.pool(&mut t, h, &set.merged());
        Ok(UserProfile {
            u: t.value(u).iter().copied().collect(),
            alpha: t.value(alpha).iter().copied().collect(),
        })
    }

    /// Probability over the catalog; the prior for an empty entity set.
    pub fn recommend(&self, set: &EntitySet) -> Vec<f64> {
        self.recommend_with(&self.entity_matrix(), set)
    }

    pub fn recommend_with(&self, states: &Mat, set: &EntitySet) -> Vec<f64> {
        if set.is_empty() {
            return self.prior.clone();
        }
        let mut t = Tape::new(&self.store);
        let h = t.constant(states.clone());
        let (u, _) = self.pool(&mut t, h, &set.merged());
        let logits = self.head_logits(&mut t, u);
        let p = t.softmax(logits);
        t.value(p).iter().copied().collect()
    }

    /// Top-`k` items with their probabilities (clamped to the catalog size).
    pub fn rank_with(&self, states: &Mat, set: &EntitySet, k: usize) -> Vec<(ItemId, f64)> {
        let p = self.recommend_with(states, set);
        top_k(&p, k)
            .into_iter()
            .map(|i| (ItemId(i as u32), p[i]))
            .collect()
    }

    /// Mean `−log p(target)` over instances with a non-empty entity set.
    pub fn batch_loss(&self, t: &mut Tape, batch: &[&RecInstance]) -> Var {
        let states = self.entity_states(t);
        let mut users = Vec::new();
        let mut coords = Vec::new();
        for inst in batch.iter().filter(|i| !i.entities.is_empty()) {
            let (u, _) = self.pool(t, states, &inst.entities.merged());
            coords.push((users.len(), inst.target.index()));
            users.push(u);
        }
        if users.is_empty() {
            return t.constant(Mat::zeros((1, 1)));
        }
        let u = t.concat_rows(&users);
        let logits = self.head_logits(t, u);
        let p = t.softmax(logits);
        let picked = t.pick(p, &coords);
        let logp = t.log(picked);
        let m = t.mean(logp);
        t.scale(m, -1.0)
    }

    /// Evaluation-mode loss over instances with entities, using `store`.
    pub fn eval_loss(&self, store: &ParamStore, split: &[RecInstance]) -> f64 {
        let usable: Vec<&RecInstance> = split.iter().filter(|i| !i.entities.is_empty()).collect();
        if usable.is_empty() {
            return 0.0;
        }
        let mut t = Tape::new(store);
        let l = self.batch_loss(&mut t, &usable);
        t.value(l)[[0, 0]]
    }

    pub fn validate_targets(&self, instances: &[RecInstance]) -> Result<(), RecError> {
        match instances.iter().find(|i| i.target.index() >= self.catalog.len()) {
            Some(bad) => Err(RecError::TargetOutOfCatalog(bad.target.0)),
            None => Ok(()),
        }
    }

    /// Trains every parameter (entity table and graph layers included) and
    /// refits the cold-start prior on `train`.
    pub fn train(
        &mut self,
        train: &[RecInstance],
        valid: &[RecInstance],
        schedule: &Schedule,
        adam: AdamConfig,
    ) -> Result<FitReport, RecError> {
        self.validate_targets(train)?;
        self.validate_targets(valid)?;
        self.fit_prior(train);
        let mut store = std::mem::take(&mut self.store);
        let trainable = store.ids().collect();
        let report = {
            let view = &*self;
            nn::fit(
                &mut store,
                trainable,
                adam,
                schedule,
                train,
                valid,
                |t, batch| view.batch_loss(t, batch),
                |s, split| view.eval_loss(s, split),
            )
        };
        self.store = store;
        Ok(report)
    }

    /// Ranked item indices for every instance.
    pub fn rankings(&self, instances: &[RecInstance], k: usize) -> Vec<Vec<usize>> {
        let states = self.entity_matrix();
        instances
            .iter()
            .map(|inst| top_k(&self.recommend_with(&states, &inst.entities), k))
            .collect()
    }

    pub fn save(&self, path: &Path, digest: Option<&str>) -> Result<(), RecError> {
        let meta = Meta {
            kind: "recommender".into(),
            config: self.cfg.clone(),
            catalog: self.catalog.clone(),
            prior: self.prior.clone(),
            entities: self.graph.entities,
            relations: self.graph.relations(),
            digest: digest.map(str::to_string),
        };
        Ok(nn::checkpoint::save(path, &self.store, &meta)?)
    }

    /// Catalog stored in a checkpoint, read without building the model.
    pub fn checkpoint_catalog(path: &Path) -> Result<Catalog, RecError> {
        let meta: Meta = nn::checkpoint::Archive::load(path)?.meta()?;
        Ok(meta.catalog)
    }

    pub fn load(path: &Path, kg: &KnowledgeGraph) -> Result<(Self, Option<String>), RecError> {
        let archive = nn::checkpoint::Archive::load(path)?;
        let meta: Meta = archive.meta()?;
        if meta.kind != "recommender" {
            return Err(NnError::Checkpoint(format!("expected a recommender checkpoint, found {}", meta.kind)).into());
        }
        let graph = RelationalGraph::from_kg(kg);
        if graph.entities != meta.entities || graph.relations() != meta.relations {
            return Err(RecError::GraphMismatch {
                expected: meta.entities,
                found: graph.entities,
            });
        }
        let mut rec = Self::with_graph(graph, meta.catalog, meta.config)?;
        archive.restore_into(&mut rec.store)?;
        rec.prior = meta.prior;
        Ok((rec, meta.digest))
    }
}
