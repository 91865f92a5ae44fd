use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use revcore::corpus::fixture::FixtureConfig;
use revcore::corpus::{load_reviews, tokenize, Role};
use revcore::metrics::recall_at_k;
use revcore::pipeline::{
    evaluate, materialize, parse_strategy, run_ablation, scaffold_fixture, train_all, Corpus, GenMetrics,
    RunConfig, Stage,
};
use revcore::recommender::Recommender;
use revcore::retrieval::{dialogue_rng, retrieve};
use revcore::sentiment::{train_sentiment, Polarity, SentimentIndex, SentimentModel};
use revcore::service::{serve, Engine, Session, SessionManager, DEFAULT_TOP_K};

#[derive(Parser)]
#[command(name = "revcore", version, about = "Review-augmented conversational recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured stages and write metrics.json.
    Train(ConfigArg),
    /// Score saved checkpoints and write eval_metrics.json.
    Eval(ConfigArg),
    /// Run the configured ablation grid and write ablation.csv.
    Ablate(ConfigArg),
    /// Write the synthetic corpus plus a config.toml pointing at it.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        dialogues: usize,
    },
    #[command(subcommand)]
    Sentiment(SentimentCmd),
    /// Retrieve one review sentence for an item.
    Retrieve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        item: String,
        #[arg(long, value_enum)]
        polarity: PolarityArg,
        /// Strategy code such as C-S-S; defaults to the configured one.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        /// Sentiment checkpoint; defaults to the run directory's.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    #[command(subcommand)]
    Rec(RecCmd),
    #[command(subcommand)]
    Dlg(DlgCmd),
    /// Serve the HTTP API over trained checkpoints.
    Serve {
        #[arg(long, env = "REVCORE_CONFIG")]
        config: PathBuf,
        /// Checkpoint directory; defaults to <out_dir>/checkpoints.
        #[arg(long, env = "REVCORE_CHECKPOINTS")]
        checkpoints: Option<PathBuf>,
        #[arg(long, env = "REVCORE_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "REVCORE_TOP_K", default_value_t = DEFAULT_TOP_K)]
        k: usize,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Subcommand)]
enum SentimentCmd {
    /// Train a sentence scorer on a reviews file.
    Train {
        #[arg(long)]
        reviews: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take model and training settings from a run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a piece of text in [0, 1].
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
    },
}

#[derive(Subcommand)]
enum RecCmd {
    /// Train the recommender (needs the sentiment checkpoint).
    Train(ConfigArg),
    /// Recall@k of the saved recommender.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
}

#[derive(Subcommand)]
enum DlgCmd {
    /// Train the dialogue model (needs the recommender checkpoint).
    Train(ConfigArg),
    /// Perplexity and distinct-n of the saved dialogue model.
    Eval(ConfigArg),
    /// Generate a response to a context file, one utterance per line,
    /// alternating seeker and recommender starting with the seeker.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        context: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Pos,
    Neg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Valid,
    All,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn train_stage(cfg: &mut RunConfig, stage: Stage) -> Result<()> {
    cfg.stages = vec![stage];
    let outcome = train_all(cfg)?;
    print_json(&outcome.metrics)
}

fn write_fixture(out: &Path, seed: u64, dialogues: usize) -> Result<()> {
    let fixture = FixtureConfig {
        seed,
        dialogues,
        ..FixtureConfig::default()
    };
    println!("{}", scaffold_fixture(out, &fixture)?.display());
    Ok(())
}

fn rec_eval(cfg: &RunConfig, ks: &[usize], split: Split) -> Result<BTreeMap<String, f64>> {
    if ks.is_empty() || ks.contains(&0) {
        bail!("--k needs positive cutoffs");
    }
    let corpus = Corpus::load(&cfg.data, cfg.min_count, None)?;
    let (sentiment, _) = SentimentModel::load(&cfg.checkpoint(Stage::Sentiment))?;
    let (rec, _) = Recommender::load(&cfg.checkpoint(Stage::Recommender), &corpus.kg)?;
    let (_, source) = parse_strategy(&cfg.retrieval.strategy, cfg.retrieval.budget)?;
    let scorer = SentimentIndex::build(corpus.retrieval_db(source)?, &sentiment)?;
    let data = materialize(&corpus, cfg, &scorer)?;
    let mut instances = Vec::new();
    if split != Split::Valid {
        instances.extend(data.train.rec);
    }
    if split != Split::Train {
        instances.extend(data.valid.rec);
    }
    if instances.is_empty() {
        bail!("no recommendation instances in the selected split");
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let ranked = rec.rankings(&instances, kmax);
    let targets: Vec<usize> = instances.iter().map(|i| i.target.index()).collect();
    Ok(ks
        .iter()
        .map(|&k| (format!("recall@{k}"), recall_at_k(&ranked, &targets, k)))
        .collect())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(c) => print_json(&train_all(&c.load()?)?.metrics),
        Command::Eval(c) => print_json(&evaluate(&c.load()?)?),
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = run_ablation(&cfg, &cfg.ablation)?;
            print_json(&rows)
        }
        Command::Fixture { out, seed, dialogues } => write_fixture(&out, seed, dialogues),
        Command::Sentiment(SentimentCmd::Train { reviews, out, config }) => {
            let run = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let db = load_reviews(&reviews)?.db;
            let (model, report) = train_sentiment(&db, &run.sentiment_config())?;
            model.save(&out, None)?;
            print_json(&report)
        }
        Command::Sentiment(SentimentCmd::Score { ckpt, text }) => {
            let (model, _) = SentimentModel::load(&ckpt)?;
            let score = model.predict(&tokenize(&text))?;
            print_json(&serde_json::json!({ "score": score, "polarity": Polarity::of_score(score) }))
        }
        Command::Retrieve {
            config,
            item,
            polarity,
            strategy,
            budget,
            ckpt,
        } => {
            let cfg = config.load()?;
            let code = strategy.unwrap_or_else(|| cfg.retrieval.strategy.clone());
            let (strategy, source) = parse_strategy(&code, budget.unwrap_or(cfg.retrieval.budget))?;
            let corpus = Corpus::load(&cfg.data, cfg.min_count, None)?;
            let db = corpus.retrieval_db(source)?;
            let ckpt = ckpt.unwrap_or_else(|| cfg.checkpoint(Stage::Sentiment));
            let (model, _) = SentimentModel::load(&ckpt)?;
            let scorer = SentimentIndex::build(db, &model)?;
            let target = match polarity {
                PolarityArg::Pos => Polarity::Positive,
                PolarityArg::Neg => Polarity::Negative,
            };
            let key = revcore::corpus::normalize_item_key(&item);
            let mut rng = dialogue_rng(cfg.seed, &key);
            match retrieve(&key, target.target_score(), db, &scorer, &strategy, &mut rng) {
                Some(s) => print_json(&s),
                None => bail!("no reviews for item {key}"),
            }
        }
        Command::Rec(RecCmd::Train(c)) => train_stage(&mut c.load()?, Stage::Recommender),
        Command::Rec(RecCmd::Eval { config, k, split }) => print_json(&rec_eval(&config.load()?, &k, split)?),
        Command::Dlg(DlgCmd::Train(c)) => train_stage(&mut c.load()?, Stage::Dialogue),
        Command::Dlg(DlgCmd::Eval(c)) => {
            let report = evaluate(&c.load()?)?;
            let mut out: BTreeMap<&str, GenMetrics> = BTreeMap::new();
            if let Some(g) = report.train.generation {
                out.insert("train", g);
            }
            if let Some(g) = report.valid.and_then(|v| v.generation) {
                out.insert("valid", g);
            }
            print_json(&out)
        }
        Command::Dlg(DlgCmd::Generate { config, context }) => {
            let cfg = config.load()?;
            let engine = Engine::load(&cfg, None, DEFAULT_TOP_K)?;
            let text = fs::read_to_string(&context).with_context(|| format!("reading {}", context.display()))?;
            let mut session = Session::default();
            let lines = text.lines().filter(|l| !l.trim().is_empty());
            for (i, line) in lines.enumerate() {
                let role = if i % 2 == 0 { Role::Seeker } else { Role::Recommender };
                engine.observe(&mut session, role, line)?;
            }
            println!("{}", engine.reply(&mut session)?);
            Ok(())
        }
        Command::Serve {
            config,
            checkpoints,
            addr,
            k,
        } => {
            let cfg = RunConfig::load(&config)?;
            let engine = Engine::load(&cfg, checkpoints.as_deref(), k)?;
            let manager = Arc::new(SessionManager::new(Arc::new(engine)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(manager, addr))?;
            Ok(())
        }
    }
}
