#![allow(dead_code)]

use std::path::Path;

use revcore::corpus::fixture::{Fixture, FixtureConfig};
use revcore::pipeline::{DataPaths, RunConfig};

/// Writes the default fixture into `dir` and returns its data paths.
pub fn write_fixture(dir: &Path) -> DataPaths {
    let paths = Fixture::generate(&FixtureConfig::default()).write(dir).unwrap();
    DataPaths {
        dialogues: paths.dialogues,
        reviews: paths.reviews,
        kg: paths.kg,
        lexicon: paths.lexicon,
        irrelevant_reviews: Some(paths.irrelevant_reviews),
    }
}

/// Small, fast configuration over the fixture.
pub fn small_config(root: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = write_fixture(&root.join("data"));
    cfg.out_dir = root.join("run");
    cfg.seed = 7;
    cfg.sentiment.d_model = 16;
    cfg.sentiment.ffn_dim = 16;
    cfg.sentiment.layers = 1;
    cfg.sentiment.epochs = 2;
    cfg.recommender.dim = 16;
    cfg.dialogue.d_model = 16;
    cfg.dialogue.ffn_dim = 16;
    cfg.dialogue.encoder_layers = 1;
    cfg.dialogue.decoder_layers = 1;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.valid_fraction = 0.2;
    cfg
}

/// Memorization setting: no held-out data, no dropout, no early stopping,
/// a larger step size.
pub fn overfit_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = write_fixture(&root.join("data"));
    cfg.out_dir = root.join("run");
    cfg.seed = 3;
    cfg.sentiment.d_model = 32;
    cfg.sentiment.ffn_dim = 32;
    cfg.sentiment.layers = 1;
    cfg.sentiment.epochs = 5;
    cfg.sentiment.dropout = 0.0;
    cfg.dialogue.d_model = 64;
    cfg.dialogue.ffn_dim = 128;
    cfg.dialogue.dropout = 0.0;
    cfg.train.epochs = 200;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 3e-3;
    cfg.train.patience = 0;
    cfg.train.valid_fraction = 0.0;
    cfg
}

/// Trains the small configuration under `root` and loads a service engine
/// over the resulting checkpoints.
pub fn trained_engine(root: &Path) -> revcore::service::Engine {
    let cfg = small_config(root, 2);
    revcore::pipeline::train_all(&cfg).unwrap();
    revcore::service::Engine::load(&cfg, None, 5).unwrap()
}

/// The scripted conversation behind the stored service transcript.
pub const GOLDEN_TURNS: [&str; 3] = [
    "hi , i loved @m1 and want a fantasy movie",
    "i did not like @m3 though",
    "anything with maya vance ?",
];

pub fn golden_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Engine over the checkpoints frozen in `tests/golden/checkpoints`. With
/// `UPDATE_GOLDEN` set the small configuration is retrained and its
/// checkpoints replace the frozen ones first.
pub fn frozen_engine(root: &Path) -> revcore::service::Engine {
    let cfg = small_config(root, 2);
    let frozen = golden_dir().join("checkpoints");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let out = revcore::pipeline::train_all(&cfg).unwrap();
        std::fs::create_dir_all(&frozen).unwrap();
        for p in out.checkpoints {
            std::fs::copy(&p, frozen.join(p.file_name().unwrap())).unwrap();
        }
    }
    revcore::service::Engine::load(&cfg, Some(&frozen), 10).unwrap()
}

/// Replies to the scripted conversation, serialized one per line.
pub fn golden_transcript(replies: &[revcore::service::StepReply]) -> String {
    replies
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}
