#![allow(dead_code)]

use graphmatch_cli::stages::{self, StageConfigs};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const TINY: &str = r#"{
  "world": {"freelancers": 150, "clients": 40, "job_posts": 240, "vocab_size": 300, "text_dim": 8,
            "train_days": 20, "val_days": 4, "eval_days": 4},
  "text": {"weak": {"epochs": 1}, "strong": {"epochs": 1}},
  "model": {"d_gm": 8, "hidden_dim": 8},
  "train": {"steps": 6, "checkpoint_every": 3}
}"#;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphmatch"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn tiny_config() -> StageConfigs {
    serde_json::from_str::<StageConfigs>(TINY).unwrap().with_seed(7)
}

/// Artifacts of one tiny pipeline run, shared by every test in a binary.
pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub embedded: PathBuf,
    pub quintuples: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let config = dir.join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        let cfg = tiny_config();
        let p = |name: &str| dir.join(name);
        stages::gen(&cfg, &p("raw")).unwrap();
        stages::train_text(&cfg, &p("raw"), &p("text.tm")).unwrap();
        stages::embed_all(&p("raw"), &p("text.tm"), &p("emb")).unwrap();
        stages::mine(&cfg, &p("emb"), &p("q.jsonl")).unwrap();
        let s = stages::train_graph(&cfg, "GraphMatch", &p("emb"), &p("q.jsonl"), &p("ck")).unwrap();
        Fixture {
            embedded: p("emb"),
            quintuples: p("q.jsonl"),
            checkpoint: s.best_checkpoint,
            config,
            dir,
        }
    })
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
