#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mtnlu::config::ExperimentConfig;

pub mod bpe;
pub mod frames;
pub mod gradients;
pub mod schedule;
pub mod synth;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

/// Toy two-task experiment rooted at `dir`: data is generated into
/// `dir/data`, runs go to `dir/run`. Overrides are `section.key=value`.
pub fn toy_config(dir: &Path, seed: u64, overrides: &[&str]) -> ExperimentConfig {
    let fx = fixtures();
    let para = format!(
        "\n[[task]]\nid = \"para\"\nrole = \"out-of-domain\"\ntrain_src = \"{fx}/para.src\"\ntrain_tgt = \"{fx}/para.tgt\"\n",
        fx = fx.display()
    );
    config(dir, &(toy_synthetic_only(seed) + &para), overrides)
}

/// The toy experiment without the paraphrase task.
pub fn toy_single_task_config(dir: &Path, seed: u64, overrides: &[&str]) -> ExperimentConfig {
    config(dir, &toy_synthetic_only(seed), overrides)
}

/// Parses `text` with overrides and resolves relative paths against `dir`.
pub fn config(dir: &Path, text: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut cfg = ExperimentConfig::from_str_with(text, "toy", &overrides).unwrap();
    cfg.resolve(dir);
    cfg
}

fn toy_synthetic_only(seed: u64) -> String {
    let fx = fixtures();
    format!(
        r#"
seed = {seed}
out_dir = "run"

[generate]
corpus = "{fx}/train.iob"
output = "data/synth"
lexicon = "data/synth.lexicon"
valid_corpus = "{fx}/valid.iob"
test_corpus = "{fx}/test.iob"

[bpe]
merges = "data/bpe.merges"
operations = 200

[model]
emb_size = 16
hidden_size = 16
enc_layers = 1
dec_layers = 1
dropout = 0.1

[trainer]
group_size = 8
accumulate = 2
epochs = 2
lr = 0.01
max_decode_len = 30

[[task]]
id = "atis"
role = "synthetic"
train_src = "data/synth.src"
train_tgt = "data/synth.tgt"
valid_src = "data/synth.valid.src"
valid_tgt = "data/synth.valid.tgt"
test_src = "data/synth.test.src"
test_tgt = "data/synth.test.tgt"
lexicon = "data/synth.lexicon"
"#,
        fx = fx.display()
    )
}

/// Every file under `dir` as (relative path, bytes), sorted by path.
pub fn tree_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
