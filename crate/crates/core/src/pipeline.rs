//! End-to-end steps behind the command-line tool: data generation, subtitle
//! extraction, BPE, training, decoding and evaluation. Every step reads and
//! writes files so runs can be inspected and repeated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{build_vocab, invert_bpe, learn_bpe, merge_clitics, word_counts, BpeError, MergeTable, Vocab};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::corpus::{
    extract_dialog_pairs, extract_qa_pairs, read_iob_file, read_lines, read_subtitle_tsv, utterance_pair,
    write_parallel, CorpusError, Lexicon, SequencePair,
};
use crate::eval::{corpus_eval, EvalError, EvalReport};
use crate::model::{Example, ModelConfig, ModelError, MultiTaskModel};
use crate::synth::{generate_dataset, GenConfig, Manifest, PlaceholderTable};
use crate::tensor::TensorError;
use crate::trainer::{self, EpochStats, Phase, Role, TaskData, TrainError, TrainerConfig, ValMetrics};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// 3 for numeric failures during training, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Train(TrainError::NonFinite { .. })
            | PipelineError::Train(TrainError::Tensor(TensorError::NonFinite(_)))
            | PipelineError::Model(ModelError::Tensor(TensorError::NonFinite(_))) => 3,
            PipelineError::Train(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_)))) => 3,
            _ => 2,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `prefix` with `.ext` appended (not substituted).
pub fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io(path))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io(p)),
        _ => Ok(()),
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Input(format!("missing input file {}", path.display())))
    }
}

/// Generates the synthetic dataset, its lexicon and the converted
/// validation/test sets described by the `[generate]` section.
pub fn generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let g = cfg
        .generate
        .as_ref()
        .ok_or_else(|| PipelineError::Input("config has no [generate] section".into()))?;
    let task = cfg.synthetic_task().map(|t| t.id.clone()).unwrap_or_else(|_| "synthetic".into());
    let corpus = read_iob_file(&g.corpus)?;
    let table = match &g.table {
        Some(p) => PlaceholderTable::read(p)?,
        None => PlaceholderTable::from_corpus(&corpus),
    };
    let gen = GenConfig {
        cartesian_threshold: g.cartesian_threshold,
        seed: cfg.seed,
    };
    let (pairs, manifest) = generate_dataset(&corpus, &table, &gen, g.variant, &task)?;
    ensure_parent(&g.output)?;
    write_parallel(&pairs, &with_suffix(&g.output, "src"), &with_suffix(&g.output, "tgt"))?;
    let manifest_path = with_suffix(&g.output, "manifest");
    fs::write(&manifest_path, manifest.to_text()).map_err(io(&manifest_path))?;

    let mut all = corpus;
    for (path, split) in [(&g.valid_corpus, "valid"), (&g.test_corpus, "test")] {
        let Some(path) = path else { continue };
        let utts = read_iob_file(path)?;
        let pairs = utts
            .iter()
            .map(|u| utterance_pair(u, &task))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let prefix = with_suffix(&g.output, split);
        write_parallel(&pairs, &with_suffix(&prefix, "src"), &with_suffix(&prefix, "tgt"))?;
        all.extend(utts);
    }
    let lexicon = Lexicon::from_utterances(&all);
    if !lexicon.is_disjoint() {
        let clash = lexicon.intents.intersection(&lexicon.slots).next().cloned().unwrap_or_default();
        return Err(CorpusError::Ambiguous(clash).into());
    }
    ensure_parent(&g.lexicon)?;
    lexicon.write(&g.lexicon)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubtitleMode {
    Qa,
    Dialog,
}

/// Extracts consecutive-sentence pairs from subtitle TSV files (each file
/// checked for temporal order on its own) with clitics re-attached, and
/// writes `<output>.src` / `<output>.tgt`. Returns the number of pairs.
pub fn extract_subtitles(inputs: &[PathBuf], mode: SubtitleMode, output: &Path) -> Result<usize> {
    let mut pairs: Vec<SequencePair> = Vec::new();
    for input in inputs {
        let blocks = read_subtitle_tsv(input)?;
        let found = match mode {
            SubtitleMode::Qa => extract_qa_pairs(&blocks),
            SubtitleMode::Dialog => extract_dialog_pairs(&blocks),
        }
        .map_err(|e| PipelineError::Input(format!("{}: {e}", input.display())))?;
        pairs.extend(found.into_iter().map(|mut p| {
            p.source = merge_clitics(&p.source);
            p.target = merge_clitics(&p.target);
            p
        }));
    }
    ensure_parent(output)?;
    write_parallel(&pairs, &with_suffix(output, "src"), &with_suffix(output, "tgt"))?;
    Ok(pairs.len())
}

/// Word-level sentences the merge table is learned from: every task's
/// training data plus the synthetic task's validation and test sets.
fn bpe_corpus(cfg: &ExperimentConfig) -> Result<Vec<Vec<String>>> {
    let mut sents = Vec::new();
    for t in &cfg.tasks {
        let mut files = vec![&t.train_src, &t.train_tgt];
        if t.role == Role::Synthetic {
            files.extend([&t.valid_src, &t.valid_tgt, &t.test_src, &t.test_tgt].into_iter().flatten());
        }
        for f in files {
            sents.extend(read_lines(f)?);
        }
    }
    Ok(sents)
}

/// Learns the joint merge table and writes it to `bpe.merges`.
pub fn learn_bpe_from_config(cfg: &ExperimentConfig) -> Result<MergeTable> {
    let sents = bpe_corpus(cfg)?;
    let counts = word_counts(sents.iter().map(Vec::as_slice));
    let table = learn_bpe(&counts, cfg.bpe.operations);
    ensure_parent(&cfg.bpe.merges)?;
    table.write(&cfg.bpe.merges)?;
    Ok(table)
}

/// Segments every line of `input` with the merges in `merges`.
pub fn apply_bpe_file(merges: &Path, input: &Path, output: &Path) -> Result<usize> {
    let table = MergeTable::read(merges)?;
    let lines: Vec<Vec<String>> = read_lines(input)?.iter().map(|l| table.apply(l)).collect();
    ensure_parent(output)?;
    write_lines(output, &lines)?;
    Ok(lines.len())
}

/// Word to model-token mapping: BPE when a table is present, identity otherwise.
#[derive(Debug, Clone)]
pub struct Segmenter {
    merges: Option<MergeTable>,
}

impl Segmenter {
    pub fn new(merges: Option<MergeTable>) -> Self {
        Segmenter { merges }
    }

    pub fn segment<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        match &self.merges {
            Some(m) => m.apply(words),
            None => words.iter().map(|w| w.as_ref().to_string()).collect(),
        }
    }

    pub fn join<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        match &self.merges {
            Some(_) => invert_bpe(tokens),
            None => tokens.iter().map(|w| w.as_ref().to_string()).collect(),
        }
    }

    pub fn merges(&self) -> Option<&MergeTable> {
        self.merges.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: String,
    pub role: Role,
    pub tgt_vocab: Vec<String>,
}

/// Everything needed to rebuild and use a model, stored as the checkpoint's
/// metadata text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub phase: String,
    pub epoch: usize,
    pub val_f1: f64,
    pub val_intent_acc: f64,
    /// Optimizer steps since the optimizer of this phase was created.
    pub adam_steps: u64,
    /// Optimizer steps when this phase began; always 0 since every phase
    /// starts from a fresh optimizer.
    pub adam_steps_at_phase_start: u64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub bpe_enabled: bool,
    pub merges: Vec<[String; 2]>,
    pub src_vocab: Vec<String>,
    pub lexicon_intents: Vec<String>,
    pub lexicon_slots: Vec<String>,
    pub tasks: Vec<TaskMeta>,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("metadata serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Input(format!("bad checkpoint metadata: {e}")))
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        if !self.bpe_enabled {
            return Ok(Segmenter::new(None));
        }
        let merges = self.merges.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
        Ok(Segmenter::new(Some(MergeTable::new(merges).map_err(PipelineError::Input)?)))
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon {
            intents: self.lexicon_intents.iter().cloned().collect(),
            slots: self.lexicon_slots.iter().cloned().collect(),
        }
    }

    pub fn synthetic_task(&self) -> Option<&TaskMeta> {
        self.tasks.iter().find(|t| t.role == Role::Synthetic)
    }
}

fn vocab_from_tokens(tokens: &[String]) -> Result<Vocab> {
    Vocab::from_list(tokens.to_vec()).map_err(|e| PipelineError::Input(format!("bad vocabulary in checkpoint: {e}")))
}

/// Loads a checkpoint and rebuilds the model it was saved from.
pub fn load_model(path: &Path) -> Result<(MultiTaskModel<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = CheckpointMeta::parse(&ck.metadata)?;
    let tasks: Vec<(String, usize)> = meta.tasks.iter().map(|t| (t.id.clone(), t.tgt_vocab.len())).collect();
    let mut model = MultiTaskModel::new(meta.model.clone(), meta.src_vocab.len(), &tasks, meta.seed)?;
    ck.restore_into(model.store_mut())?;
    Ok((model, meta))
}

/// Data of an experiment mapped to model ids.
pub struct Prepared {
    pub segmenter: Segmenter,
    pub src_vocab: Vocab,
    pub tgt_vocabs: BTreeMap<String, Vocab>,
    pub lexicon: Lexicon,
    pub tasks: Vec<TaskData>,
    pub synth_id: String,
    pub valid_src: Vec<Vec<usize>>,
    pub valid_ref: Vec<Vec<String>>,
}

fn read_pairs(src: &Path, tgt: &Path) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(PipelineError::Input(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    if let Some(i) = s.iter().zip(&t).position(|(a, b)| a.is_empty() || b.is_empty()) {
        return Err(PipelineError::Input(format!(
            "{}:{}: empty source or target line",
            src.display(),
            i + 1
        )));
    }
    Ok((s, t))
}

/// Reads, segments and indexes every task's data.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    for p in cfg.training_inputs() {
        require_exists(p)?;
    }
    let segmenter = if cfg.bpe.enabled {
        require_exists(&cfg.bpe.merges)?;
        Segmenter::new(Some(MergeTable::read(&cfg.bpe.merges)?))
    } else {
        Segmenter::new(None)
    };
    let synth = cfg.synthetic_task()?;

    struct Raw {
        id: String,
        role: Role,
        src: Vec<Vec<String>>,
        tgt: Vec<Vec<String>>,
        /// Segmented sentences contributing to vocabularies only.
        extra_src: Vec<Vec<String>>,
        extra_tgt: Vec<Vec<String>>,
    }
    let mut raw = Vec::new();
    for t in &cfg.tasks {
        let (s, g) = read_pairs(&t.train_src, &t.train_tgt)?;
        let mut extra_src = Vec::new();
        let mut extra_tgt = Vec::new();
        if t.role == Role::Synthetic {
            for (a, b) in [(&t.valid_src, &t.valid_tgt), (&t.test_src, &t.test_tgt)] {
                if let (Some(a), Some(b)) = (a, b) {
                    let (xs, xt) = read_pairs(a, b)?;
                    extra_src.extend(xs.iter().map(|l| segmenter.segment(l)));
                    extra_tgt.extend(xt.iter().map(|l| segmenter.segment(l)));
                }
            }
        }
        raw.push(Raw {
            id: t.id.clone(),
            role: t.role,
            src: s.iter().map(|l| segmenter.segment(l)).collect(),
            tgt: g.iter().map(|l| segmenter.segment(l)).collect(),
            extra_src,
            extra_tgt,
        });
    }

    let src_vocab = build_vocab(
        raw.iter().flat_map(|r| r.src.iter().chain(&r.extra_src)).map(Vec::as_slice),
        cfg.bpe.src_vocab_size,
    );
    let mut tgt_vocabs = BTreeMap::new();
    let mut tasks = Vec::new();
    for r in &raw {
        let vocab = build_vocab(r.tgt.iter().chain(&r.extra_tgt).map(Vec::as_slice), cfg.bpe.tgt_vocab_size);
        let train = r
            .src
            .iter()
            .zip(&r.tgt)
            .map(|(s, t)| Example {
                task: r.id.clone(),
                src: src_vocab.encode(s),
                tgt: vocab.encode(t),
            })
            .collect();
        tasks.push(TaskData {
            id: r.id.clone(),
            role: r.role,
            train,
        });
        tgt_vocabs.insert(r.id.clone(), vocab);
    }

    let lexicon = Lexicon::read(synth.lexicon.as_ref().expect("validated"))?;
    let (vs, vt) = read_pairs(synth.valid_src.as_ref().expect("validated"), synth.valid_tgt.as_ref().expect("validated"))?;
    Ok(Prepared {
        valid_src: vs.iter().map(|l| src_vocab.encode(&segmenter.segment(l))).collect(),
        valid_ref: vt,
        segmenter,
        src_vocab,
        tgt_vocabs,
        lexicon,
        tasks,
        synth_id: synth.id.clone(),
    })
}

impl Prepared {
    /// Greedy decodes `src` with `task`'s head and returns word-level output.
    pub fn decode_words(&self, model: &MultiTaskModel<f32>, task: &str, src: &[usize], max_len: usize) -> Result<Vec<String>> {
        decode_words(model, &self.segmenter, &self.tgt_vocabs[task], task, src, max_len)
    }

    pub fn validate(&self, model: &MultiTaskModel<f32>, max_len: usize) -> Result<ValMetrics> {
        let hyps = self
            .valid_src
            .iter()
            .map(|s| self.decode_words(model, &self.synth_id, s, max_len))
            .collect::<Result<Vec<_>>>()?;
        let report = corpus_eval(&self.valid_ref, &hyps, &self.lexicon)?;
        Ok(ValMetrics {
            f1: report.f1,
            intent_accuracy: report.intent_accuracy,
        })
    }

    fn meta(&self, cfg: &ExperimentConfig, stats: &EpochStats) -> CheckpointMeta {
        CheckpointMeta {
            seed: cfg.seed,
            phase: stats.phase.to_string(),
            epoch: stats.epoch,
            val_f1: stats.val.f1,
            val_intent_acc: stats.val.intent_accuracy,
            adam_steps: stats.adam_steps,
            adam_steps_at_phase_start: 0,
            model: cfg.model.clone(),
            trainer: cfg.trainer.clone(),
            bpe_enabled: self.segmenter.merges().is_some(),
            merges: self
                .segmenter
                .merges()
                .map(|m| m.merges().iter().map(|(a, b)| [a.clone(), b.clone()]).collect())
                .unwrap_or_default(),
            src_vocab: self.src_vocab.tokens().to_vec(),
            lexicon_intents: self.lexicon.intents.iter().cloned().collect(),
            lexicon_slots: self.lexicon.slots.iter().cloned().collect(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskMeta {
                    id: t.id.clone(),
                    role: t.role,
                    tgt_vocab: self.tgt_vocabs[&t.id].tokens().to_vec(),
                })
                .collect(),
        }
    }
}

fn decode_words(
    model: &MultiTaskModel<f32>,
    segmenter: &Segmenter,
    vocab: &Vocab,
    task: &str,
    src: &[usize],
    max_len: usize,
) -> Result<Vec<String>> {
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let ids = model.greedy_decode(src, task, max_len)?;
    Ok(segmenter.join(&vocab.decode(&ids)))
}

#[derive(Debug, Clone)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub history: Vec<EpochStats>,
    /// 1-based epoch number of the selected epoch.
    pub best_epoch: usize,
    pub best_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub phases: Vec<PhaseSummary>,
    pub best_checkpoint: PathBuf,
}

pub const METRICS_LOG: &str = "metrics.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn checkpoint_name(phase: Phase, epoch: usize) -> String {
    match phase {
        Phase::Train => format!("epoch-{epoch}.ckpt"),
        Phase::Finetune => format!("finetune-{epoch}.ckpt"),
    }
}

/// Trains per the config: joint training for `trainer.epochs` epochs, then
/// `trainer.finetune_epochs` epochs on the synthetic task alone starting
/// from the best joint epoch. With `finetune_from`, joint training is
/// skipped and fine-tuning starts from that checkpoint.
///
/// Writes one checkpoint per epoch, `metrics.log`, and `best.ckpt` (a copy of
/// the selected epoch of the last phase) into `out_dir`.
pub fn train(cfg: &ExperimentConfig, finetune_from: Option<&Path>) -> Result<TrainSummary> {
    let prep = prepare(cfg)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    let log_path = out.join(METRICS_LOG);
    let mut log = fs::File::create(&log_path).map_err(io(&log_path))?;

    let task_sizes: Vec<(String, usize)> = prep
        .tasks
        .iter()
        .map(|t| (t.id.clone(), prep.tgt_vocabs[&t.id].len()))
        .collect();
    let mut model = MultiTaskModel::new(cfg.model.clone(), prep.src_vocab.len(), &task_sizes, cfg.seed)?;

    let mut phases = Vec::new();
    let mut run_finetune = cfg.trainer.finetune_epochs > 0;
    if let Some(path) = finetune_from {
        if !run_finetune {
            return Err(PipelineError::Input("fine-tuning needs trainer.finetune_epochs >= 1".into()));
        }
        let ck = Checkpoint::load(path)?;
        let meta = CheckpointMeta::parse(&ck.metadata)?;
        if meta.src_vocab != prep.src_vocab.tokens() {
            return Err(PipelineError::Input(format!(
                "{}: source vocabulary differs from the one built from the config data",
                path.display()
            )));
        }
        for t in &meta.tasks {
            if prep.tgt_vocabs.get(&t.id).is_some_and(|v| v.tokens() != t.tgt_vocab) {
                return Err(PipelineError::Input(format!(
                    "{}: target vocabulary of task {} differs from the config data",
                    path.display(),
                    t.id
                )));
            }
        }
        ck.restore_into(model.store_mut())?;
        run_finetune = true;
    } else {
        phases.push(run_phase(cfg, &prep, &mut model, Phase::Train, &mut log, &log_path)?);
    }

    if run_finetune {
        writeln!(log, "adam_reset phase=finetune adam_steps=0").map_err(io(&log_path))?;
        phases.push(run_phase(cfg, &prep, &mut model, Phase::Finetune, &mut log, &log_path)?);
    }

    let last = phases.last().expect("at least one phase ran");
    let best_src = out.join(checkpoint_name(last.phase, last.best_epoch));
    let best = out.join(BEST_CHECKPOINT);
    fs::copy(&best_src, &best).map_err(io(&best))?;
    Ok(TrainSummary {
        phases,
        best_checkpoint: best,
    })
}

fn run_phase(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &mut MultiTaskModel<f32>,
    phase: Phase,
    log: &mut fs::File,
    log_path: &Path,
) -> Result<PhaseSummary> {
    let max_len = cfg.trainer.max_decode_len;
    let mut validate = |m: &MultiTaskModel<f32>| {
        prep.validate(m, max_len)
            .map_err(|e| TrainError::Validation(e.to_string()))
    };
    let mut on_epoch = |stats: &EpochStats, m: &MultiTaskModel<f32>| -> trainer::Result<()> {
        let meta = prep.meta(cfg, stats);
        let path = cfg.out_dir.join(checkpoint_name(stats.phase, stats.epoch));
        Checkpoint::from_store(meta.to_text(), m.store())
            .save(&path)
            .map_err(|e| TrainError::Validation(e.to_string()))?;
        writeln!(log, "{}", stats.log_line()).map_err(|e| TrainError::Validation(format!("{}: {e}", log_path.display())))?;
        Ok(())
    };
    let outcome = match phase {
        Phase::Train => trainer::train(model, &prep.tasks, &cfg.trainer, &mut validate, &mut on_epoch)?,
        Phase::Finetune => trainer::finetune(model, &prep.tasks, &cfg.trainer, &mut validate, &mut on_epoch)?,
    };
    let best = &outcome.history[outcome.best];
    let summary = PhaseSummary {
        phase,
        best_epoch: best.epoch,
        best_f1: best.val.f1,
        history: outcome.history.clone(),
    };
    *model.store_mut() = outcome.best_params;
    model.store_mut().zero_grad();
    Ok(summary)
}

/// Decodes every line of `input` with a checkpoint and writes word-level
/// hypotheses to `output`, one per line. `task` defaults to the synthetic task.
pub fn decode(checkpoint: &Path, task: Option<&str>, input: &Path, output: &Path, max_len: Option<usize>) -> Result<Vec<Vec<String>>> {
    let (model, meta) = load_model(checkpoint)?;
    let task = match task {
        Some(t) => t.to_string(),
        None => meta
            .synthetic_task()
            .map(|t| t.id.clone())
            .ok_or_else(|| PipelineError::Input("checkpoint has no synthetic task".into()))?,
    };
    let tmeta = meta
        .tasks
        .iter()
        .find(|t| t.id == task)
        .ok_or_else(|| PipelineError::Input(format!("checkpoint has no task {task}")))?;
    let segmenter = meta.segmenter()?;
    let src_vocab = vocab_from_tokens(&meta.src_vocab)?;
    let tgt_vocab = vocab_from_tokens(&tmeta.tgt_vocab)?;
    let max_len = max_len.unwrap_or(meta.trainer.max_decode_len);
    let hyps = read_lines(input)?
        .iter()
        .map(|l| {
            let src = src_vocab.encode(&segmenter.segment(l));
            decode_words(&model, &segmenter, &tgt_vocab, &task, &src, max_len)
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_parent(output)?;
    write_lines(output, &hyps)?;
    Ok(hyps)
}

/// Scores hypothesis lines against reference lines and writes the report
/// (`key: value` lines) and, optionally, per-slot CSV.
pub fn evaluate(reference: &Path, hypothesis: &Path, lexicon: &Lexicon, report: Option<&Path>, per_slot: Option<&Path>) -> Result<EvalReport> {
    let refs = read_lines(reference)?;
    let hyps = read_lines(hypothesis)?;
    let rep = corpus_eval(&refs, &hyps, lexicon)?;
    if let Some(p) = report {
        ensure_parent(p)?;
        fs::write(p, rep.to_text()).map_err(io(p))?;
    }
    if let Some(p) = per_slot {
        ensure_parent(p)?;
        fs::write(p, rep.per_slot_csv()).map_err(io(p))?;
    }
    Ok(rep)
}
