//! Multi-task training schedule.
//!
//! Each task's instances are chunked into groups of `n`, groups of all tasks
//! are shuffled together, and gradients of `t` consecutive groups are summed
//! before one Adam update. The synthetic task is replicated `m` times per
//! epoch so it is not drowned by the much larger out-of-domain data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Example, ModelError, MultiTaskModel};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss in group {group} (task {task}): {detail}")]
    NonFinite { group: usize, task: String, detail: String },
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Instances per group (`n`).
    pub group_size: usize,
    /// Groups per optimizer update (`t`).
    pub accumulate: usize,
    /// Synthetic replication (`m`); derived from the data sizes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<usize>,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    /// Set from the experiment seed, not read from the trainer section.
    #[serde(skip)]
    pub seed: u64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub max_decode_len: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 128,
            accumulate: 11,
            multiplier: None,
            epochs: 10,
            finetune_epochs: 0,
            lr: 1e-3,
            seed: 1,
            clip_norm: 5.0,
            max_decode_len: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.accumulate == 0 || self.multiplier == Some(0) || self.max_decode_len == 0 {
            return Err(TrainError::Config(
                "group_size, accumulate, multiplier and max_decode_len must be at least 1".into(),
            ));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(TrainError::Config(format!("clip_norm {} must be non-negative", self.clip_norm)));
        }
        self.adam().validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `max(1, round(ood / (10 · synth)))`.
pub fn compute_multiplier(ood_size: usize, synth_size: usize) -> Result<usize> {
    if ood_size == 0 || synth_size == 0 {
        return Err(TrainError::Config("dataset sizes must be at least 1".into()));
    }
    let m = (ood_size as f64 / (10.0 * synth_size as f64)).round() as usize;
    Ok(m.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Synthetic,
    OutOfDomain,
}

/// Training instances of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: String,
    pub role: Role,
    pub train: Vec<Example>,
}

/// A task-homogeneous batch: indices into the task's training instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub task: String,
    pub items: Vec<usize>,
}

/// One epoch's groups. For each `(task, size, m)`, indices `0..size` are
/// repeated `m` times, shuffled, and chunked into groups of `n` (the last may
/// be short); the groups of all tasks are then shuffled together.
pub fn build_schedule(tasks: &[(String, usize, usize)], n: usize, rng: &mut StreamRng) -> Vec<Group> {
    let mut groups = Vec::new();
    for (task, size, m) in tasks {
        let mut idx: Vec<usize> = (0..*m).flat_map(|_| 0..*size).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(n.max(1)) {
            groups.push(Group {
                task: task.clone(),
                items: chunk.to_vec(),
            });
        }
    }
    groups.shuffle(rng);
    groups
}

/// Updates in an epoch of `groups` groups with `t` groups per update.
pub fn steps_per_epoch(groups: usize, t: usize) -> usize {
    groups.div_ceil(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValMetrics {
    pub f1: f64,
    pub intent_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    /// Training perplexity per task (with dropout), in task order.
    pub train_ppl: Vec<(String, f64)>,
    pub val: ValMetrics,
    pub steps: usize,
    pub groups: usize,
    /// Optimizer steps since the optimizer was created, including this epoch.
    pub adam_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Finetune => "finetune",
        })
    }
}

impl EpochStats {
    /// `epoch=… phase=… ppl.<task>=… val_f1=… val_intent_acc=… steps=…`
    pub fn log_line(&self) -> String {
        let mut s = format!("epoch={} phase={}", self.epoch, self.phase);
        for (task, p) in &self.train_ppl {
            s.push_str(&format!(" ppl.{task}={p:.4}"));
        }
        s.push_str(&format!(
            " val_f1={:.4} val_intent_acc={:.4} steps={}",
            self.val.f1, self.val.intent_accuracy, self.steps
        ));
        s
    }
}

/// Index of the epoch with the highest validation F1; ties go to the earlier.
pub fn select_best(history: &[EpochStats]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in history.iter().enumerate() {
        if best.is_none_or(|b| e.val.f1 > history[b].val.f1) {
            best = Some(i);
        }
    }
    best
}

/// Runs one epoch of `schedule` and returns per-task training perplexity and
/// the number of optimizer steps. A trailing partial accumulation is flushed.
pub fn train_epoch(
    model: &mut MultiTaskModel<f32>,
    data: &BTreeMap<&str, &[Example]>,
    schedule: &[Group],
    cfg: &TrainerConfig,
    adam: &mut Adam<f32>,
    dropout_rng: &mut StreamRng,
) -> Result<(Vec<(String, f64)>, usize)> {
    let mut nll: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut steps = 0;
    let mut pending = 0;
    model.store_mut().zero_grad();
    for (gi, group) in schedule.iter().enumerate() {
        let examples = data
            .get(group.task.as_str())
            .ok_or_else(|| TrainError::Config(format!("schedule names unknown task {}", group.task)))?;
        let batch: Vec<Example> = group.items.iter().map(|&i| examples[i].clone()).collect();
        let non_finite = |detail: String| TrainError::NonFinite {
            group: gi,
            task: group.task.clone(),
            detail,
        };
        let grads = {
            let mut g = Graph::new(model.store());
            let (loss, total, tokens) = match model.group_loss(&mut g, &batch, &mut Some(&mut *dropout_rng)) {
                Err(ModelError::Tensor(TensorError::NonFinite(op))) => {
                    return Err(non_finite(format!("forward pass produced non-finite values in {op}")))
                }
                r => r?,
            };
            if !total.is_finite() {
                return Err(non_finite(format!("loss {total}")));
            }
            let e = nll.entry(group.task.clone()).or_default();
            e.0 += total;
            e.1 += tokens;
            g.backward(loss)?
        };
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(non_finite("non-finite gradient".into()));
        }
        model.store_mut().accumulate(&grads)?;
        pending += 1;
        if pending == cfg.accumulate || gi + 1 == schedule.len() {
            update(model.store_mut(), cfg, adam)?;
            steps += 1;
            pending = 0;
        }
    }
    let ppl = model
        .tasks()
        .iter()
        .filter_map(|t| nll.get(t.as_str()).map(|&(n, k)| (t.clone(), crate::eval::perplexity(n, k))))
        .collect();
    Ok((ppl, steps))
}

fn update(store: &mut ParamStore<f32>, cfg: &TrainerConfig, adam: &mut Adam<f32>) -> Result<()> {
    if cfg.clip_norm > 0.0 {
        store.clip_grad_norm(cfg.clip_norm as f32);
    }
    adam.step(store)?;
    store.zero_grad();
    Ok(())
}

/// Outcome of a training or fine-tuning run.
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Index into `history` of the selected epoch.
    pub best: usize,
    /// Parameters at the selected epoch.
    pub best_params: ParamStore<f32>,
    pub adam_steps: u64,
}

/// Per-epoch callback: stats and the model as it is after that epoch.
pub type EpochHook<'a> = dyn FnMut(&EpochStats, &MultiTaskModel<f32>) -> Result<()> + 'a;
pub type Validator<'a> = dyn FnMut(&MultiTaskModel<f32>) -> Result<ValMetrics> + 'a;

fn multipliers(tasks: &[TaskData], cfg: &TrainerConfig) -> Result<Vec<(String, usize, usize)>> {
    let synth: Vec<&TaskData> = tasks.iter().filter(|t| t.role == Role::Synthetic).collect();
    if synth.len() != 1 {
        return Err(TrainError::Config(format!("expected exactly one synthetic task, found {}", synth.len())));
    }
    if let Some(t) = tasks.iter().find(|t| t.train.is_empty()) {
        return Err(TrainError::Config(format!("task {} has no training data", t.id)));
    }
    let ood: usize = tasks.iter().filter(|t| t.role == Role::OutOfDomain).map(|t| t.train.len()).sum();
    let m = match cfg.multiplier {
        Some(m) => m,
        None if ood == 0 => 1,
        None => compute_multiplier(ood, synth[0].train.len())?,
    };
    Ok(tasks
        .iter()
        .map(|t| (t.id.clone(), t.train.len(), if t.role == Role::Synthetic { m } else { 1 }))
        .collect())
}

fn run(
    model: &mut MultiTaskModel<f32>,
    tasks: &[TaskData],
    cfg: &TrainerConfig,
    epochs: usize,
    phase: Phase,
    validate: &mut Validator<'_>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if epochs == 0 {
        return Err(TrainError::Config("at least one epoch is required".into()));
    }
    for t in tasks {
        if model.tgt_vocab_size(&t.id).is_none() {
            return Err(ModelError::UnknownTask(t.id.clone()).into());
        }
    }
    let sizes = match phase {
        Phase::Train => multipliers(tasks, cfg)?,
        Phase::Finetune => tasks.iter().map(|t| (t.id.clone(), t.train.len(), 1)).collect(),
    };
    let data: BTreeMap<&str, &[Example]> = tasks.iter().map(|t| (t.id.as_str(), t.train.as_slice())).collect();
    let mut adam = Adam::new(cfg.adam(), model.store())?;
    let label = |l: &str| format!("{phase}.{l}");
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_params = model.store().clone();
    for epoch in 1..=epochs {
        let mut srng = stream(cfg.seed, &label("schedule"), epoch as u64);
        let schedule = build_schedule(&sizes, cfg.group_size, &mut srng);
        let mut drng = stream(cfg.seed, &label("dropout"), epoch as u64);
        let (train_ppl, steps) = train_epoch(model, &data, &schedule, cfg, &mut adam, &mut drng)?;
        let val = validate(model)?;
        let stats = EpochStats {
            epoch,
            phase,
            train_ppl,
            val,
            steps,
            groups: schedule.len(),
            adam_steps: adam.step_count(),
        };
        on_epoch(&stats, model)?;
        history.push(stats);
        if select_best(&history) == Some(history.len() - 1) {
            best_params = model.store().clone();
        }
    }
    let best = select_best(&history).expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best,
        best_params,
        adam_steps: adam.step_count(),
    })
}

/// Joint training of all tasks for `cfg.epochs` epochs.
pub fn train(
    model: &mut MultiTaskModel<f32>,
    tasks: &[TaskData],
    cfg: &TrainerConfig,
    validate: &mut Validator<'_>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    run(model, tasks, cfg, cfg.epochs, Phase::Train, validate, on_epoch)
}

/// Continues training on the synthetic task alone with a fresh optimizer.
pub fn finetune(
    model: &mut MultiTaskModel<f32>,
    tasks: &[TaskData],
    cfg: &TrainerConfig,
    validate: &mut Validator<'_>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    let synth = tasks
        .iter()
        .find(|t| t.role == Role::Synthetic)
        .ok_or_else(|| TrainError::Config("fine-tuning needs a synthetic task".into()))?;
    run(
        model,
        std::slice::from_ref(synth),
        cfg,
        cfg.finetune_epochs,
        Phase::Finetune,
        validate,
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn groups_of(sizes: &[(&str, usize, usize)], n: usize, seed: u64) -> Vec<Group> {
        let sizes: Vec<(String, usize, usize)> = sizes.iter().map(|(t, s, m)| (t.to_string(), *s, *m)).collect();
        build_schedule(&sizes, n, &mut stream(seed, "t", 0))
    }

    #[test]
    fn multiplier_examples() {
        assert_eq!(compute_multiplier(14_000_000, 17_679).unwrap(), 79);
        assert_eq!(compute_multiplier(1_000, 100).unwrap(), 1);
        assert_eq!(compute_multiplier(50, 100).unwrap(), 1);
        assert!(compute_multiplier(0, 10).is_err());
    }

    #[test]
    fn schedule_counting_example() {
        let g = groups_of(&[("a", 4, 2), ("b", 8, 1)], 2, 0);
        assert_eq!(g.len(), 8);
        assert_eq!(g.iter().filter(|x| x.task == "a").count(), 4);
        let g = groups_of(&[("a", 3, 1), ("b", 5, 1)], 100, 0);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn schedule_replication_counts() {
        let g = groups_of(&[("s", 7, 3), ("o", 11, 1)], 4, 9);
        let mut counts: BTreeMap<(&str, usize), usize> = BTreeMap::new();
        for grp in &g {
            for &i in &grp.items {
                *counts.entry((grp.task.as_str(), i)).or_default() += 1;
            }
        }
        assert!((0..7).all(|i| counts[&("s", i)] == 3));
        assert!((0..11).all(|i| counts[&("o", i)] == 1));
    }

    #[test]
    fn step_counts() {
        assert_eq!(steps_per_epoch(8, 3), 3);
        assert_eq!(steps_per_epoch(8, 1), 8);
        assert_eq!(steps_per_epoch(9, 3), 3);
    }

    fn stats(f1s: &[f64]) -> Vec<EpochStats> {
        f1s.iter()
            .enumerate()
            .map(|(i, &f1)| EpochStats {
                epoch: i + 1,
                phase: Phase::Train,
                train_ppl: vec![],
                val: ValMetrics { f1, intent_accuracy: 0.0 },
                steps: 1,
                groups: 1,
                adam_steps: 1,
            })
            .collect()
    }

    #[test]
    fn best_epoch_selection() {
        assert_eq!(select_best(&stats(&[0.5, 0.7, 0.6])), Some(1));
        assert_eq!(select_best(&stats(&[0.7, 0.7])), Some(0));
        assert_eq!(select_best(&stats(&[0.1])), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    fn toy() -> (MultiTaskModel<f32>, Vec<TaskData>) {
        let cfg = ModelConfig {
            emb_size: 8,
            hidden_size: 8,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.1,
            bidirectional: false,
            init_range: 0.1,
        };
        let tasks = vec![("syn".to_string(), 10), ("ood".to_string(), 10)];
        let model = MultiTaskModel::new(cfg, 10, &tasks, 3).unwrap();
        let ex = |task: &str, i: usize| Example {
            task: task.into(),
            src: vec![4 + i % 6, 4 + (i + 1) % 6],
            tgt: vec![4 + (i + 2) % 6],
        };
        let data = vec![
            TaskData {
                id: "syn".into(),
                role: Role::Synthetic,
                train: (0..5).map(|i| ex("syn", i)).collect(),
            },
            TaskData {
                id: "ood".into(),
                role: Role::OutOfDomain,
                train: (0..7).map(|i| ex("ood", i)).collect(),
            },
        ];
        (model, data)
    }

    fn zero_val(_: &MultiTaskModel<f32>) -> Result<ValMetrics> {
        Ok(ValMetrics { f1: 0.0, intent_accuracy: 0.0 })
    }

    #[test]
    fn steps_match_group_count() {
        let (mut model, data) = toy();
        let cfg = TrainerConfig {
            group_size: 2,
            accumulate: 3,
            multiplier: Some(2),
            epochs: 2,
            ..TrainerConfig::default()
        };
        let out = train(&mut model, &data, &cfg, &mut zero_val, &mut |_, _| Ok(())).unwrap();
        // syn: 10 instances -> 5 groups; ood: 7 -> 4 groups
        for e in &out.history {
            assert_eq!(e.groups, 9);
            assert_eq!(e.steps, 3);
        }
        assert_eq!(out.adam_steps, 6);
        assert!(e_line_has_keys(&out.history[0].log_line()));
    }

    fn e_line_has_keys(l: &str) -> bool {
        ["epoch=1", "ppl.syn=", "ppl.ood=", "val_f1=", "val_intent_acc=", "steps=3"]
            .iter()
            .all(|k| l.contains(k))
    }

    #[test]
    fn finetune_leaves_other_heads_untouched() {
        let (mut model, data) = toy();
        let cfg = TrainerConfig {
            group_size: 2,
            accumulate: 2,
            epochs: 1,
            finetune_epochs: 2,
            ..TrainerConfig::default()
        };
        train(&mut model, &data, &cfg, &mut zero_val, &mut |_, _| Ok(())).unwrap();
        let before = model.store().clone();
        let out = finetune(&mut model, &data, &cfg, &mut zero_val, &mut |_, _| Ok(())).unwrap();
        // 5 synthetic instances in groups of 2 -> 3 groups -> 2 steps per epoch
        assert_eq!(out.adam_steps, 4);
        let (shared, heads) = model.param_partition();
        for &id in &heads["ood"] {
            assert_eq!(before.get(id).data(), model.store().get(id).data());
        }
        let changed = |ids: &[crate::tensor::ParamId]| ids.iter().any(|&id| before.get(id).data() != model.store().get(id).data());
        assert!(changed(&heads["syn"]));
        assert!(changed(&shared));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainerConfig {
            group_size: 3,
            accumulate: 2,
            epochs: 2,
            ..TrainerConfig::default()
        };
        let run = || {
            let (mut model, data) = toy();
            train(&mut model, &data, &cfg, &mut zero_val, &mut |_, _| Ok(())).unwrap();
            model.store().iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn needs_exactly_one_synthetic_task() {
        let (mut model, mut data) = toy();
        data[0].role = Role::OutOfDomain;
        let err = train(&mut model, &data, &TrainerConfig::default(), &mut zero_val, &mut |_, _| Ok(()));
        assert!(matches!(err, Err(TrainError::Config(_))));
        assert!(finetune(&mut model, &data, &TrainerConfig::default(), &mut zero_val, &mut |_, _| Ok(())).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_group() {
        let (mut model, data) = toy();
        let cfg = TrainerConfig {
            group_size: 1,
            accumulate: 1,
            epochs: 3,
            lr: 1e30,
            clip_norm: 0.0,
            ..TrainerConfig::default()
        };
        match train(&mut model, &data, &cfg, &mut zero_val, &mut |_, _| Ok(())) {
            Err(TrainError::NonFinite { task, .. }) => assert!(task == "syn" || task == "ood"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("training with lr 1e30 should blow up"),
        }
    }
}
