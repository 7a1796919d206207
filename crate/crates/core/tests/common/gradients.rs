//! Finite-difference checks shared by the gradient tests and the acceptance run.

use mtnlu::model::{Example, ModelConfig, ModelError, MultiTaskModel};
use mtnlu::rng::stream;
use mtnlu::tensor::{finite_diff_check, GradCheckConfig, GradCheckReport};
use mtnlu::tensor::{Graph, Mode, NodeId, ParamStore, Reduction, Result, Tensor};
use rand::Rng;

pub const SEEDS: u64 = 20;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;

/// One named check and its worst relative error.
pub type Outcome = (String, f64);

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

/// Reduces any node to a scalar through a fixed random weighting so that
/// every output coordinate contributes a distinct amount.
fn probe(g: &mut Graph<'_, f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = g.dims(x);
    let mut rng = stream(seed, "probe", (r * 1000 + c) as u64);
    let w: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.input(r, c, w)?;
    let weighted = g.mul(x, w)?;
    let ones_r = g.input(1, r, vec![1.0; r])?;
    let ones_c = g.input(c, 1, vec![1.0; c])?;
    let row = g.matmul(ones_r, weighted)?;
    g.matmul(row, ones_c)
}

/// Builds a store of random parameters with the given shapes and checks
/// `build` (which maps parameter nodes to an output) over every coordinate.
fn check<B>(name: &str, seed: u64, shapes: &[(usize, usize)], build: B) -> Outcome
where
    B: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = stream(seed, name, 0);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), random_tensor(&mut rng, r, c)).unwrap())
        .collect();
    let report = finite_diff_check(
        &mut store,
        |g| {
            let nodes = ids.iter().map(|&id| g.param(id)).collect::<Result<Vec<_>>>()?;
            let out = build(g, &nodes)?;
            if g.dims(out) == (1, 1) {
                Ok(out)
            } else {
                probe(g, out, seed)
            }
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    (format!("{name} seed {seed}"), report.max_rel_error)
}

fn dims(seed: u64, tag: &str) -> (usize, usize, usize) {
    let mut rng = stream(seed, tag, 1);
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

pub fn arithmetic(s: u64) -> Vec<Outcome> {
    let (m, k, n) = dims(s, "mm");
    vec![
        check("matmul", s, &[(m, k), (k, n)], |g, p| g.matmul(p[0], p[1])),
        check("add", s, &[(m, n), (m, n)], |g, p| g.add(p[0], p[1])),
        check("mul", s, &[(m, n), (m, n)], |g, p| g.mul(p[0], p[1])),
        check("mul_self", s, &[(m, n)], |g, p| g.mul(p[0], p[0])),
        check("add_row", s, &[(m, n), (1, n)], |g, p| g.add_row(p[0], p[1])),
        check("scale", s, &[(m, n)], |g, p| g.scale(p[0], -1.7)),
    ]
}

pub fn nonlinearities(s: u64) -> Vec<Outcome> {
    let (m, n, _) = dims(s, "nl");
    vec![
        check("tanh", s, &[(m, n)], |g, p| g.tanh(p[0])),
        check("sigmoid", s, &[(m, n)], |g, p| g.sigmoid(p[0])),
        check("softmax", s, &[(m, n + 1)], |g, p| g.softmax(p[0])),
    ]
}

pub fn shapes(s: u64) -> Vec<Outcome> {
    let (m, a, b) = dims(s, "shape");
    vec![
        check("concat_cols", s, &[(m, a), (m, b)], |g, p| g.concat_cols(&[p[0], p[1], p[0]])),
        check("concat_rows", s, &[(a, m), (b, m)], |g, p| g.concat_rows(&[p[1], p[0]])),
        check("slice_cols", s, &[(m, a + b)], |g, p| g.slice_cols(p[0], a.min(b), a.max(b) - a.min(b) + 1)),
        check("reshape", s, &[(m, a * b)], |g, p| g.reshape(p[0], m * a, b)),
        check("sum", s, &[(m, a), (m, a), (m, a)], |g, p| g.sum(&[p[0], p[1], p[2], p[0]])),
    ]
}

pub fn gather(s: u64) -> Vec<Outcome> {
    let (rows, cols, n) = dims(s, "gather");
    let mut rng = stream(s, "ids", 0);
    let ids: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..rows + 1)).collect();
    vec![check("gather", s, &[(rows + 1, cols)], |g, p| g.gather(p[0], &ids))]
}

pub fn dropout(s: u64) -> Vec<Outcome> {
    let (m, n, _) = dims(s, "drop");
    vec![check("dropout", s, &[(m, n)], |g, p| {
        let mut rng = stream(s, "mask", 0);
        g.dropout(p[0], 0.3, Mode::Train, &mut rng)
    })]
}

pub fn lstm_cell(s: u64) -> Vec<Outcome> {
    let (rows, input, hidden) = dims(s, "lstm");
    let shapes = [(rows, input), (rows, hidden), (rows, hidden), (input + hidden, 4 * hidden), (1, 4 * hidden)];
    vec![check("lstm_cell", s, &shapes, |g, p| {
        let (h, c) = g.lstm_cell(p[0], p[1], p[2], p[3], p[4])?;
        g.concat_cols(&[h, c])
    })]
}

pub fn cross_entropy(s: u64) -> Vec<Outcome> {
    let (n, v, _) = dims(s, "ce");
    let v = v + 1;
    let mut rng = stream(s, "targets", 0);
    let targets: Vec<usize> = (0..n + 1).map(|_| rng.gen_range(0..v)).collect();
    let pad = Some(targets[0]).filter(|_| targets.iter().any(|&t| t != targets[0]));
    vec![
        check("ce_sum", s, &[(n + 1, v)], |g, p| g.cross_entropy(p[0], &targets, None, Reduction::Sum)),
        check("ce_mean_pad", s, &[(n + 1, v)], |g, p| g.cross_entropy(p[0], &targets, pad, Reduction::Mean)),
    ]
}

/// Every primitive family, by name.
pub const FAMILIES: [(&str, fn(u64) -> Vec<Outcome>); 7] = [
    ("arithmetic", arithmetic),
    ("nonlinearities", nonlinearities),
    ("shapes", shapes),
    ("gather", gather),
    ("dropout", dropout),
    ("lstm_cell", lstm_cell),
    ("cross_entropy", cross_entropy),
];

fn toy_examples(seed: u64) -> Vec<Example> {
    let mut rng = stream(seed, "toy", 0);
    let mut seq = |lo: usize| -> Vec<usize> { (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(lo..12)).collect() };
    vec![
        Example { task: "a".into(), src: seq(1), tgt: seq(4) },
        Example { task: "a".into(), src: seq(4), tgt: seq(1) },
        Example { task: "b".into(), src: seq(1), tgt: seq(4) },
    ]
}

/// Checks the summed group losses of a two-task model over every parameter.
pub fn model_check(config: ModelConfig, seed: u64) -> GradCheckReport {
    let tasks = [("a".to_string(), 12), ("b".to_string(), 12)];
    let model = MultiTaskModel::<f64>::new(config, 12, &tasks, seed).unwrap();
    let examples = toy_examples(seed);
    let mut store = model.store().clone();
    finite_diff_check(
        &mut store,
        |g| {
            let mut rng = stream(seed, "dropout", 0);
            let mut total = Vec::new();
            for task in ["a", "b"] {
                let group: Vec<Example> = examples.iter().filter(|e| e.task == task).cloned().collect();
                let (loss, _, _) = model.group_loss(g, &group, &mut Some(&mut rng)).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                total.push(loss);
            }
            g.sum(&total)
        },
        &GradCheckConfig::default(),
    )
    .unwrap()
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        emb_size: 8,
        hidden_size: 6,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.0,
        bidirectional: false,
        // At small init the attention projection of the decoder state gets
        // gradients near 1e-12, below what finite differences can resolve.
        init_range: 1.0,
    }
}
