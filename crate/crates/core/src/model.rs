//! Attention-based encoder-decoder with one shared source embedding and
//! encoder, and a separate attention/decoder/generator head per task.
//!
//! Parameter names follow a fixed scheme so checkpoints can be matched by
//! name: `shared.*` for the embedding and encoder, `head.<task>.*` for
//! everything a task owns.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BOS_ID, EOS_ID};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Graph, Mode, NodeId, ParamId, ParamStore, Reduction, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no head for task {0:?}")]
    UnknownTask(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub emb_size: usize,
    pub hidden_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    /// Parameters start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb_size: 1024,
            hidden_size: 256,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.3,
            bidirectional: false,
            init_range: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_size == 0 || self.hidden_size == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ModelError::Config("sizes and layer counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(ModelError::Config(format!("init_range {} must be finite and non-negative", self.init_range)));
        }
        Ok(())
    }
}

/// One instance with ids already mapped; `tgt` excludes BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: String,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Target positions scored by the loss (the target plus EOS).
    pub fn scored_tokens(&self) -> usize {
        self.tgt.len() + 1
    }
}

#[derive(Debug, Clone)]
struct LstmIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct SharedIds {
    src_emb: ParamId,
    fwd: Vec<LstmIds>,
    bwd: Vec<LstmIds>,
    /// Bidirectional only: projection of `[fwd; bwd]` outputs to hidden size.
    proj: Option<LstmIds>,
    /// Bidirectional only: per layer, maps `[h_fwd; h_bwd]` and `[c_fwd; c_bwd]`
    /// to the decoder's initial state.
    bridge: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct HeadIds {
    tgt_vocab: usize,
    tgt_emb: ParamId,
    dec: Vec<LstmIds>,
    attn_ws: ParamId,
    attn_wh: ParamId,
    attn_v: ParamId,
    combine: LstmIds,
    gen: LstmIds,
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel<F> {
    config: ModelConfig,
    src_vocab: usize,
    store: ParamStore<F>,
    shared: SharedIds,
    heads: BTreeMap<String, HeadIds>,
    task_order: Vec<String>,
}

/// Encoder output for one source sentence.
pub struct Encoded {
    /// `S × hidden` top-layer states.
    pub states: NodeId,
    /// `states · W_h` for one head, filled lazily by [`MultiTaskModel::attend`].
    keys: Option<NodeId>,
    /// Per-layer final `(h, c)` used to start the decoder.
    pub finals: Vec<(NodeId, NodeId)>,
    pub len: usize,
}

/// Decoder recurrent state between steps.
#[derive(Clone)]
pub struct DecoderState {
    h: Vec<NodeId>,
    c: Vec<NodeId>,
    ctx: NodeId,
}

fn lstm_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut StreamRng,
    range: f64,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Result<LstmIds> {
    Ok(LstmIds {
        w: add_uniform(store, rng, range, &format!("{prefix}.w"), vec![input + hidden, 4 * hidden])?,
        b: add_uniform(store, rng, range, &format!("{prefix}.b"), vec![4 * hidden])?,
    })
}

fn add_uniform<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut StreamRng,
    range: f64,
    name: &str,
    shape: Vec<usize>,
) -> Result<ParamId> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::lit(if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 }))
        .collect();
    Ok(store.add(name, Tensor::new(shape, data)?)?)
}

fn linear_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut StreamRng,
    range: f64,
    prefix: &str,
    input: usize,
    output: usize,
) -> Result<LstmIds> {
    Ok(LstmIds {
        w: add_uniform(store, rng, range, &format!("{prefix}.w"), vec![input, output])?,
        b: add_uniform(store, rng, range, &format!("{prefix}.b"), vec![output])?,
    })
}

impl<F: Scalar> MultiTaskModel<F> {
    /// Builds a model with one head per `(task, target vocab size)`, drawing
    /// initial values from the `init` stream of `seed` in registration order.
    pub fn new(config: ModelConfig, src_vocab: usize, tasks: &[(String, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        if src_vocab == 0 || tasks.iter().any(|(_, v)| *v == 0) {
            return Err(ModelError::Config("vocabulary sizes must be at least 1".into()));
        }
        if tasks.is_empty() {
            return Err(ModelError::Config("a model needs at least one task".into()));
        }
        let (e, h, r) = (config.emb_size, config.hidden_size, config.init_range);
        let mut rng = stream(seed, "init", 0);
        let mut store = ParamStore::new();

        let src_emb = add_uniform(&mut store, &mut rng, r, "shared.src_emb", vec![src_vocab, e])?;
        let dirs = if config.bidirectional { 2 } else { 1 };
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for l in 0..config.enc_layers {
            let input = if l == 0 { e } else { h * dirs };
            if config.bidirectional {
                fwd.push(lstm_params(&mut store, &mut rng, r, &format!("shared.enc.l{l}.fwd"), input, h)?);
                bwd.push(lstm_params(&mut store, &mut rng, r, &format!("shared.enc.l{l}.bwd"), input, h)?);
            } else {
                fwd.push(lstm_params(&mut store, &mut rng, r, &format!("shared.enc.l{l}"), input, h)?);
            }
        }
        let mut proj = None;
        let mut bridge = Vec::new();
        if config.bidirectional {
            proj = Some(linear_params(&mut store, &mut rng, r, "shared.enc.proj", 2 * h, h)?);
            for l in 0..config.enc_layers {
                bridge.push((
                    add_uniform(&mut store, &mut rng, r, &format!("shared.enc.bridge.l{l}.h"), vec![2 * h, h])?,
                    add_uniform(&mut store, &mut rng, r, &format!("shared.enc.bridge.l{l}.c"), vec![2 * h, h])?,
                ));
            }
        }
        let shared = SharedIds {
            src_emb,
            fwd,
            bwd,
            proj,
            bridge,
        };

        let mut heads = BTreeMap::new();
        let mut task_order = Vec::new();
        for (task, v) in tasks {
            if heads.contains_key(task) {
                return Err(ModelError::Config(format!("task {task} declared twice")));
            }
            let p = format!("head.{task}");
            let tgt_emb = add_uniform(&mut store, &mut rng, r, &format!("{p}.tgt_emb"), vec![*v, e])?;
            let dec = (0..config.dec_layers)
                .map(|l| {
                    let input = if l == 0 { e + h } else { h };
                    lstm_params(&mut store, &mut rng, r, &format!("{p}.dec.l{l}"), input, h)
                })
                .collect::<Result<Vec<_>>>()?;
            let head = HeadIds {
                tgt_vocab: *v,
                tgt_emb,
                dec,
                attn_ws: add_uniform(&mut store, &mut rng, r, &format!("{p}.attn.w_s"), vec![h, h])?,
                attn_wh: add_uniform(&mut store, &mut rng, r, &format!("{p}.attn.w_h"), vec![h, h])?,
                attn_v: add_uniform(&mut store, &mut rng, r, &format!("{p}.attn.v"), vec![h, 1])?,
                combine: linear_params(&mut store, &mut rng, r, &format!("{p}.combine"), 2 * h, h)?,
                gen: linear_params(&mut store, &mut rng, r, &format!("{p}.gen"), h, *v)?,
            };
            heads.insert(task.clone(), head);
            task_order.push(task.clone());
        }
        Ok(MultiTaskModel {
            config,
            src_vocab,
            store,
            shared,
            heads,
            task_order,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn src_vocab_size(&self) -> usize {
        self.src_vocab
    }

    pub fn tgt_vocab_size(&self, task: &str) -> Option<usize> {
        self.heads.get(task).map(|h| h.tgt_vocab)
    }

    /// Task ids in declaration order.
    pub fn tasks(&self) -> &[String] {
        &self.task_order
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> MultiTaskModel<G> {
        MultiTaskModel {
            config: self.config.clone(),
            src_vocab: self.src_vocab,
            store: self.store.cast(),
            shared: self.shared.clone(),
            heads: self.heads.clone(),
            task_order: self.task_order.clone(),
        }
    }

    /// Shared parameter ids and the ids owned by each head.
    pub fn param_partition(&self) -> (Vec<ParamId>, BTreeMap<String, Vec<ParamId>>) {
        let mut shared = Vec::new();
        let mut heads: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
        for (id, name, _) in self.store.iter() {
            if name.starts_with("shared.") {
                shared.push(id);
            } else {
                let task = self
                    .task_order
                    .iter()
                    .find(|t| name.strip_prefix("head.").and_then(|r| r.strip_prefix(t.as_str())).is_some_and(|r| r.starts_with('.')))
                    .expect("every head parameter belongs to a declared task");
                heads.entry(task.clone()).or_default().push(id);
            }
        }
        (shared, heads)
    }

    fn head(&self, task: &str) -> Result<&HeadIds> {
        self.heads.get(task).ok_or_else(|| ModelError::UnknownTask(task.to_string()))
    }

    fn dropout<'g>(&self, g: &mut Graph<'g, F>, x: NodeId, rng: &mut Option<&mut StreamRng>) -> Result<NodeId> {
        match rng {
            Some(r) => Ok(g.dropout(x, self.config.dropout, Mode::Train, &mut **r)?),
            None => Ok(x),
        }
    }

    fn linear<'g>(&self, g: &mut Graph<'g, F>, x: NodeId, p: &LstmIds) -> Result<NodeId> {
        let w = g.param(p.w)?;
        let b = g.param(p.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn run_lstm<'g>(&self, g: &mut Graph<'g, F>, inputs: &[NodeId], p: &LstmIds, reverse: bool) -> Result<(Vec<NodeId>, NodeId, NodeId)> {
        let hidden = self.config.hidden_size;
        let w = g.param(p.w)?;
        let b = g.param(p.b)?;
        let mut h = g.zeros(1, hidden)?;
        let mut c = g.zeros(1, hidden)?;
        let mut out = vec![h; inputs.len()];
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for i in order {
            (h, c) = g.lstm_cell(inputs[i], h, c, w, b)?;
            out[i] = h;
        }
        Ok((out, h, c))
    }

    /// Embeds and encodes a source sentence. `rng` enables dropout.
    pub fn encode<'g>(&self, g: &mut Graph<'g, F>, src: &[usize], rng: &mut Option<&mut StreamRng>) -> Result<Encoded> {
        if src.is_empty() {
            return Err(TensorError::Argument("empty source sequence".into()).into());
        }
        let table = g.param(self.shared.src_emb)?;
        let mut layer_in = Vec::with_capacity(src.len());
        for &id in src {
            let e = g.gather(table, &[id])?;
            layer_in.push(self.dropout(g, e, rng)?);
        }
        let mut finals = Vec::new();
        let n_layers = self.config.enc_layers;
        for l in 0..n_layers {
            let (outs, h, c) = self.run_lstm(g, &layer_in, &self.shared.fwd[l], false)?;
            let (outs, h, c) = if self.config.bidirectional {
                let (bouts, bh, bc) = self.run_lstm(g, &layer_in, &self.shared.bwd[l], true)?;
                let (wh, wc) = self.shared.bridge[l];
                let (wh, wc) = (g.param(wh)?, g.param(wc)?);
                let hh = g.concat_cols(&[h, bh])?;
                let cc = g.concat_cols(&[c, bc])?;
                let hp = g.matmul(hh, wh)?;
                let h0 = g.tanh(hp)?;
                let c0 = g.matmul(cc, wc)?;
                let joined = outs
                    .iter()
                    .zip(&bouts)
                    .map(|(&f, &b)| g.concat_cols(&[f, b]))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (joined, h0, c0)
            } else {
                (outs, h, c)
            };
            finals.push((h, c));
            layer_in = if l + 1 < n_layers {
                outs.into_iter().map(|o| self.dropout(g, o, rng)).collect::<Result<_>>()?
            } else {
                outs
            };
        }
        let mut states = g.concat_rows(&layer_in)?;
        if let Some(p) = &self.shared.proj {
            states = self.linear(g, states, p)?;
        }
        Ok(Encoded {
            states,
            keys: None,
            finals,
            len: src.len(),
        })
    }

    /// Additive attention of one decoder state over the encoder states:
    /// `e_j = vᵀ tanh(W_s s + W_h h_j)`, weights `softmax(e)`, context
    /// `Σ_j w_j h_j`. Returns `(context, weights)`.
    pub fn attend<'g>(&self, g: &mut Graph<'g, F>, task: &str, dec_state: NodeId, enc: &mut Encoded) -> Result<(NodeId, NodeId)> {
        let head = self.head(task)?;
        if enc.len == 0 {
            return Err(TensorError::Argument("attention over no states".into()).into());
        }
        let keys = match enc.keys {
            Some(k) => k,
            None => {
                let wh = g.param(head.attn_wh)?;
                let k = g.matmul(enc.states, wh)?;
                enc.keys = Some(k);
                k
            }
        };
        let ws = g.param(head.attn_ws)?;
        let v = g.param(head.attn_v)?;
        let q = g.matmul(dec_state, ws)?;
        let pre = g.add_row(keys, q)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, v)?;
        let scores = g.reshape(scores, 1, enc.len)?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, enc.states)?;
        Ok((ctx, weights))
    }

    pub fn init_decoder<'g>(&self, g: &mut Graph<'g, F>, enc: &Encoded) -> Result<DecoderState> {
        let hidden = self.config.hidden_size;
        let mut h = Vec::new();
        let mut c = Vec::new();
        for l in 0..self.config.dec_layers {
            match enc.finals.get(l) {
                Some(&(eh, ec)) => {
                    h.push(eh);
                    c.push(ec);
                }
                None => {
                    h.push(g.zeros(1, hidden)?);
                    c.push(g.zeros(1, hidden)?);
                }
            }
        }
        let ctx = g.zeros(1, hidden)?;
        Ok(DecoderState { h, c, ctx })
    }

    /// One decoder step from the previous token; returns generator logits.
    pub fn decode_step<'g>(
        &self,
        g: &mut Graph<'g, F>,
        task: &str,
        prev: usize,
        state: &mut DecoderState,
        enc: &mut Encoded,
        rng: &mut Option<&mut StreamRng>,
    ) -> Result<NodeId> {
        let head = self.head(task)?.clone();
        let table = g.param(head.tgt_emb)?;
        let emb = g.gather(table, &[prev])?;
        let emb = self.dropout(g, emb, rng)?;
        let mut x = g.concat_cols(&[emb, state.ctx])?;
        for (l, p) in head.dec.iter().enumerate() {
            if l > 0 {
                x = self.dropout(g, x, rng)?;
            }
            let w = g.param(p.w)?;
            let b = g.param(p.b)?;
            let (h, c) = g.lstm_cell(x, state.h[l], state.c[l], w, b)?;
            state.h[l] = h;
            state.c[l] = c;
            x = h;
        }
        let (ctx, _) = self.attend(g, task, x, enc)?;
        state.ctx = ctx;
        let joined = g.concat_cols(&[x, ctx])?;
        let pre = self.linear(g, joined, &head.combine)?;
        let attn_h = g.tanh(pre)?;
        let attn_h = self.dropout(g, attn_h, rng)?;
        self.linear(g, attn_h, &head.gen)
    }

    /// Summed teacher-forced NLL of `ex.tgt` followed by EOS.
    pub fn example_nll<'g>(&self, g: &mut Graph<'g, F>, ex: &Example, rng: &mut Option<&mut StreamRng>) -> Result<NodeId> {
        let head = self.head(&ex.task)?;
        if let Some(&bad) = ex.tgt.iter().find(|&&t| t >= head.tgt_vocab) {
            return Err(TensorError::Argument(format!("target id {bad} out of range for {}", head.tgt_vocab)).into());
        }
        let mut enc = self.encode(g, &ex.src, rng)?;
        let mut state = self.init_decoder(g, &enc)?;
        let mut prev = BOS_ID;
        let mut logits = Vec::with_capacity(ex.scored_tokens());
        for &t in ex.tgt.iter().chain(std::iter::once(&EOS_ID)) {
            logits.push(self.decode_step(g, &ex.task, prev, &mut state, &mut enc, rng)?);
            prev = t;
        }
        let all = g.concat_rows(&logits)?;
        let targets: Vec<usize> = ex.tgt.iter().copied().chain(std::iter::once(EOS_ID)).collect();
        Ok(g.cross_entropy(all, &targets, None, Reduction::Sum)?)
    }

    /// Loss of a group: summed token NLL over all examples divided by the
    /// total number of scored tokens. Returns `(loss, summed nll, tokens)`.
    pub fn group_loss<'g>(
        &self,
        g: &mut Graph<'g, F>,
        examples: &[Example],
        rng: &mut Option<&mut StreamRng>,
    ) -> Result<(NodeId, f64, usize)> {
        if examples.is_empty() {
            return Err(TensorError::Argument("empty group".into()).into());
        }
        let nll = examples
            .iter()
            .map(|ex| self.example_nll(g, ex, rng))
            .collect::<Result<Vec<_>>>()?;
        let total = g.sum(&nll)?;
        let tokens: usize = examples.iter().map(Example::scored_tokens).sum();
        let loss = g.scale(total, F::lit(1.0 / tokens as f64))?;
        Ok((loss, g.scalar(total).as_f64(), tokens))
    }

    /// Mean token NLL of one example.
    pub fn forward_loss(&self, ex: &Example, rng: Option<&mut StreamRng>) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let (loss, _, _) = self.group_loss(&mut g, std::slice::from_ref(ex), &mut { rng })?;
        Ok(g.scalar(loss).as_f64())
    }

    /// `exp(total NLL / total scored tokens)` without dropout.
    pub fn perplexity(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(TensorError::Argument("perplexity of an empty dataset".into()).into());
        }
        let mut nll = 0.0;
        let mut tokens = 0;
        for ex in examples {
            let mut g = Graph::new(&self.store);
            let n = self.example_nll(&mut g, ex, &mut None)?;
            nll += g.scalar(n).as_f64();
            tokens += ex.scored_tokens();
        }
        Ok(crate::eval::perplexity(nll, tokens))
    }

    /// Greedy decoding without dropout. Stops at EOS (not included in the
    /// output) or after `max_len` tokens; ties go to the lowest id.
    pub fn greedy_decode(&self, src: &[usize], task: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(TensorError::Argument("max_len must be at least 1".into()).into());
        }
        self.head(task)?;
        let mut g = Graph::new(&self.store);
        let mut enc = self.encode(&mut g, src, &mut None)?;
        let mut state = self.init_decoder(&mut g, &enc)?;
        let mut prev = BOS_ID;
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_step(&mut g, task, prev, &mut state, &mut enc, &mut None)?;
            let next = argmax(g.value(logits));
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
