//! Micro-averaged F1 over intents and parameters, and intent accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;
use std::hash::Hash;
use std::ops::AddAssign;

use thiserror::Error;

use crate::corpus::{parse_target, Fragment, Lexicon, Param, ParsedFrame, SemanticFrame};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{refs} reference lines but {hyps} hypothesis lines")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn multiset<T: Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, u64> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

fn overlap<T: Hash + Eq>(r: &HashMap<T, u64>, h: &HashMap<T, u64>) -> MatchCounts {
    let tp: u64 = r.iter().map(|(k, c)| (*c).min(h.get(k).copied().unwrap_or(0))).sum();
    MatchCounts {
        tp,
        fp: h.values().sum::<u64>() - tp,
        fn_: r.values().sum::<u64>() - tp,
    }
}

/// Multiset match of intents and whole `(slot, value)` parameters.
pub fn count_frames(reference: &SemanticFrame, hypothesis: &SemanticFrame) -> MatchCounts {
    let mut c = overlap(&multiset(&reference.intents), &multiset(&hypothesis.intents));
    c += overlap(&multiset(&reference.params), &multiset(&hypothesis.params));
    c
}

/// As [`count_frames`], with every malformed hypothesis fragment counted as
/// one false positive.
pub fn count_matches(reference: &SemanticFrame, hypothesis: &ParsedFrame) -> MatchCounts {
    let mut c = count_frames(reference, &hypothesis.frame);
    c.fp += hypothesis.malformed.len() as u64;
    c
}

/// `(precision, recall, f1)`; each is 0 when its denominator is 0.
pub fn micro_f1(c: MatchCounts) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Fraction of pairs whose intent multisets are equal.
pub fn intent_accuracy(refs: &[SemanticFrame], hyps: &[SemanticFrame]) -> Result<f64, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = refs
        .iter()
        .zip(hyps)
        .filter(|(r, h)| multiset(&r.intents) == multiset(&h.intents))
        .count();
    Ok(correct as f64 / refs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub intent_accuracy: f64,
    pub sentences: usize,
    /// Parameter counts by slot name; empty-slot fragments count against their slot.
    pub per_slot: BTreeMap<String, MatchCounts>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "sentences: {}\ntp: {}\nfp: {}\nfn: {}\nprecision: {:.6}\nrecall: {:.6}\nf1: {:.6}\nintent_accuracy: {:.6}\n",
            self.sentences,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.precision,
            self.recall,
            self.f1,
            self.intent_accuracy
        )
    }

    pub fn per_slot_csv(&self) -> String {
        let mut out = String::from("slot,tp,fp,fn,precision,recall,f1\n");
        for (slot, c) in &self.per_slot {
            let (p, r, f) = micro_f1(*c);
            writeln!(out, "{slot},{},{},{},{p:.6},{r:.6},{f:.6}", c.tp, c.fp, c.fn_).unwrap();
        }
        out
    }
}

fn only_slot<'a>(m: &HashMap<&'a Param, u64>, slot: &str) -> HashMap<&'a Param, u64> {
    m.iter().filter(|(p, _)| p.slot == slot).map(|(p, c)| (*p, *c)).collect()
}

fn slot_counts(reference: &SemanticFrame, hyp: &ParsedFrame, into: &mut BTreeMap<String, MatchCounts>) {
    let r = multiset(&reference.params);
    let h = multiset(&hyp.frame.params);
    let mut slots: Vec<&str> = reference.slot_names().chain(hyp.frame.slot_names()).collect();
    slots.sort_unstable();
    slots.dedup();
    for slot in slots {
        *into.entry(slot.to_string()).or_default() += overlap(&only_slot(&r, slot), &only_slot(&h, slot));
    }
    for f in &hyp.malformed {
        if let Fragment::EmptySlot(s) = f {
            into.entry(s.clone()).or_default().fp += 1;
        }
    }
}

/// Parses both sides line by line and accumulates counts.
pub fn corpus_eval<S: AsRef<str>>(
    refs: &[Vec<S>],
    hyps: &[Vec<S>],
    lexicon: &Lexicon,
) -> Result<EvalReport, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut counts = MatchCounts::default();
    let mut per_slot = BTreeMap::new();
    let mut ref_frames = Vec::with_capacity(refs.len());
    let mut hyp_frames = Vec::with_capacity(refs.len());
    for (r, h) in refs.iter().zip(hyps) {
        let r = parse_target(r, lexicon).frame;
        let h = parse_target(h, lexicon);
        counts += count_matches(&r, &h);
        slot_counts(&r, &h, &mut per_slot);
        ref_frames.push(r);
        hyp_frames.push(h.frame);
    }
    let (precision, recall, f1) = micro_f1(counts);
    let intent_accuracy = if refs.is_empty() {
        0.0
    } else {
        intent_accuracy(&ref_frames, &hyp_frames)?
    };
    Ok(EvalReport {
        counts,
        precision,
        recall,
        f1,
        intent_accuracy,
        sentences: refs.len(),
        per_slot,
    })
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    if tokens == 0 {
        return f64::NAN;
    }
    (total_nll / tokens as f64).exp()
}
