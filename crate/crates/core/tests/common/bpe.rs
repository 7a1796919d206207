//! Brute-force BPE learner and input strategies.

use std::collections::BTreeMap;

use mtnlu::bpe::EOW;
use proptest::prelude::*;

/// Independent learner: every word occurrence is its own symbol list and
/// pair counts are recomputed by scanning all positions each step.
pub fn oracle_learn(freqs: &BTreeMap<String, u64>, limit: usize) -> Vec<(String, String)> {
    let mut corpus: Vec<Vec<String>> = Vec::new();
    for (w, &c) in freqs {
        for _ in 0..c {
            let mut syms: Vec<String> = w.chars().map(|ch| ch.to_string()).collect();
            syms.push(EOW.to_string());
            corpus.push(syms);
        }
    }
    let mut out: Vec<(String, String)> = Vec::new();
    while out.len() < limit {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for syms in &corpus {
            for i in 0..syms.len().saturating_sub(1) {
                pairs.push((syms[i].clone(), syms[i + 1].clone()));
            }
        }
        pairs.sort();
        let mut best: Option<(usize, (String, String))> = None;
        let mut i = 0;
        while i < pairs.len() {
            let mut j = i;
            while j < pairs.len() && pairs[j] == pairs[i] {
                j += 1;
            }
            if best.as_ref().is_none_or(|(n, _)| j - i > *n) {
                best = Some((j - i, pairs[i].clone()));
            }
            i = j;
        }
        let Some((n, (a, b))) = best else { break };
        if n < 2 {
            break;
        }
        for syms in &mut corpus {
            let mut merged = Vec::new();
            let mut k = 0;
            while k < syms.len() {
                if k + 1 < syms.len() && syms[k] == a && syms[k + 1] == b {
                    merged.push(format!("{a}{b}"));
                    k += 2;
                } else {
                    merged.push(syms[k].clone());
                    k += 1;
                }
            }
            *syms = merged;
        }
        if !out.contains(&(a.clone(), b.clone())) {
            out.push((a, b));
        }
    }
    out
}

pub fn word() -> impl Strategy<Value = String> {
    // Small alphabet so pairs repeat; includes a non-ASCII letter and an apostrophe.
    proptest::string::string_regex("[abcé']{1,6}").unwrap()
}

pub fn any_token() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-zA-Z0-9'.,éß<>/]{1,8}")
        .unwrap()
        .prop_filter("end-of-word marker cannot occur inside a word", |t| !t.contains(EOW))
}

pub fn small_corpus() -> impl Strategy<Value = BTreeMap<String, u64>> {
    proptest::collection::btree_map(word(), 1u64..5, 1..8).prop_filter("at most 100 characters", |m| {
        m.iter().map(|(w, c)| w.chars().count() as u64 * c).sum::<u64>() <= 100
    })
}
