//! Frame strategies and a brute-force scorer.

use mtnlu::corpus::{frame_to_target, Lexicon, Param, SemanticFrame};
use mtnlu::eval::{corpus_eval, micro_f1, MatchCounts};
use proptest::prelude::*;

pub const INTENTS: [&str; 3] = ["ATIS_flight", "ATIS_airfare", "ATIS_city"];
pub const SLOTS: [&str; 3] = ["fromloc", "toloc", "day"];
pub const WORDS: [&str; 4] = ["new", "york", "boston", "monday"];

pub fn lexicon() -> Lexicon {
    Lexicon {
        intents: INTENTS.iter().map(|s| s.to_string()).collect(),
        slots: SLOTS.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn frame() -> impl Strategy<Value = SemanticFrame> {
    let intents = proptest::collection::vec(proptest::sample::select(&INTENTS[..]), 1..3);
    let param = (
        proptest::sample::select(&SLOTS[..]),
        proptest::collection::vec(proptest::sample::select(&WORDS[..]), 1..3),
    )
        .prop_map(|(s, v)| Param {
            slot: s.to_string(),
            value: v.iter().map(|w| w.to_string()).collect(),
        });
    (intents, proptest::collection::vec(param, 0..4)).prop_map(|(i, params)| SemanticFrame {
        intents: i.iter().map(|s| s.to_string()).collect(),
        params,
    })
}

/// Arbitrary hypothesis token soup, often malformed.
pub fn soup() -> impl Strategy<Value = Vec<String>> {
    let all: Vec<&str> = INTENTS.iter().chain(&SLOTS).chain(&WORDS).copied().collect();
    proptest::collection::vec(proptest::sample::select(all), 0..9)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

pub fn hypothesis() -> impl Strategy<Value = Vec<String>> {
    prop_oneof![frame().prop_map(|f| frame_to_target(&f).unwrap()), soup()]
}

/// Brute-force scorer: splits the hypothesis by hand, then pairs items one by
/// one, removing each matched hypothesis item from a pool.
pub fn oracle(refs: &[Vec<String>], hyps: &[Vec<String>]) -> (MatchCounts, usize) {
    let is_intent = |t: &str| INTENTS.contains(&t);
    let is_slot = |t: &str| SLOTS.contains(&t);
    let split = |toks: &[String]| -> (Vec<String>, Vec<(String, Vec<String>)>, u64) {
        let mut k = 0;
        while k < toks.len() && is_intent(&toks[k]) {
            k += 1;
        }
        let intents = toks[..k].to_vec();
        let mut params = Vec::new();
        let mut bad = 0;
        let mut lead = true;
        let mut cur: Option<(String, Vec<String>)> = None;
        for t in &toks[k..] {
            if is_slot(t) {
                if let Some(p) = cur.take() {
                    if p.1.is_empty() {
                        bad += 1;
                    } else {
                        params.push(p);
                    }
                }
                cur = Some((t.clone(), Vec::new()));
            } else if let Some(p) = cur.as_mut() {
                p.1.push(t.clone());
            } else if lead {
                bad += 1;
                lead = false;
            }
        }
        if let Some(p) = cur {
            if p.1.is_empty() {
                bad += 1;
            } else {
                params.push(p);
            }
        }
        (intents, params, bad)
    };
    let mut c = MatchCounts::default();
    let mut intent_hits = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let (ri, rp, _) = split(r);
        let (hi, hp, bad) = split(h);
        let mut pool_i = hi.clone();
        let mut pool_p = hp.clone();
        let mut tp = 0u64;
        for x in &ri {
            if let Some(pos) = pool_i.iter().position(|y| y == x) {
                pool_i.remove(pos);
                tp += 1;
            }
        }
        for x in &rp {
            if let Some(pos) = pool_p.iter().position(|y| y == x) {
                pool_p.remove(pos);
                tp += 1;
            }
        }
        c.tp += tp;
        c.fn_ += (ri.len() + rp.len()) as u64 - tp;
        c.fp += (hi.len() + hp.len()) as u64 - tp + bad;
        let mut a = ri.clone();
        let mut b = hi.clone();
        a.sort();
        b.sort();
        if a == b {
            intent_hits += 1;
        }
    }
    (c, intent_hits)
}

pub fn check_against_oracle(refs: &[SemanticFrame], hyps: &[Vec<String>]) -> Result<(), TestCaseError> {
    let refs: Vec<Vec<String>> = refs.iter().map(|f| frame_to_target(f).unwrap()).collect();
    let report = corpus_eval(&refs, hyps, &lexicon()).unwrap();
    let (want, hits) = oracle(&refs, hyps);
    prop_assert_eq!(report.counts, want);
    prop_assert_eq!(report.intent_accuracy, hits as f64 / refs.len() as f64);
    let (p, r, f) = micro_f1(want);
    prop_assert_eq!((report.precision, report.recall, report.f1), (p, r, f));
    prop_assert!((0.0..=1.0).contains(&report.f1));
    Ok(())
}
