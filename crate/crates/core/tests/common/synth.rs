//! A two-placeholder template and value tables for expansion tests.

use mtnlu::corpus::SequencePair;
use mtnlu::synth::{Piece, PlaceholderTable, Template};

pub fn two_slot_template() -> Template {
    let w = |s: &str| Piece::Word(s.into());
    Template {
        source: vec![w("from"), Piece::Slot("fromloc".into()), w("to"), Piece::Slot("toloc".into())],
        target: vec![
            w("ATIS_flight"),
            w("fromloc"),
            Piece::Slot("fromloc".into()),
            w("toloc"),
            Piece::Slot("toloc".into()),
        ],
        placeholders: vec!["fromloc".into(), "toloc".into()],
    }
}

pub fn table(a: usize, b: usize) -> PlaceholderTable {
    let mut t = PlaceholderTable::new();
    t.insert("fromloc", (0..a).map(|i| vec![format!("f{i}")]).collect()).unwrap();
    t.insert("toloc", (0..b).map(|i| vec![format!("t{i}")]).collect()).unwrap();
    t
}

pub fn values(pairs: &[SequencePair], pos: usize) -> Vec<String> {
    pairs.iter().map(|p| p.source[pos].clone()).collect()
}
