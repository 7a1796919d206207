//! Template extraction and expansion for synthetic in-domain data.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    frame_from_iob, frame_to_target, io_err, parse_target, AnnotatedUtterance, CorpusError, Lexicon, Result,
    SequencePair,
};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Piece {
    Word(String),
    Slot(String),
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Piece::Word(w) => f.write_str(w),
            Piece::Slot(s) => write!(f, "<{s}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub source: Vec<Piece>,
    pub target: Vec<Piece>,
    /// Distinct placeholder names in order of first occurrence in the target.
    pub placeholders: Vec<String>,
}

impl Template {
    pub fn source_text(&self) -> String {
        join(&self.source)
    }

    pub fn target_text(&self) -> String {
        join(&self.target)
    }
}

fn join(pieces: &[Piece]) -> String {
    pieces.iter().map(Piece::to_string).collect::<Vec<_>>().join(" ")
}

/// Intent set plus slot-name multiset (kept sorted).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature {
    pub intents: BTreeSet<String>,
    pub slots: Vec<String>,
}

/// Replaces every parameter span by a placeholder named after its slot;
/// repeated slots get `_2`, `_3`, ... in source order.
pub fn templatize(u: &AnnotatedUtterance) -> Result<(Template, Signature)> {
    let (spans, _) = u.spans();
    let (frame, _) = frame_from_iob(u);

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let names: Vec<String> = spans
        .iter()
        .map(|(slot, _, _)| {
            let k = seen.entry(slot).or_insert(0);
            *k += 1;
            if *k == 1 {
                slot.clone()
            } else {
                format!("{slot}_{k}")
            }
        })
        .collect();

    let mut source = Vec::new();
    let mut next = 0;
    for (name, (_, s, e)) in names.iter().zip(&spans) {
        source.extend(u.tokens()[next..*s].iter().cloned().map(Piece::Word));
        source.push(Piece::Slot(name.clone()));
        next = *e;
    }
    source.extend(u.tokens()[next..].iter().cloned().map(Piece::Word));

    // Target order follows the canonical (slot, value) sort of the original
    // frame; pair each sorted parameter back to its span's placeholder.
    frame_to_target(&frame)?;
    let mut indexed: Vec<(usize, &crate::corpus::Param)> = frame.params.iter().enumerate().collect();
    indexed.sort_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)));
    let mut target: Vec<Piece> = frame.intents.iter().cloned().map(Piece::Word).collect();
    let mut placeholders = Vec::new();
    for (i, p) in indexed {
        target.push(Piece::Word(p.slot.clone()));
        target.push(Piece::Slot(names[i].clone()));
        placeholders.push(names[i].clone());
    }

    let mut slots: Vec<String> = frame.params.iter().map(|p| p.slot.clone()).collect();
    slots.sort();
    let signature = Signature {
        intents: frame.intents.iter().cloned().collect(),
        slots,
    };
    Ok((Template { source, target, placeholders }, signature))
}

/// Keeps an utterance iff it mentions a slot name or intent that no
/// previously kept utterance mentioned.
pub fn extract_templates_small(corpus: &[AnnotatedUtterance]) -> Result<Vec<Template>> {
    let mut known: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for u in corpus {
        let (tpl, sig) = templatize(u)?;
        let names: Vec<String> = sig
            .intents
            .iter()
            .map(|i| format!("intent:{i}"))
            .chain(sig.slots.iter().map(|s| format!("slot:{s}")))
            .collect();
        if names.iter().any(|n| !known.contains(n)) {
            known.extend(names);
            out.push(tpl);
        }
    }
    Ok(out)
}

/// Keeps an utterance iff its signature differs from every kept one.
pub fn extract_templates_medium(corpus: &[AnnotatedUtterance]) -> Result<Vec<Template>> {
    let mut known: HashSet<Signature> = HashSet::new();
    let mut out = Vec::new();
    for u in corpus {
        let (tpl, sig) = templatize(u)?;
        if known.insert(sig) {
            out.push(tpl);
        }
    }
    Ok(out)
}

/// Placeholder name to its distinct values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlaceholderTable {
    values: BTreeMap<String, Vec<Vec<String>>>,
}

impl PlaceholderTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<Vec<String>>) -> Result<()> {
        if values.is_empty() || values.iter().any(Vec::is_empty) {
            return Err(CorpusError::Invalid(format!("placeholder {name} has an empty value")));
        }
        let distinct: HashSet<&Vec<String>> = values.iter().collect();
        if distinct.len() != values.len() {
            return Err(CorpusError::Invalid(format!("placeholder {name} has duplicate values")));
        }
        self.values.insert(name.to_string(), values);
        Ok(())
    }

    /// Values of `name`; `x_2` falls back to `x` when it has no entry of its own.
    pub fn get(&self, name: &str) -> Option<&[Vec<String>]> {
        if let Some(v) = self.values.get(name) {
            return Some(v);
        }
        let (base, k) = name.rsplit_once('_')?;
        if k.parse::<usize>().ok()? < 2 {
            return None;
        }
        self.values.get(base).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Every distinct span value per slot name, in corpus order.
    pub fn from_corpus(corpus: &[AnnotatedUtterance]) -> Self {
        let mut values: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for u in corpus {
            for p in frame_from_iob(u).0.params {
                let vs = values.entry(p.slot).or_default();
                if !vs.contains(&p.value) {
                    vs.push(p.value);
                }
            }
        }
        PlaceholderTable { values }
    }

    /// Header line per placeholder, then one indented value per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, vs) in &self.values {
            out.push_str(name);
            out.push('\n');
            for v in vs {
                out.push_str("  ");
                out.push_str(&v.join(" "));
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let perr = |line: usize, msg: String| CorpusError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut entries: Vec<(String, usize, Vec<Vec<String>>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with([' ', '\t']) {
                let Some(last) = entries.last_mut() else {
                    return Err(perr(i + 1, "value before any placeholder name".into()));
                };
                last.2.push(line.split_whitespace().map(str::to_string).collect());
            } else {
                let name = line.trim();
                if name.contains(char::is_whitespace) {
                    return Err(perr(i + 1, format!("bad placeholder name {name:?}")));
                }
                entries.push((name.to_string(), i + 1, Vec::new()));
            }
        }
        let mut table = PlaceholderTable::new();
        for (name, line, vs) in entries {
            if table.values.contains_key(&name) {
                return Err(perr(line, format!("placeholder {name} listed twice")));
            }
            table.insert(&name, vs).map_err(|e| perr(line, e.to_string()))?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub cartesian_threshold: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            cartesian_threshold: 1000,
            seed: 0,
        }
    }
}

fn substitute(pieces: &[Piece], names: &[String], choice: &[&Vec<String>]) -> Vec<String> {
    let mut out = Vec::new();
    for p in pieces {
        match p {
            Piece::Word(w) => out.push(w.clone()),
            Piece::Slot(s) => {
                let i = names.iter().position(|n| n == s).expect("placeholder listed in template");
                out.extend(choice[i].iter().cloned());
            }
        }
    }
    out
}

/// Fills the template's placeholders. Up to `cartesian_threshold`
/// combinations the full product is emitted with the last placeholder
/// varying fastest; above it, each placeholder's values are shuffled, cycled
/// to the length of the largest list and zipped.
pub fn expand_template(
    tpl: &Template,
    table: &PlaceholderTable,
    cfg: &GenConfig,
    template_index: u64,
    task: &str,
) -> Result<Vec<SequencePair>> {
    if cfg.cartesian_threshold < 1 {
        return Err(CorpusError::Invalid("cartesian_threshold must be at least 1".into()));
    }
    let lists: Vec<&[Vec<String>]> = tpl
        .placeholders
        .iter()
        .map(|n| {
            table
                .get(n)
                .ok_or_else(|| CorpusError::Invalid(format!("placeholder {n} missing from table")))
        })
        .collect::<Result<_>>()?;
    let names = &tpl.placeholders;
    let pair = |choice: &[&Vec<String>]| {
        SequencePair::new(substitute(&tpl.source, names, choice), substitute(&tpl.target, names, choice), task)
    };

    let product = lists
        .iter()
        .try_fold(1usize, |acc, l| acc.checked_mul(l.len()))
        .unwrap_or(usize::MAX);
    let mut out = Vec::new();
    if product <= cfg.cartesian_threshold {
        let mut idx = vec![0usize; lists.len()];
        loop {
            let choice: Vec<&Vec<String>> = idx.iter().zip(&lists).map(|(&i, l)| &l[i]).collect();
            out.push(pair(&choice)?);
            let mut k = lists.len();
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < lists[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    let len = lists.iter().map(|l| l.len()).max().unwrap_or(0);
    let mut rng = stream(cfg.seed, "expand", template_index);
    let columns: Vec<Vec<&Vec<String>>> = lists
        .iter()
        .map(|l| {
            let mut col: Vec<&Vec<String>> = l.iter().collect();
            col.shuffle(&mut rng);
            col.into_iter().cycle().take(len).collect()
        })
        .collect();
    for row in 0..len {
        let choice: Vec<&Vec<String>> = columns.iter().map(|c| c[row]).collect();
        out.push(pair(&choice)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Small,
    Medium,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "small",
            Variant::Medium => "medium",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub variant: Variant,
    pub template_count: usize,
    pub pair_count: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "variant: {}\ntemplates: {}\npairs: {}\n",
            self.variant, self.template_count, self.pair_count
        )
    }
}

/// Extracts templates for `variant`, expands them in order and rewrites
/// every target in canonical parameter order.
pub fn generate_dataset(
    corpus: &[AnnotatedUtterance],
    table: &PlaceholderTable,
    cfg: &GenConfig,
    variant: Variant,
    task: &str,
) -> Result<(Vec<SequencePair>, Manifest)> {
    let templates = match variant {
        Variant::Small => extract_templates_small(corpus)?,
        Variant::Medium => extract_templates_medium(corpus)?,
    };
    let lexicon = Lexicon::from_utterances(corpus);
    let mut pairs = Vec::new();
    for (i, tpl) in templates.iter().enumerate() {
        for mut p in expand_template(tpl, table, cfg, i as u64, task)? {
            let parsed = parse_target(&p.target, &lexicon);
            if parsed.malformed.is_empty() {
                p.target = frame_to_target(&parsed.frame)?;
            }
            pairs.push(p);
        }
    }
    let manifest = Manifest {
        variant,
        template_count: templates.len(),
        pair_count: pairs.len(),
    };
    Ok((pairs, manifest))
}
