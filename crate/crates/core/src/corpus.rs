//! Annotated utterances, semantic frames and the sequence-to-sequence view.
//!
//! An IOB-tagged utterance becomes a target sequence of its intents followed
//! by `slot value...` groups sorted by slot name and value:
//!
//! ```text
//! show me flights between new york city and pittsburgh
//! O    O  O       O       B-fromloc I-fromloc I-fromloc O B-toloc
//! => ATIS_flight fromloc new york city toloc pittsburgh
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("slot name {0:?} is also an intent name; the target sequence would be ambiguous")]
    Ambiguous(String),
    #[error("subtitle block {index} is out of temporal order")]
    Order { index: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "O" => Some(Tag::Outside),
            _ => {
                let (kind, slot) = s.split_once('-')?;
                if slot.is_empty() {
                    return None;
                }
                match kind {
                    "B" => Some(Tag::Begin(slot.to_string())),
                    "I" => Some(Tag::Inside(slot.to_string())),
                    _ => None,
                }
            }
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => write!(f, "O"),
            Tag::Begin(s) => write!(f, "B-{s}"),
            Tag::Inside(s) => write!(f, "I-{s}"),
        }
    }
}

/// Tokens with one IOB tag each and at least one intent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedUtterance {
    tokens: Vec<String>,
    tags: Vec<Tag>,
    intents: Vec<String>,
}

impl AnnotatedUtterance {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>, intents: Vec<String>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::Invalid(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if intents.is_empty() {
            return Err(CorpusError::Invalid("utterance without intent".into()));
        }
        Ok(AnnotatedUtterance { tokens, tags, intents })
    }

    /// Builds from space-separated fields, splitting `a#b` intents.
    pub fn parse(tokens: &str, tags: &str, intents: &str) -> Result<Self> {
        let tags = tags
            .split_whitespace()
            .map(|t| Tag::parse(t).ok_or_else(|| CorpusError::Invalid(format!("bad IOB tag {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        AnnotatedUtterance::new(
            tokens.split_whitespace().map(str::to_string).collect(),
            tags,
            intents
                .split_whitespace()
                .flat_map(|i| i.split('#'))
                .filter(|i| !i.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    /// Maximal `B-x (I-x)*` spans as `(slot, start, end)` token ranges.
    /// An `I-x` that does not continue an open `x` span starts a new one and
    /// is reported in the returned warning count.
    pub fn spans(&self) -> (Vec<(String, usize, usize)>, Vec<IobWarning>) {
        let mut spans: Vec<(String, usize, usize)> = Vec::new();
        let mut warnings = Vec::new();
        let mut open = false;
        for (i, tag) in self.tags.iter().enumerate() {
            match tag {
                Tag::Outside => open = false,
                Tag::Begin(s) => {
                    spans.push((s.clone(), i, i + 1));
                    open = true;
                }
                Tag::Inside(s) => match spans.last_mut() {
                    Some(last) if open && last.0 == *s => last.2 = i + 1,
                    _ => {
                        warnings.push(IobWarning {
                            position: i,
                            slot: s.clone(),
                        });
                        spans.push((s.clone(), i, i + 1));
                        open = true;
                    }
                },
            }
        }
        (spans, warnings)
    }
}

/// An `I-` tag that had to be read as `B-`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IobWarning {
    pub position: usize,
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Param {
    pub slot: String,
    pub value: Vec<String>,
}

impl Param {
    pub fn new(slot: impl Into<String>, value: &str) -> Self {
        Param {
            slot: slot.into(),
            value: value.split_whitespace().map(str::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SemanticFrame {
    pub intents: Vec<String>,
    pub params: Vec<Param>,
}

impl SemanticFrame {
    /// Same frame with parameters sorted by (slot, value).
    pub fn canonical(&self) -> SemanticFrame {
        let mut params = self.params.clone();
        params.sort();
        SemanticFrame {
            intents: self.intents.clone(),
            params,
        }
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.slot.as_str())
    }
}

pub fn frame_from_iob(u: &AnnotatedUtterance) -> (SemanticFrame, Vec<IobWarning>) {
    let (spans, warnings) = u.spans();
    let params = spans
        .into_iter()
        .map(|(slot, s, e)| Param {
            slot,
            value: u.tokens[s..e].to_vec(),
        })
        .collect();
    (
        SemanticFrame {
            intents: u.intents.clone(),
            params,
        },
        warnings,
    )
}

/// Intents in their original order, then `slot value...` groups sorted
/// alphabetically by (slot, value).
pub fn frame_to_target(f: &SemanticFrame) -> Result<Vec<String>> {
    if let Some(p) = f.params.iter().find(|p| f.intents.contains(&p.slot)) {
        return Err(CorpusError::Ambiguous(p.slot.clone()));
    }
    let canon = f.canonical();
    let mut out = canon.intents;
    for p in canon.params {
        out.push(p.slot);
        out.extend(p.value);
    }
    Ok(out)
}

/// Intent and slot vocabularies used to parse target sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    pub intents: BTreeSet<String>,
    pub slots: BTreeSet<String>,
}

impl Lexicon {
    pub fn from_utterances<'a>(utts: impl IntoIterator<Item = &'a AnnotatedUtterance>) -> Self {
        let mut lex = Lexicon::default();
        for u in utts {
            lex.intents.extend(u.intents.iter().cloned());
            for tag in &u.tags {
                if let Tag::Begin(s) | Tag::Inside(s) = tag {
                    lex.slots.insert(s.clone());
                }
            }
        }
        lex
    }

    pub fn is_disjoint(&self) -> bool {
        self.intents.is_disjoint(&self.slots)
    }

    /// One `intent<TAB>name` or `slot<TAB>name` entry per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in &self.intents {
            out.push_str(&format!("intent\t{i}\n"));
        }
        for s in &self.slots {
            out.push_str(&format!("slot\t{s}\n"));
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some(("intent", n)) if !n.is_empty() => lex.intents.insert(n.to_string()),
                Some(("slot", n)) if !n.is_empty() => lex.slots.insert(n.to_string()),
                _ => {
                    return Err(CorpusError::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: "expected intent<TAB>name or slot<TAB>name".into(),
                    })
                }
            };
        }
        if !lex.is_disjoint() {
            return Err(CorpusError::Invalid(format!("{}: intent and slot names overlap", path.display())));
        }
        Ok(lex)
    }
}

/// Pieces of a hypothesis that do not form a parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fragment {
    /// Value tokens with no preceding slot name.
    Orphan(Vec<String>),
    /// Slot name followed directly by another slot name or the end.
    EmptySlot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedFrame {
    pub frame: SemanticFrame,
    pub malformed: Vec<Fragment>,
}

/// Reads a target sequence back into a frame. Total: malformed pieces are
/// returned as fragments instead of failing.
pub fn parse_target<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> ParsedFrame {
    let mut out = ParsedFrame::default();
    let mut iter = tokens.iter().map(AsRef::as_ref).peekable();
    while let Some(tok) = iter.peek() {
        if !lexicon.intents.contains(*tok) {
            break;
        }
        out.frame.intents.push(tok.to_string());
        iter.next();
    }

    let mut orphan: Vec<String> = Vec::new();
    let mut current: Option<Param> = None;
    let close = |p: Param, out: &mut ParsedFrame| {
        if p.value.is_empty() {
            out.malformed.push(Fragment::EmptySlot(p.slot));
        } else {
            out.frame.params.push(p);
        }
    };
    for tok in iter {
        if lexicon.slots.contains(tok) {
            if !orphan.is_empty() {
                out.malformed.push(Fragment::Orphan(std::mem::take(&mut orphan)));
            }
            if let Some(p) = current.take() {
                close(p, &mut out);
            }
            current = Some(Param {
                slot: tok.to_string(),
                value: Vec::new(),
            });
        } else if let Some(p) = current.as_mut() {
            p.value.push(tok.to_string());
        } else {
            orphan.push(tok.to_string());
        }
    }
    if !orphan.is_empty() {
        out.malformed.push(Fragment::Orphan(orphan));
    }
    if let Some(p) = current {
        close(p, &mut out);
    }
    out.frame.params.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub task: String,
}

impl SequencePair {
    pub fn new(source: Vec<String>, target: Vec<String>, task: impl Into<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(CorpusError::Invalid("sequence pair with an empty side".into()));
        }
        Ok(SequencePair {
            source,
            target,
            task: task.into(),
        })
    }
}

/// Converts one utterance to its sequence-to-sequence pair.
pub fn utterance_pair(u: &AnnotatedUtterance, task: &str) -> Result<SequencePair> {
    let (frame, _) = frame_from_iob(u);
    SequencePair::new(u.tokens.clone(), frame_to_target(&frame)?, task)
}

fn split_tsv<'a>(line: &'a str, n: usize, path: &Path, lineno: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(CorpusError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: format!("expected {n} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

/// Reads `tokens<TAB>tags<TAB>intents` lines; blank lines are skipped.
pub fn read_iob_file(path: &Path) -> Result<Vec<AnnotatedUtterance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(line, 3, path, i + 1)?;
        let u = AnnotatedUtterance::parse(f[0], f[1], f[2]).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(u);
    }
    Ok(out)
}

pub fn write_iob_file(path: &Path, utts: &[AnnotatedUtterance]) -> Result<()> {
    let mut out = String::new();
    for u in utts {
        let tags: Vec<String> = u.tags.iter().map(Tag::to_string).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            u.tokens.join(" "),
            tags.join(" "),
            u.intents.join(" ")
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes line-aligned, space-tokenized source and target files.
pub fn write_parallel(pairs: &[SequencePair], src: &Path, tgt: &Path) -> Result<()> {
    let mut s = fs::File::create(src).map_err(io_err(src))?;
    let mut t = fs::File::create(tgt).map_err(io_err(tgt))?;
    for p in pairs {
        writeln!(s, "{}", p.source.join(" ")).map_err(io_err(src))?;
        writeln!(t, "{}", p.target.join(" ")).map_err(io_err(tgt))?;
    }
    Ok(())
}

/// Reads a whitespace-tokenized file, one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn read_parallel(src: &Path, tgt: &Path, task: &str) -> Result<Vec<SequencePair>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(CorpusError::Parse {
            path: tgt.display().to_string(),
            line: t.len().min(s.len()) + 1,
            msg: format!("{} source lines but {} target lines", s.len(), t.len()),
        });
    }
    s.into_iter()
        .zip(t)
        .enumerate()
        .map(|(i, (a, b))| {
            SequencePair::new(a, b, task).map_err(|e| CorpusError::Parse {
                path: src.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// One timed subtitle sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtitleBlock {
    pub start_ms: u64,
    pub end_ms: u64,
    pub sentence: Vec<String>,
    pub terminal: Option<char>,
}

impl SubtitleBlock {
    pub fn new(start_ms: u64, end_ms: u64, text: &str) -> Result<Self> {
        if start_ms > end_ms {
            return Err(CorpusError::Invalid(format!("block ends before it starts: {start_ms} > {end_ms}")));
        }
        let text = text.trim();
        Ok(SubtitleBlock {
            start_ms,
            end_ms,
            sentence: text.split_whitespace().map(str::to_string).collect(),
            terminal: text.chars().last(),
        })
    }

    fn contains_question_mark(&self) -> bool {
        self.sentence.iter().any(|t| t.contains('?'))
    }
}

/// Reads `start_ms<TAB>end_ms<TAB>text` lines.
pub fn read_subtitle_tsv(path: &Path) -> Result<Vec<SubtitleBlock>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(line, 3, path, i + 1)?;
        let parse = |s: &str| {
            s.trim().parse::<u64>().map_err(|_| CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("bad timestamp {s:?}"),
            })
        };
        let block = SubtitleBlock::new(parse(f[0])?, parse(f[1])?, f[2]).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(block);
    }
    Ok(out)
}

fn check_order(blocks: &[SubtitleBlock]) -> Result<()> {
    for (i, b) in blocks.iter().enumerate() {
        if b.start_ms > b.end_ms || (i > 0 && b.start_ms < blocks[i - 1].start_ms) {
            return Err(CorpusError::Order { index: i });
        }
    }
    Ok(())
}

fn pause_ms(a: &SubtitleBlock, b: &SubtitleBlock) -> i64 {
    b.start_ms as i64 - a.end_ms as i64
}

fn consecutive_pairs<'a>(
    blocks: &'a [SubtitleBlock],
    task: &'a str,
    keep: impl Fn(&SubtitleBlock, &SubtitleBlock) -> bool + 'a,
) -> Result<Vec<SequencePair>> {
    check_order(blocks)?;
    Ok(blocks
        .windows(2)
        .filter(|w| !w[0].sentence.is_empty() && !w[1].sentence.is_empty() && keep(&w[0], &w[1]))
        .map(|w| SequencePair {
            source: w[0].sentence.clone(),
            target: w[1].sentence.clone(),
            task: task.to_string(),
        })
        .collect())
}

pub const QA_MAX_PAUSE_MS: i64 = 20_000;
pub const DIALOG_MAX_PAUSE_MS: i64 = 1_000;

/// Question/answer pairs: a sentence ending in `?` directly followed, less
/// than 20 s later, by a sentence without any `?`.
pub fn extract_qa_pairs(blocks: &[SubtitleBlock]) -> Result<Vec<SequencePair>> {
    consecutive_pairs(blocks, "qa", |a, b| {
        a.terminal == Some('?') && !b.contains_question_mark() && pause_ms(a, b) < QA_MAX_PAUSE_MS
    })
}

/// Dialog turns: consecutive sentences both ending in `.`, `!` or `?` with a
/// pause of at most one second.
pub fn extract_dialog_pairs(blocks: &[SubtitleBlock]) -> Result<Vec<SequencePair>> {
    let terminal = |b: &SubtitleBlock| matches!(b.terminal, Some('.' | '!' | '?'));
    consecutive_pairs(blocks, "dialog", move |a, b| {
        terminal(a) && terminal(b) && pause_ms(a, b) <= DIALOG_MAX_PAUSE_MS
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn new_york_example() -> AnnotatedUtterance {
        AnnotatedUtterance::parse(
            "show me flights between new york city and pittsburgh",
            "O O O O B-fromloc I-fromloc I-fromloc O B-toloc",
            "ATIS_flight",
        )
        .unwrap()
    }

    fn lex(intents: &[&str], slots: &[&str]) -> Lexicon {
        Lexicon {
            intents: intents.iter().map(|s| s.to_string()).collect(),
            slots: slots.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn new_york_to_pittsburgh_conversion() {
        let (frame, warnings) = frame_from_iob(&new_york_example());
        assert!(warnings.is_empty());
        assert_eq!(frame.intents, vec!["ATIS_flight"]);
        assert_eq!(
            frame.params,
            vec![Param::new("fromloc", "new york city"), Param::new("toloc", "pittsburgh")]
        );
        assert_eq!(
            frame_to_target(&frame).unwrap().join(" "),
            "ATIS_flight fromloc new york city toloc pittsburgh"
        );
    }

    #[test]
    fn all_outside_keeps_intents() {
        let u = AnnotatedUtterance::parse("hello there", "O O", "greet").unwrap();
        let (f, _) = frame_from_iob(&u);
        assert_eq!(f.intents, vec!["greet"]);
        assert!(f.params.is_empty());
        assert_eq!(frame_to_target(&f).unwrap(), vec!["greet"]);
    }

    #[test]
    fn mismatched_inside_tag_starts_new_span_with_warning() {
        let u = AnnotatedUtterance::parse("w1 w2", "B-a I-b", "x").unwrap();
        let (f, w) = frame_from_iob(&u);
        assert_eq!(f.params, vec![Param::new("a", "w1"), Param::new("b", "w2")]);
        assert_eq!(w, vec![IobWarning { position: 1, slot: "b".into() }]);
        // I- after O also opens a span
        let u = AnnotatedUtterance::parse("w1 w2", "O I-a", "x").unwrap();
        assert_eq!(frame_from_iob(&u).1.len(), 1);
    }

    #[test]
    fn target_sorts_params() {
        let f = SemanticFrame {
            intents: vec!["ATIS_flight".into()],
            params: vec![Param::new("toloc", "pittsburgh"), Param::new("fromloc", "boston")],
        };
        assert_eq!(
            frame_to_target(&f).unwrap().join(" "),
            "ATIS_flight fromloc boston toloc pittsburgh"
        );
    }

    #[test]
    fn slot_colliding_with_intent_is_rejected() {
        let f = SemanticFrame {
            intents: vec!["x".into()],
            params: vec![Param::new("x", "v")],
        };
        assert!(matches!(frame_to_target(&f), Err(CorpusError::Ambiguous(_))));
    }

    #[test]
    fn parse_target_records_malformed_fragments() {
        let l = lex(&["ATIS_flight"], &["fromloc", "toloc"]);
        let toks: Vec<&str> = "ATIS_flight fromloc toloc pittsburgh".split(' ').collect();
        let p = parse_target(&toks, &l);
        assert_eq!(p.frame.intents, vec!["ATIS_flight"]);
        assert_eq!(p.frame.params, vec![Param::new("toloc", "pittsburgh")]);
        assert_eq!(p.malformed, vec![Fragment::EmptySlot("fromloc".into())]);

        let p = parse_target(&["ATIS_flight", "boston", "toloc", "denver"], &l);
        assert_eq!(p.malformed, vec![Fragment::Orphan(vec!["boston".into()])]);

        assert_eq!(parse_target::<&str>(&[], &l), ParsedFrame::default());
    }

    #[test]
    fn parse_inverts_new_york_example() {
        let (f, _) = frame_from_iob(&new_york_example());
        let l = Lexicon::from_utterances([&new_york_example()]);
        let p = parse_target(&frame_to_target(&f).unwrap(), &l);
        assert_eq!(p.frame, f.canonical());
        assert!(p.malformed.is_empty());
    }

    #[test]
    fn multi_intent_hash_split() {
        let u = AnnotatedUtterance::parse("fares please", "O O", "atis_flight#atis_airfare").unwrap();
        assert_eq!(u.intents(), &["atis_flight", "atis_airfare"]);
    }

    #[test]
    fn iob_file_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.iob");
        fs::write(&p, "a b\tO O\tx\na b c\tO O\tx\n").unwrap();
        match read_iob_file(&p).unwrap_err() {
            CorpusError::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("3 tokens but 2 tags"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "a b\tO O\t \n").unwrap();
        assert!(matches!(read_iob_file(&p), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn iob_and_parallel_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.iob");
        let utts = vec![
            new_york_example(),
            AnnotatedUtterance::parse("fares please", "O O", "a#b").unwrap(),
        ];
        write_iob_file(&p, &utts).unwrap();
        let back = read_iob_file(&p).unwrap();
        assert_eq!(back, utts);
        write_iob_file(&p, &back).unwrap();
        assert_eq!(read_iob_file(&p).unwrap(), utts);

        let pairs: Vec<SequencePair> = utts.iter().map(|u| utterance_pair(u, "atis").unwrap()).collect();
        let (s, t) = (dir.path().join("x.src"), dir.path().join("x.tgt"));
        write_parallel(&pairs, &s, &t).unwrap();
        assert_eq!(read_parallel(&s, &t, "atis").unwrap(), pairs);
        fs::write(&t, "only one line\n").unwrap();
        assert!(read_parallel(&s, &t, "atis").is_err());
    }

    fn block(s: u64, e: u64, text: &str) -> SubtitleBlock {
        SubtitleBlock::new(s, e, text).unwrap()
    }

    #[test]
    fn qa_rules() {
        let kept = extract_qa_pairs(&[block(0, 1000, "Where? "), block(5000, 6000, "Home.")]).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source, vec!["Where?"]);
        assert_eq!(kept[0].target, vec!["Home."]);

        let far = extract_qa_pairs(&[block(0, 1000, "Where?"), block(26_000, 27_000, "Home.")]).unwrap();
        assert!(far.is_empty());
        let edge = extract_qa_pairs(&[block(0, 1000, "Where?"), block(21_000, 22_000, "Home.")]).unwrap();
        assert!(edge.is_empty(), "20 s pause is not less than 20 s");
        let q2 = extract_qa_pairs(&[block(0, 1000, "Where?"), block(2000, 3000, "Why?")]).unwrap();
        assert!(q2.is_empty());
        let inner = extract_qa_pairs(&[block(0, 1000, "Where ?"), block(2000, 3000, "Who? Me.")]).unwrap();
        assert!(inner.is_empty());
    }

    #[test]
    fn dialog_rules() {
        let b = |gap: u64, t1: &str, t2: &str| {
            extract_dialog_pairs(&[block(0, 1000, t1), block(1000 + gap, 3000 + gap, t2)]).unwrap()
        };
        assert_eq!(b(1000, "Go .", "Now !").len(), 1);
        assert!(b(1001, "Go .", "Now !").is_empty());
        assert!(b(0, "Go ,", "Now !").is_empty());
        assert_eq!(b(0, "Go?", "Now.").len(), 1);
    }

    #[test]
    fn unordered_blocks_are_rejected() {
        let blocks = [block(5000, 6000, "A?"), block(0, 1000, "B.")];
        assert!(matches!(extract_qa_pairs(&blocks), Err(CorpusError::Order { index: 1 })));
        assert!(matches!(extract_dialog_pairs(&blocks), Err(CorpusError::Order { index: 1 })));
        assert!(SubtitleBlock::new(10, 5, "x").is_err());
    }
}
