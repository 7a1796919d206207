//! Byte-pair-encoding subword segmentation and vocabularies.
//!
//! Words are split into characters followed by a dedicated end-of-word
//! symbol, so the final subword of every word carries the marker as a
//! suffix (`low</w>`). Inversion concatenates subwords up to and including
//! the next marked one. Tokens must not themselves contain the marker text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

pub const EOW: &str = "</w>";
pub const MERGE_FILE_HEADER: &str = "#version 1";

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED: [&str; 4] = [PAD, UNK, BOS, EOS];

const CLITICS: [&str; 5] = ["'s", "'re", "'t", "'ll", "'ve"];

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BpeError + '_ {
    move |source| BpeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Appends subtitle-style split clitics (`'s`, `'re`, `'t`, `'ll`, `'ve`) to
/// the preceding token. A clitic with no predecessor is left alone.
pub fn merge_clitics<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let tok = tok.as_ref();
        match out.last_mut() {
            Some(prev) if CLITICS.contains(&tok) => prev.push_str(tok),
            _ => out.push(tok.to_string()),
        }
    }
    out
}

/// Learned merge operations in priority order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self, String> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(format!("duplicate merge {} {}", pair.0, pair.1));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Segments one word.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        symbols
    }

    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.apply_word(t.as_ref())).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), BpeError> {
        let mut out = String::from(MERGE_FILE_HEADER);
        out.push('\n');
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, BpeError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let fmt = |line: usize, msg: String| BpeError::Format {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut merges = Vec::new();
        let mut saw_header = false;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if i == 0 {
                saw_header = true;
                if line.trim_end() != MERGE_FILE_HEADER {
                    return Err(fmt(1, format!("expected header {MERGE_FILE_HEADER:?}")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                [a, b] if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(fmt(i + 1, "expected two space-separated symbols".into())),
            }
        }
        if !saw_header {
            return Err(fmt(1, "empty file".into()));
        }
        MergeTable::new(merges).map_err(|m| fmt(0, m))
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(EOW.to_string()))
        .collect()
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `limit` merges by repeatedly joining the most frequent
/// adjacent symbol pair. Equal counts go to the lexicographically smallest
/// pair; learning stops early once no pair occurs at least twice.
pub fn learn_bpe(word_freqs: &BTreeMap<String, u64>, limit: usize) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while merges.len() < limit {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some((pair, freq)) = counts
            .into_iter()
            .fold(None, |best: Option<((&str, &str), u64)>, (p, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            })
        else {
            break;
        };
        if freq < 2 {
            break;
        }
        let (a, b) = (pair.0.to_string(), pair.1.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &a, &b);
        }
        // A pair can reappear when a later merge rebuilds one of its symbols;
        // re-merging it keeps the table unique and still shrinks the corpus.
        if seen.insert((a.clone(), b.clone())) {
            merges.push((a, b));
        }
    }
    MergeTable::new(merges).expect("learned merges are unique")
}

/// Word frequencies of whitespace-tokenized sentences.
pub fn word_counts<'a, I, S>(sentences: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = BTreeMap::new();
    for sent in sentences {
        for tok in sent {
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
    }
    counts
}

/// Joins subwords back into words. A trailing run without an end-of-word
/// marker (possible in decoder output) becomes a final word as-is.
pub fn invert_bpe<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for s in subwords {
        let s = s.as_ref();
        if let Some(stem) = s.strip_suffix(EOW) {
            cur.push_str(stem);
            words.push(std::mem::take(&mut cur));
            open = false;
        } else {
            cur.push_str(s);
            open = true;
        }
    }
    if open {
        words.push(cur);
    }
    words
}

/// Token ↔ id bijection with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn reserved_only() -> Self {
        Vocab::from_tokens(Vec::new())
    }

    fn from_tokens(extra: Vec<String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(extra).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    /// Rebuilds a vocabulary from its full id-ordered token list.
    pub fn from_list(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(format!("vocabulary must start with {RESERVED:?}"));
        }
        let mut tokens = tokens;
        let vocab = Vocab::from_tokens(tokens.split_off(RESERVED.len()));
        if vocab.ids.len() != vocab.tokens.len() {
            return Err("duplicate token".into());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping reserved symbols.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), BpeError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}").map_err(io_err(path))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, BpeError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let fmt = |line: usize, msg: String| BpeError::Format {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| fmt(i + 1, "expected token TAB id".into()))?;
            let id: usize = id.parse().map_err(|_| fmt(i + 1, format!("bad id {id:?}")))?;
            if id != i {
                return Err(fmt(i + 1, format!("ids must be dense and sorted, found {id}")));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(fmt(i + 1, format!("reserved id {i} must be {}", RESERVED[i])));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(fmt(tokens.len() + 1, "missing reserved tokens".into()));
        }
        let vocab = Vocab::from_tokens(tokens.split_off(RESERVED.len()));
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(fmt(0, "duplicate token".into()));
        }
        Ok(vocab)
    }
}

/// Keeps the `size_limit - 4` most frequent subwords (ties broken
/// lexicographically) after the reserved tokens. Limits below 4 still yield
/// the reserved tokens.
pub fn build_vocab<'a, I, S>(sentences: I, size_limit: usize) -> Vocab
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for sent in sentences {
        for tok in sent {
            let tok = tok.as_ref();
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = size_limit.saturating_sub(RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t.to_string()).collect())
}
