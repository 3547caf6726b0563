use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, SvtrError};

pub const BLANK: usize = 0;

const ENGLISH: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

/// Class indices of a transcript. Index 0 is the blank and never appears.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if let Some(pos) = indices.iter().position(|&i| i == BLANK) {
            return Err(SvtrError::Contract(format!("label contains blank at position {pos}")));
        }
        Ok(Self(indices))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn from_vec_unchecked(indices: Vec<usize>) -> Self {
        debug_assert!(!indices.contains(&BLANK));
        Self(indices)
    }
}

/// Ordered symbol table; symbol `i` (0-based) has class index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    lookup: HashMap<char, usize>,
}

impl Charset {
    /// Blank, digits, lowercase letters: 37 classes.
    pub fn english() -> Self {
        Self::from_symbols(ENGLISH.chars()).expect("unique symbols")
    }

    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut lookup = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if lookup.insert(c, i + 1).is_some() {
                return Err(SvtrError::Config(format!("duplicate charset symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(SvtrError::Config("charset needs at least one symbol".into()));
        }
        Ok(Self { symbols, lookup })
    }

    /// One symbol per line; line order is index order starting at 1.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SvtrError::io(path, e))?;
        let mut symbols = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(SvtrError::Dataset {
                        path: path.to_path_buf(),
                        line: n + 1,
                        message: format!("expected exactly one symbol, got {line:?}"),
                    })
                }
            }
        }
        Self::from_symbols(symbols)
    }

    pub fn to_file_string(&self) -> String {
        self.symbols.iter().map(|c| format!("{c}\n")).collect()
    }

    /// Class count including the blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.lookup.get(&c).copied()
    }

    /// Lowercases `text` and maps it to class indices. On failure returns
    /// the distinct offending characters in order of appearance.
    pub fn try_encode(&self, text: &str) -> std::result::Result<LabelSeq, Vec<char>> {
        let mut out = Vec::with_capacity(text.len());
        let mut unknown = Vec::new();
        for c in text.chars().flat_map(char::to_lowercase) {
            match self.index_of(c) {
                Some(i) => out.push(i),
                None if !unknown.contains(&c) => unknown.push(c),
                None => {}
            }
        }
        if unknown.is_empty() {
            Ok(LabelSeq(out))
        } else {
            Err(unknown)
        }
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        self.try_encode(text)
            .map_err(|bad| SvtrError::Contract(format!("characters not in charset: {bad:?}")))
    }

    pub fn decode(&self, label: &LabelSeq) -> String {
        label.as_slice().iter().filter_map(|&i| self.symbol(i)).collect()
    }
}
