use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};

/// RNN-T blank.
pub const BLANK: u32 = 0;
/// Start of sentence.
pub const SOS: u32 = 1;
/// End of sentence; also the hypothesis padding symbol.
pub const EOS: u32 = 2;
pub const FIRST_REGULAR: u32 = 3;

const RESERVED: [&str; 3] = ["<blank>", "<s>", "</s>"];

/// Symbol table. Ids are line numbers; the three reserved symbols come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from its regular (non-reserved) symbols.
    pub fn new(regular: Vec<String>) -> Result<Self> {
        if regular.is_empty() {
            return Err(Error::EmptyVocab);
        }
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(regular);
        let mut seen = HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid symbol {s:?}")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::Format(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols })
    }

    /// `n` regular symbols named `a`, `b`, ... (or `w0`, `w1`, ... past 26).
    pub fn toy(n: usize) -> Result<Self> {
        let names = (0..n)
            .map(|i| {
                if n <= 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("w{i}")
                }
            })
            .collect();
        Self::new(names)
    }

    /// Total size including reserved symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn regular_count(&self) -> usize {
        self.symbols.len() - FIRST_REGULAR as usize
    }

    pub fn regular_ids(&self) -> Range<u32> {
        FIRST_REGULAR..self.symbols.len() as u32
    }

    pub fn is_reserved(id: u32) -> bool {
        id < FIRST_REGULAR
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn check(&self, id: u32) -> Result<()> {
        if (id as usize) < self.symbols.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab: self.symbols.len(),
            })
        }
    }

    /// Space-separated symbol string; unknown ids render as `<id>`.
    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).map(str::to_string).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        Self::new(lines[RESERVED.len()..].iter().map(|s| s.to_string()).collect())
    }
}
