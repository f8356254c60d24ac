//! Dictionary-based abbreviation expansion.
//!
//! A table maps surfaces to expansions. [`expand`] makes one left-to-right
//! pass: at each candidate start it replaces the longest surface that
//! matches there and resumes after the replaced span, so expansions are
//! never rescanned.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::NliExample;
use crate::error::{Error, Result};

/// A small table of common clinical abbreviations.
pub const DEMO_TABLE: &str = include_str!("../data/abbrev_demo.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchPolicy {
    pub case_sensitive: bool,
    /// Require non-alphanumeric characters (or text edges) around a match.
    pub whole_word: bool,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy {
            case_sensitive: false,
            whole_word: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbbrevEntry {
    pub surface: String,
    pub expansion: String,
}

#[derive(Debug, Clone, Default)]
pub struct AbbrevTable {
    entries: Vec<AbbrevEntry>,
    policy: MatchPolicy,
    index: HashMap<String, usize>,
    /// Distinct surface lengths in characters, longest first.
    lengths: Vec<usize>,
}

impl AbbrevTable {
    pub fn new(entries: Vec<AbbrevEntry>, policy: MatchPolicy) -> Result<Self> {
        let lines: Vec<usize> = (1..=entries.len()).collect();
        Self::build(entries, &lines, policy)
    }

    fn build(entries: Vec<AbbrevEntry>, lines: &[usize], policy: MatchPolicy) -> Result<Self> {
        let mut index = HashMap::new();
        let mut lengths = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            if e.surface.is_empty() {
                return Err(Error::Data(format!("line {}: empty surface", lines[i])));
            }
            if e.expansion == e.surface {
                return Err(Error::Data(format!(
                    "line {}: expansion of {:?} equals its surface",
                    lines[i], e.surface
                )));
            }
            let key = normalize(&e.surface, policy);
            if let Some(&prev) = index.get(&key) {
                return Err(Error::Data(format!(
                    "duplicate surface {:?} on lines {} and {}",
                    e.surface, lines[prev], lines[i]
                )));
            }
            index.insert(key, i);
            lengths.push(e.surface.chars().count());
        }
        lengths.sort_unstable_by(|a, b| b.cmp(a));
        lengths.dedup();
        Ok(AbbrevTable {
            entries,
            policy,
            index,
            lengths,
        })
    }

    /// Parses `surface<TAB>expansion` lines; blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str, policy: MatchPolicy) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(surface), Some(expansion), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected exactly two tab-separated fields".into(),
                });
            };
            let (surface, expansion) = (surface.trim(), expansion.trim());
            if surface.is_empty() || expansion.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty surface or expansion".into(),
                });
            }
            entries.push(AbbrevEntry {
                surface: surface.to_string(),
                expansion: expansion.to_string(),
            });
            lines.push(i + 1);
        }
        Self::build(entries, &lines, policy)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, MatchPolicy::default())
    }

    pub fn demo() -> Self {
        Self::parse(DEMO_TABLE, MatchPolicy::default()).expect("bundled table is valid")
    }

    pub fn entries(&self) -> &[AbbrevEntry] {
        &self.entries
    }

    pub fn policy(&self) -> MatchPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry whose surface matches `text` under the policy.
    pub fn lookup(&self, text: &str) -> Option<usize> {
        self.index.get(&normalize(text, self.policy)).copied()
    }
}

fn normalize(s: &str, policy: MatchPolicy) -> String {
    if policy.case_sensitive {
        s.to_string()
    } else {
        s.to_lowercase()
    }
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

/// One replaced span of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    /// Byte range in the input text.
    pub start: usize,
    pub end: usize,
    /// Index into [`AbbrevTable::entries`].
    pub entry: usize,
}

/// Expands `text` and reports the replaced spans, in order.
pub fn expand_with_spans(text: &str, table: &AbbrevTable) -> (String, Vec<Replacement>) {
    if table.is_empty() {
        return (text.to_string(), Vec::new());
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |k: usize| chars.get(k).map_or(text.len(), |c| c.0);
    let mut out = String::with_capacity(text.len());
    let mut spans = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let at_start = !table.policy.whole_word || k == 0 || !is_word(chars[k - 1].1);
        let mut hit = None;
        if at_start {
            for &len in &table.lengths {
                if k + len > chars.len() {
                    continue;
                }
                if table.policy.whole_word && k + len < chars.len() && is_word(chars[k + len].1) {
                    continue;
                }
                if let Some(entry) = table.lookup(&text[byte_at(k)..byte_at(k + len)]) {
                    hit = Some((len, entry));
                    break;
                }
            }
        }
        match hit {
            Some((len, entry)) => {
                out.push_str(&table.entries[entry].expansion);
                spans.push(Replacement {
                    start: byte_at(k),
                    end: byte_at(k + len),
                    entry,
                });
                k += len;
            }
            None => {
                out.push(chars[k].1);
                k += 1;
            }
        }
    }
    (out, spans)
}

pub fn expand(text: &str, table: &AbbrevTable) -> String {
    expand_with_spans(text, table).0
}

/// Replacement counts per table entry, in table order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionReport {
    pub counts: Vec<(String, usize)>,
    /// Examples with at least one replacement.
    pub examples_changed: usize,
}

impl ExpansionReport {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }

    pub fn count(&self, surface: &str) -> usize {
        self.counts.iter().find(|c| c.0 == surface).map_or(0, |c| c.1)
    }

    /// `surface<TAB>count` lines for every surface that was replaced.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("surface\tcount\n");
        for (surface, n) in self.counts.iter().filter(|c| c.1 > 0) {
            let _ = writeln!(s, "{surface}\t{n}");
        }
        let _ = writeln!(s, "total\t{}", self.total());
        s
    }
}

/// Expands premise and hypothesis of every example; labels and ids are kept.
pub fn expand_dataset(examples: &[NliExample], table: &AbbrevTable) -> (Vec<NliExample>, ExpansionReport) {
    let mut counts = vec![0usize; table.len()];
    let mut changed = 0;
    let out = examples
        .iter()
        .map(|ex| {
            let (premise, a) = expand_with_spans(&ex.premise, table);
            let (hypothesis, b) = expand_with_spans(&ex.hypothesis, table);
            for r in a.iter().chain(&b) {
                counts[r.entry] += 1;
            }
            if !a.is_empty() || !b.is_empty() {
                changed += 1;
            }
            NliExample {
                premise,
                hypothesis,
                ..ex.clone()
            }
        })
        .collect();
    let counts = table
        .entries
        .iter()
        .zip(counts)
        .map(|(e, n)| (e.surface.clone(), n))
        .collect();
    (
        out,
        ExpansionReport {
            counts,
            examples_changed: changed,
        },
    )
}
