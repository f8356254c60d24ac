//! NLI examples, the three-way label set, and the JSONL dataset format.
//!
//! Lines use the SNLI-style key names (`sentence1`, `sentence2`,
//! `gold_label`, optional `pairID`); unknown keys are ignored on read.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
}

impl Label {
    /// Fixed class order; also the tie-break order for argmax.
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }

    /// First label attaining the maximum probability.
    pub fn argmax(probs: &[f64; 3]) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Label::ALL[best]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "contradiction" => Ok(Label::Contradiction),
            "neutral" => Ok(Label::Neutral),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    #[serde(rename = "sentence1")]
    pub premise: String,
    #[serde(rename = "sentence2")]
    pub hypothesis: String,
    pub gold_label: Label,
    #[serde(rename = "pairID", default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl NliExample {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>, gold_label: Label) -> Self {
        NliExample {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            gold_label,
            pair_id: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.pair_id = Some(id.into());
        self
    }

    /// The pair id, or the example's position when the id is absent.
    pub fn id_or_index(&self, index: usize) -> String {
        self.pair_id.clone().unwrap_or_else(|| index.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.premise.trim().is_empty() || self.hypothesis.trim().is_empty() {
            return Err(Error::Data(format!("example {:?} has an empty sentence", self.pair_id)));
        }
        Ok(())
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<NliExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: NliExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[NliExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<NliExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[NliExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)?).map_err(|e| Error::io(path, e))
}

/// Three pairs sharing one premise, one per label, stored in label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliTriple {
    examples: [NliExample; 3],
}

impl NliTriple {
    pub fn new(examples: [NliExample; 3]) -> Result<Self> {
        let premise = &examples[0].premise;
        if examples.iter().any(|e| &e.premise != premise) {
            return Err(Error::Data("triple members have different premises".into()));
        }
        let mut seen = [false; 3];
        for e in &examples {
            seen[e.gold_label.index()] = true;
        }
        if seen != [true; 3] {
            return Err(Error::Data("triple must hold one pair per label".into()));
        }
        let mut sorted = examples;
        sorted.sort_by_key(|e| e.gold_label);
        Ok(NliTriple { examples: sorted })
    }

    pub fn examples(&self) -> &[NliExample; 3] {
        &self.examples
    }

    pub fn premise(&self) -> &str {
        &self.examples[0].premise
    }
}

/// How examples are grouped into candidate triples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GroupKey {
    /// Identical premise text.
    #[default]
    Premise,
    /// Pair-id prefix before the last occurrence of the separator.
    PairIdPrefix(char),
}

impl GroupKey {
    fn key(&self, ex: &NliExample) -> Option<String> {
        match self {
            GroupKey::Premise => Some(ex.premise.clone()),
            GroupKey::PairIdPrefix(sep) => ex
                .pair_id
                .as_deref()
                .and_then(|id| id.rsplit_once(*sep))
                .map(|(prefix, _)| prefix.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TripleGrouping {
    pub triples: Vec<NliTriple>,
    /// For each triple, the corpus indices of its members in label order.
    pub members: Vec<[usize; 3]>,
    /// Groups that did not hold exactly one example per label.
    pub skipped_groups: usize,
    /// Corpus indices not covered by any triple.
    pub ungrouped: Vec<usize>,
}

/// Groups examples by `key` and keeps groups holding exactly one pair per label,
/// in order of each group's first appearance.
pub fn group_triples(corpus: &[NliExample], key: &GroupKey) -> TripleGrouping {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    let mut out = TripleGrouping::default();
    for (i, ex) in corpus.iter().enumerate() {
        match key.key(ex) {
            Some(k) => {
                groups
                    .entry(k.clone())
                    .or_insert_with(|| {
                        order.push(k);
                        Vec::new()
                    })
                    .push(i);
            }
            None => out.ungrouped.push(i),
        }
    }
    for k in order {
        let idx = &groups[&k];
        let complete = idx.len() == 3 && {
            let mut seen = [false; 3];
            idx.iter().for_each(|&i| seen[corpus[i].gold_label.index()] = true);
            seen == [true; 3]
        };
        let triple = complete
            .then(|| NliTriple::new([0, 1, 2].map(|j| corpus[idx[j]].clone())).ok())
            .flatten();
        match triple {
            Some(t) => {
                let mut m = [idx[0], idx[1], idx[2]];
                m.sort_by_key(|&i| corpus[i].gold_label);
                out.members.push(m);
                out.triples.push(t);
            }
            None => {
                out.skipped_groups += 1;
                out.ungrouped.extend(idx);
            }
        }
    }
    out.ungrouped.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_order_and_argmax_ties() {
        assert_eq!(Label::ALL.map(Label::index), [0, 1, 2]);
        assert_eq!(Label::argmax(&[1.0 / 3.0; 3]), Label::Entailment);
        assert_eq!(Label::argmax(&[0.2, 0.4, 0.4]), Label::Contradiction);
        assert!("-".parse::<Label>().is_err());
    }

    #[test]
    fn jsonl_reads_standard_keys() {
        let line = r#"{"sentence1": "He denies fever.", "sentence2": "No fever", "gold_label": "entailment", "pairID": "x-1", "sentence1_parse": "(ROOT)"}"#;
        let ex = parse_jsonl(line).unwrap();
        assert_eq!(ex[0].premise, "He denies fever.");
        assert_eq!(ex[0].pair_id.as_deref(), Some("x-1"));
        let written = to_jsonl(&ex).unwrap();
        assert_eq!(parse_jsonl(&written).unwrap(), ex);
        assert_eq!(to_jsonl(&parse_jsonl(&written).unwrap()).unwrap(), written);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let bad = "{\"sentence1\":\"a\",\"sentence2\":\"b\",\"gold_label\":\"neutral\"}\n{\"sentence1\":\"a\",\"sentence2\":\"b\",\"gold_label\":\"-\"}\n";
        assert!(matches!(parse_jsonl(bad), Err(Error::Parse { line: 2, .. })));
        let empty = "{\"sentence1\":\"\",\"sentence2\":\"b\",\"gold_label\":\"neutral\"}";
        assert!(matches!(parse_jsonl(empty), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn grouping_skips_incomplete_groups() {
        let c = vec![
            NliExample::new("p1", "a", Label::Neutral),
            NliExample::new("p1", "b", Label::Entailment),
            NliExample::new("p2", "c", Label::Entailment),
            NliExample::new("p1", "d", Label::Contradiction),
            NliExample::new("p2", "e", Label::Neutral),
        ];
        let g = group_triples(&c, &GroupKey::Premise);
        assert_eq!(g.triples.len(), 1);
        assert_eq!(g.members[0], [1, 3, 0]);
        assert_eq!(g.skipped_groups, 1);
        assert_eq!(g.ungrouped, vec![2, 4]);
        let labels: Vec<_> = g.triples[0].examples().iter().map(|e| e.gold_label).collect();
        assert_eq!(labels, Label::ALL);
    }

    #[test]
    fn grouping_by_pair_id_prefix() {
        let c = vec![
            NliExample::new("p", "a", Label::Entailment).with_id("g1-0"),
            NliExample::new("p", "b", Label::Contradiction).with_id("g1-1"),
            NliExample::new("p", "c", Label::Neutral).with_id("g1-2"),
            NliExample::new("p", "d", Label::Neutral),
        ];
        let g = group_triples(&c, &GroupKey::PairIdPrefix('-'));
        assert_eq!(g.triples.len(), 1);
        assert_eq!(g.ungrouped, vec![3]);
    }
}
