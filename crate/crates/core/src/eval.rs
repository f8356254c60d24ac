//! Point-wise and list-wise prediction, accuracy, agreement between two
//! systems, and confidence statistics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{group_triples, GroupKey, Label, NliExample, NliTriple};
use crate::error::{Error, Result};
use crate::model::NliModel;

/// Tolerance on the sum of a probability triple.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pair_id: String,
    /// Probabilities in label order: entailment, contradiction, neutral.
    pub probs: [f64; 3],
    pub label: Label,
}

impl Prediction {
    /// Point-wise prediction: the label is the argmax of `probs`.
    pub fn new(pair_id: impl Into<String>, probs: [f64; 3]) -> Result<Self> {
        let label = Label::argmax(&probs);
        Self::with_label(pair_id, probs, label)
    }

    /// Prediction whose label was chosen by some other rule (list-wise).
    pub fn with_label(pair_id: impl Into<String>, probs: [f64; 3], label: Label) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Contract(format!(
                "probabilities {probs:?} do not form a distribution"
            )));
        }
        Ok(Prediction {
            pair_id: pair_id.into(),
            probs,
            label,
        })
    }

    /// Probability assigned to the predicted label.
    pub fn confidence(&self) -> f64 {
        self.probs[self.label.index()]
    }
}

/// An example the model could not score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleFailure {
    pub index: usize,
    pub pair_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionRun {
    /// In input order, failures omitted.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<ExampleFailure>,
    /// Examples scored point-wise because they belonged to no complete triple.
    pub pointwise_fallbacks: usize,
}

fn score_examples(model: &NliModel, examples: &[NliExample]) -> Vec<Result<[f64; 3]>> {
    examples
        .par_iter()
        .map(|ex| model.predict(&ex.premise, &ex.hypothesis))
        .collect()
}

/// Classifies each example independently.
pub fn predict_pointwise(model: &NliModel, examples: &[NliExample]) -> PredictionRun {
    let mut run = PredictionRun::default();
    for (i, (ex, scored)) in examples.iter().zip(score_examples(model, examples)).enumerate() {
        let pair_id = ex.id_or_index(i);
        match scored.and_then(|p| Prediction::new(pair_id.clone(), p)) {
            Ok(p) => run.predictions.push(p),
            Err(e) => run.failures.push(ExampleFailure {
                index: i,
                pair_id,
                message: e.to_string(),
            }),
        }
    }
    run
}

/// Label assignment for the three pairs of a triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    /// `labels[k]` is the label index given to pair `k`.
    pub labels: [usize; 3],
    /// Σ_k log p[k][labels[k]].
    pub score: f64,
}

/// The six permutations of `0..3` in lexicographic order.
pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

pub fn permutation_score(probs: &[[f64; 3]; 3], perm: &[usize; 3]) -> f64 {
    probs[0][perm[0]].ln() + probs[1][perm[1]].ln() + probs[2][perm[2]].ln()
}

/// Exclusive assignment maximizing the joint log-probability. Ties, and
/// NaN scores, resolve to the lexicographically smallest permutation.
pub fn assign_exclusive(probs: &[[f64; 3]; 3]) -> Assignment {
    let mut best = Assignment {
        labels: PERMUTATIONS[0],
        score: permutation_score(probs, &PERMUTATIONS[0]),
    };
    for perm in &PERMUTATIONS[1..] {
        let score = permutation_score(probs, perm);
        if score > best.score || (best.score.is_nan() && !score.is_nan()) {
            best = Assignment { labels: *perm, score };
        }
    }
    best
}

/// Scores the triple point-wise, then assigns each label to exactly one pair.
pub fn predict_listwise(model: &NliModel, triple: &NliTriple) -> Result<(Assignment, [[f64; 3]; 3])> {
    let ex = triple.examples();
    let mut probs = [[0.0; 3]; 3];
    for (k, e) in ex.iter().enumerate() {
        probs[k] = model.predict(&e.premise, &e.hypothesis)?;
    }
    Ok((assign_exclusive(&probs), probs))
}

/// List-wise prediction over a dataset. Examples outside complete triples
/// fall back to point-wise prediction and are counted.
pub fn predict_listwise_dataset(model: &NliModel, examples: &[NliExample], key: &GroupKey) -> PredictionRun {
    let grouping = group_triples(examples, key);
    let scored = score_examples(model, examples);
    let mut labels: Vec<Option<Label>> = vec![None; examples.len()];
    for members in &grouping.members {
        let rows: Option<Vec<[f64; 3]>> = members.iter().map(|&i| scored[i].as_ref().ok().copied()).collect();
        if let Some(rows) = rows {
            let a = assign_exclusive(&[rows[0], rows[1], rows[2]]);
            for (k, &i) in members.iter().enumerate() {
                labels[i] = Label::from_index(a.labels[k]);
            }
        }
    }
    let mut run = PredictionRun::default();
    for (i, (ex, s)) in examples.iter().zip(scored).enumerate() {
        let pair_id = ex.id_or_index(i);
        let pred = s.and_then(|p| match labels[i] {
            Some(l) => Prediction::with_label(pair_id.clone(), p, l),
            None => {
                run.pointwise_fallbacks += 1;
                Prediction::new(pair_id.clone(), p)
            }
        });
        match pred {
            Ok(p) => run.predictions.push(p),
            Err(e) => run.failures.push(ExampleFailure {
                index: i,
                pair_id,
                message: e.to_string(),
            }),
        }
    }
    if run.pointwise_fallbacks > 0 {
        log::warn!(
            "{} of {} examples are not in a complete triple; scored point-wise",
            run.pointwise_fallbacks,
            examples.len()
        );
    }
    run
}

/// Gold labels keyed by pair id (or position when the id is absent).
pub fn gold_map(golds: &[NliExample]) -> Result<HashMap<String, Label>> {
    let mut map = HashMap::with_capacity(golds.len());
    for (i, g) in golds.iter().enumerate() {
        let id = g.id_or_index(i);
        if map.insert(id.clone(), g.gold_label).is_some() {
            return Err(Error::Data(format!("duplicate pair id {id:?} in gold data")));
        }
    }
    Ok(map)
}

/// Pairs each prediction with its gold label; both sides must cover the
/// same ids exactly once.
fn align<'p>(preds: &'p [Prediction], golds: &HashMap<String, Label>) -> Result<Vec<(&'p Prediction, Label)>> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold examples",
            preds.len(),
            golds.len()
        )));
    }
    let mut seen = HashSet::with_capacity(preds.len());
    preds
        .iter()
        .map(|p| {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::Data(format!("duplicate prediction for {:?}", p.pair_id)));
            }
            let gold = golds
                .get(&p.pair_id)
                .ok_or_else(|| Error::Data(format!("no gold label for {:?}", p.pair_id)))?;
            Ok((p, *gold))
        })
        .collect()
}

pub fn accuracy(preds: &[Prediction], golds: &[NliExample]) -> Result<f64> {
    let aligned = align(preds, &gold_map(golds)?)?;
    if aligned.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let correct = aligned.iter().filter(|(p, g)| p.label == *g).count();
    Ok(correct as f64 / aligned.len() as f64)
}

/// Mean probability of the predicted label over correct predictions only.
pub fn mean_correct_confidence(preds: &[Prediction], golds: &[NliExample]) -> Result<f64> {
    let aligned = align(preds, &gold_map(golds)?)?;
    let correct: Vec<f64> = aligned
        .iter()
        .filter(|(p, g)| p.label == *g)
        .map(|(p, _)| p.confidence())
        .collect();
    if correct.is_empty() {
        return Err(Error::Undefined("no correct predictions to average".into()));
    }
    Ok(correct.iter().sum::<f64>() / correct.len() as f64)
}

/// Which of two systems got each example right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Agreement {
    pub both: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub neither: usize,
}

impl Agreement {
    pub fn total(&self) -> usize {
        self.both + self.only_a + self.only_b + self.neither
    }

    pub fn fraction(&self, count: usize) -> f64 {
        count as f64 / self.total() as f64
    }

    /// `[both, only_a, only_b, neither]` as fractions of the total.
    pub fn fractions(&self) -> [f64; 4] {
        [self.both, self.only_a, self.only_b, self.neither].map(|c| self.fraction(c))
    }

    /// Percentage rounded to the nearest integer.
    pub fn rounded_percent(&self, count: usize) -> u64 {
        (100.0 * self.fraction(count)).round() as u64
    }
}

pub fn agreement_partition(a: &[Prediction], b: &[Prediction], golds: &[NliExample]) -> Result<Agreement> {
    let gold = gold_map(golds)?;
    let a = align(a, &gold)?;
    let b: HashMap<&str, bool> = align(b, &gold)?
        .into_iter()
        .map(|(p, g)| (p.pair_id.as_str(), p.label == g))
        .collect();
    if a.is_empty() {
        return Err(Error::Undefined("agreement over an empty set".into()));
    }
    let mut out = Agreement::default();
    for (p, g) in a {
        match (p.label == g, b[p.pair_id.as_str()]) {
            (true, true) => out.both += 1,
            (true, false) => out.only_a += 1,
            (false, true) => out.only_b += 1,
            (false, false) => out.neither += 1,
        }
    }
    Ok(out)
}

/// `pair_id<TAB>p_e<TAB>p_c<TAB>p_n<TAB>label`, one line per prediction.
pub fn predictions_to_tsv(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            p.pair_id, p.probs[0], p.probs[1], p.probs[2], p.label
        );
    }
    s
}

pub fn parse_predictions_tsv(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let mut probs = [0.0; 3];
        for k in 0..3 {
            probs[k] = f[k + 1].parse().map_err(|e| err(format!("{:?}: {e}", f[k + 1])))?;
        }
        let label: Label = f[4].parse().map_err(|e: Error| err(e.to_string()))?;
        out.push(Prediction::with_label(f[0], probs, label).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_tsv(preds)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions_tsv(&text)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `None` when nothing was predicted correctly.
    pub mean_correct_confidence: Option<f64>,
    pub agreement: Option<Agreement>,
    pub pointwise_fallbacks: Option<usize>,
    pub failures: usize,
}

impl MetricsReport {
    pub fn compute(preds: &[Prediction], golds: &[NliExample]) -> Result<Self> {
        let acc = accuracy(preds, golds)?;
        let confidence = match mean_correct_confidence(preds, golds) {
            Ok(c) => Some(c),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            examples: preds.len(),
            correct: (acc * preds.len() as f64).round() as usize,
            accuracy: acc,
            mean_correct_confidence: confidence,
            ..Default::default()
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples={}", self.examples);
        let _ = writeln!(s, "correct={}", self.correct);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        match self.mean_correct_confidence {
            Some(c) => _ = writeln!(s, "mean_correct_confidence={c}"),
            None => _ = writeln!(s, "mean_correct_confidence=undefined"),
        }
        if let Some(a) = &self.agreement {
            let [fb, fa, fo, fn_] = a.fractions();
            let _ = writeln!(s, "agreement.both={}\nagreement.both_fraction={fb}", a.both);
            let _ = writeln!(s, "agreement.only_a={}\nagreement.only_a_fraction={fa}", a.only_a);
            let _ = writeln!(s, "agreement.only_b={}\nagreement.only_b_fraction={fo}", a.only_b);
            let _ = writeln!(s, "agreement.neither={}\nagreement.neither_fraction={fn_}", a.neither);
        }
        if let Some(n) = self.pointwise_fallbacks {
            let _ = writeln!(s, "pointwise_fallbacks={n}");
        }
        let _ = writeln!(s, "failures={}", self.failures);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "accuracy: {:.4} ({} / {})",
            self.accuracy, self.correct, self.examples
        );
        match self.mean_correct_confidence {
            Some(c) => _ = writeln!(s, "mean confidence of correct predictions: {c:.4}"),
            None => _ = writeln!(s, "mean confidence of correct predictions: undefined"),
        }
        if let Some(a) = &self.agreement {
            let _ = writeln!(s, "agreement with the second system:");
            for (name, n) in [
                ("both correct", a.both),
                ("only first", a.only_a),
                ("only second", a.only_b),
                ("neither", a.neither),
            ] {
                let _ = writeln!(s, "  {name:<13} {n:>6}  {:>5.1}%", 100.0 * a.fraction(n));
            }
        }
        if let Some(n) = self.pointwise_fallbacks {
            let _ = writeln!(s, "point-wise fallbacks: {n}");
        }
        if self.failures > 0 {
            let _ = writeln!(s, "failed examples: {}", self.failures);
        }
        s
    }
}
