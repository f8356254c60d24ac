//! Rule-generated NLI corpora with labels correct by construction.
//!
//! Each premise states two findings. The entailment hypothesis restates one
//! of them, the contradiction negates one, and the neutral hypothesis asserts
//! a finding the premise does not mention. Findings are nonce words drawn
//! from a deterministic word bank.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{group_triples, GroupKey, Label, NliExample, TripleGrouping};
use crate::error::{Error, Result};

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ru", "te", "vo", "za", "pe", "si", "du", "fa", "go", "hu", "je", "ni", "bo", "ce", "xi", "wa",
    "ty",
];

const PREMISE_TEMPLATES: [&str; 4] = [
    "the patient has {a} and {b}",
    "patient presents with {a} and {b}",
    "exam notable for {a} and {b}",
    "history of {a} with {b}",
];

const POSITIVE_TEMPLATES: [&str; 4] = [
    "patient has {x}",
    "the patient has {x}",
    "{x} is present",
    "there is {x}",
];

const NEGATIVE_TEMPLATES: [&str; 4] = [
    "patient has no {x}",
    "there is no {x}",
    "{x} is absent",
    "the patient denies {x}",
];

/// Every word the templates contribute.
pub const FUNCTION_WORDS: [&str; 17] = [
    "the", "patient", "has", "and", "presents", "with", "exam", "notable", "for", "history", "of", "is", "present",
    "there", "no", "absent", "denies",
];

pub const MAX_TEMPLATES: usize = 4;
const PREMISE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of distinct findings.
    pub vocab_size: usize,
    /// Templates used per class, at most [`MAX_TEMPLATES`].
    pub templates_per_class: usize,
    pub examples: usize,
    pub seed: u64,
    /// Divergence of the target word distribution in
    /// [`generate_transfer_pair`]: 0 shares every finding, 1 shares none.
    pub shift: f64,
    /// Prefix of generated pair ids.
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 40,
            templates_per_class: MAX_TEMPLATES,
            examples: 300,
            seed: 0,
            shift: 0.0,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 3, got {}",
                self.vocab_size
            )));
        }
        if !(1..=MAX_TEMPLATES).contains(&self.templates_per_class) {
            return Err(Error::Config(format!(
                "templates_per_class must be in 1..={MAX_TEMPLATES}, got {}",
                self.templates_per_class
            )));
        }
        if self.examples == 0 {
            return Err(Error::Config("examples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Config(format!("shift must be in [0, 1], got {}", self.shift)));
        }
        if self.id_prefix.contains(char::is_whitespace) {
            return Err(Error::Config("id_prefix must not contain whitespace".into()));
        }
        Ok(())
    }
}

/// The `i`-th nonce word; distinct for distinct `i` below 8000.
pub fn bank_word(i: usize) -> String {
    let n = SYLLABLES.len();
    [i % n, (i / n) % n, (i / (n * n)) % n]
        .iter()
        .map(|&k| SYLLABLES[k])
        .collect()
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    slots.iter().fold(template.to_string(), |t, (k, v)| t.replace(k, v))
}

fn generate_with_words(
    words: &[String],
    spec: &SynthSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NliExample>> {
    let t = spec.templates_per_class;
    let premises = count.div_ceil(3);
    let mut seen = HashSet::with_capacity(premises);
    let mut out = Vec::with_capacity(count);
    for g in 0..premises {
        let (a, b, premise) = (0..PREMISE_ATTEMPTS)
            .find_map(|_| {
                let pick = index::sample(rng, words.len(), 2);
                let (a, b) = (&words[pick.index(0)], &words[pick.index(1)]);
                let tpl = PREMISE_TEMPLATES[rng.gen_range(0..t)];
                let p = fill(tpl, &[("{a}", a), ("{b}", b)]);
                seen.insert(p.clone()).then_some((a, b, p))
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "cannot draw {premises} distinct premises from {} findings",
                    words.len()
                ))
            })?;
        let stated = if rng.gen_bool(0.5) { a } else { b };
        let negated = if rng.gen_bool(0.5) { a } else { b };
        let unrelated = loop {
            let w = words.choose(rng).expect("non-empty word list");
            if w != a && w != b {
                break w;
            }
        };
        let hyps = [
            (Label::Entailment, POSITIVE_TEMPLATES[rng.gen_range(0..t)], stated),
            (Label::Contradiction, NEGATIVE_TEMPLATES[rng.gen_range(0..t)], negated),
            (Label::Neutral, POSITIVE_TEMPLATES[rng.gen_range(0..t)], unrelated),
        ];
        for (k, (label, tpl, x)) in hyps.into_iter().enumerate() {
            if out.len() == count {
                break;
            }
            out.push(
                NliExample::new(premise.clone(), fill(tpl, &[("{x}", x)]), label)
                    .with_id(format!("{}-{g}-{k}", spec.id_prefix)),
            );
        }
    }
    Ok(out)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Corpus of `spec.examples` pairs, labels cycling entailment,
/// contradiction, neutral; consecutive triples share a premise.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Vec<NliExample>> {
    spec.validate()?;
    let words: Vec<String> = (0..spec.vocab_size).map(bank_word).collect();
    generate_with_words(&words, spec, spec.examples, &mut stream_rng(spec.seed, 0))
}

/// Number of findings the target shares with a source of `vocab_size`:
/// `s = round(2V(1 - shift) / (2 - shift))`. The Jaccard overlap
/// `s / (2V - s)` is then 1 at shift 0, 1/2 at shift 0.5 and 0 at shift 1.
pub fn shared_findings(vocab_size: usize, shift: f64) -> usize {
    let v = vocab_size as f64;
    ((2.0 * v * (1.0 - shift) / (2.0 - shift)).round() as usize).min(vocab_size)
}

/// Source and target corpora sharing the inference rules but drawing
/// findings from overlapping word sets.
pub fn generate_transfer_pair(
    spec: &SynthSpec,
    source_examples: usize,
    target_examples: usize,
) -> Result<(Vec<NliExample>, Vec<NliExample>)> {
    spec.validate()?;
    if source_examples == 0 || target_examples == 0 {
        return Err(Error::Config("transfer corpora must be non-empty".into()));
    }
    let v = spec.vocab_size;
    let source_words: Vec<String> = (0..v).map(bank_word).collect();
    let shared = shared_findings(v, spec.shift);
    let mut pick_rng = stream_rng(spec.seed, 3);
    let mut target_words: Vec<String> = index::sample(&mut pick_rng, v, shared)
        .into_iter()
        .map(|i| source_words[i].clone())
        .collect();
    target_words.sort_unstable();
    target_words.extend((v..2 * v - shared).map(bank_word));

    let source_spec = SynthSpec {
        id_prefix: format!("{}-src", spec.id_prefix),
        ..spec.clone()
    };
    let target_spec = SynthSpec {
        id_prefix: format!("{}-tgt", spec.id_prefix),
        ..spec.clone()
    };
    let source = generate_with_words(
        &source_words,
        &source_spec,
        source_examples,
        &mut stream_rng(spec.seed, 1),
    )?;
    let target = generate_with_words(
        &target_words,
        &target_spec,
        target_examples,
        &mut stream_rng(spec.seed, 2),
    )?;
    Ok((source, target))
}

/// Groups a corpus by premise, keeping complete triples only.
pub fn generate_triples(corpus: &[NliExample]) -> TripleGrouping {
    group_triples(corpus, &GroupKey::Premise)
}

/// Words of the corpus that are not template words.
pub fn content_words(corpus: &[NliExample]) -> BTreeSet<String> {
    let function: HashSet<&str> = FUNCTION_WORDS.into_iter().collect();
    corpus
        .iter()
        .flat_map(|e| e.premise.split_whitespace().chain(e.hypothesis.split_whitespace()))
        .filter(|w| !function.contains(w))
        .map(str::to_string)
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Splits at premise-group boundaries (consecutive examples sharing a
/// premise stay together) into parts of roughly the given fractions.
pub fn split_by_premise(corpus: &[NliExample], fractions: &[f64]) -> Result<Vec<Vec<NliExample>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut groups: Vec<&[NliExample]> = Vec::new();
    let mut start = 0;
    for i in 1..=corpus.len() {
        if i == corpus.len() || corpus[i].premise != corpus[start].premise {
            groups.push(&corpus[start..i]);
            start = i;
        }
    }
    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut taken = 0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            groups.len()
        } else {
            ((cum * groups.len() as f64).round() as usize).clamp(taken, groups.len())
        };
        out.push(groups[taken..end].iter().flat_map(|g| g.iter().cloned()).collect());
        taken = end;
    }
    Ok(out)
}
