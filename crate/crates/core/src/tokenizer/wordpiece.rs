use std::collections::HashMap;

use super::vocab::{Vocabulary, CONTINUATION};
use crate::error::{Error, Result};

/// Words longer than this (in chars) become a single `[UNK]`.
const MAX_CHARS_PER_WORD: usize = 100;

/// Lowercases, splits on whitespace, and splits punctuation into separate words.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_lowercase().collect());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

fn piece(chars: &[char], initial: bool) -> String {
    let mut s = String::with_capacity(chars.len() + 2);
    if !initial {
        s.push_str(CONTINUATION);
    }
    s.extend(chars);
    s
}

/// Greedy longest-match-first segmentation of one pretokenized word.
/// A position where no piece matches yields `[UNK]` for that one character.
pub fn wordpiece_word(word: &str, vocab: &Vocabulary, out: &mut Vec<usize>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_CHARS_PER_WORD {
        out.push(Vocabulary::UNK_ID);
        return;
    }
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            if let Some(id) = vocab.id(&piece(&chars[start..end], start == 0)) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(Vocabulary::UNK_ID);
                start += 1;
            }
        }
    }
}

pub fn tokenize_wordpiece(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut out = Vec::new();
    for w in pretokenize(text) {
        wordpiece_word(&w, vocab, &mut out);
    }
    out
}

/// Joins pieces back into words, stripping continuation prefixes.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(super::vocab::UNK);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !s.is_empty() => s.push_str(rest),
            _ => {
                if !s.is_empty() {
                    s.push(' ');
                }
                s.push_str(tok);
            }
        }
    }
    s
}

/// Builds a sub-word vocabulary by greedy pair merging.
///
/// Words start as single-character symbols (non-initial ones prefixed with
/// `##`); every symbol form seen in the corpus enters the vocabulary, then
/// the most frequent adjacent pair is merged repeatedly until the vocabulary
/// reaches `target_size` or nothing is left to merge. Frequency ties go to
/// the pair seen first in corpus order.
pub fn train_wordpiece<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<(Vec<String>, usize)> = Vec::new();
    for sentence in corpus {
        for w in pretokenize(sentence.as_ref()) {
            if w.chars().count() > MAX_CHARS_PER_WORD {
                continue;
            }
            match word_index.get(&w) {
                Some(&i) => words[i].1 += 1,
                None => {
                    let chars: Vec<char> = w.chars().collect();
                    let symbols = (0..chars.len()).map(|i| piece(&chars[i..i + 1], i == 0)).collect();
                    word_index.insert(w, words.len());
                    words.push((symbols, 1));
                }
            }
        }
    }
    let mut vocab = Vocabulary::with_specials();
    for (symbols, _) in &words {
        for s in symbols {
            vocab.insert(s);
        }
    }
    if target_size < vocab.len() {
        return Err(Error::Config(format!(
            "target size {target_size} cannot hold the {} specials and alphabet symbols",
            vocab.len()
        )));
    }

    while vocab.len() < target_size {
        // (left, right) -> (count, first-seen rank)
        let mut pairs: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
        for (symbols, freq) in &words {
            for win in symbols.windows(2) {
                let rank = pairs.len();
                pairs.entry((win[0].as_str(), win[1].as_str())).or_insert((0, rank)).0 += freq;
            }
        }
        let Some((&(l, r), _)) = pairs
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        else {
            break;
        };
        let (left, right) = (l.to_string(), r.to_string());
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        vocab.insert(&merged);
    }
    Ok(vocab)
}

/// Word-level lexicon: specials followed by corpus words in first-seen order.
pub fn build_word_vocab<S: AsRef<str>>(corpus: &[S]) -> Vocabulary {
    let mut vocab = Vocabulary::with_specials();
    for sentence in corpus {
        for w in pretokenize(sentence.as_ref()) {
            vocab.insert(&w);
        }
    }
    vocab
}

pub fn tokenize_words(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    pretokenize(text).iter().map(|w| vocab.id_or_unk(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(ids: &[usize], v: &Vocabulary) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn pretokenize_splits_punctuation_and_lowercases() {
        assert_eq!(
            pretokenize("He denies Fever, cough."),
            vec!["he", "denies", "fever", ",", "cough", "."]
        );
        assert_eq!(pretokenize("post-MI [**09**]")[..3], ["post", "-", "mi"]);
    }

    #[test]
    fn greedy_longest_match() {
        let v = Vocabulary::from_tokens(
            crate::tokenizer::vocab::SPECIALS
                .iter()
                .copied()
                .chain(["a", "aa", "##a", "##ab", "##b", "patient"]),
        )
        .unwrap();
        assert_eq!(toks(&tokenize_wordpiece("aaab", &v), &v), ["aa", "##ab"]);
        assert_eq!(tokenize_wordpiece("patient", &v), vec![v.id("patient").unwrap()]);
        assert_eq!(tokenize_wordpiece("ω", &v), vec![Vocabulary::UNK_ID]);
    }

    #[test]
    fn merges_most_frequent_pair_first() {
        let corpus = ["aaab", "aab"];
        // specials + {a, ##a, ##b} = 7; two merges
        let v = train_wordpiece(&corpus, 9).unwrap();
        assert!(v.contains("aa"), "{:?}", v.tokens());
        assert_eq!(v.len(), 9);
    }

    #[test]
    fn single_character_corpus() {
        let v = train_wordpiece(&["a"], 5).unwrap();
        assert_eq!(v.tokens(), ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a"]);
        assert!(matches!(train_wordpiece(&["ab"], 5), Err(Error::Config(_))));
        assert!(matches!(train_wordpiece::<&str>(&[], 10), Err(Error::Data(_))));
    }

    #[test]
    fn trained_vocab_covers_its_corpus() {
        let corpus = [
            "The patient denies chest pain.",
            "History of hypertension and diabetes mellitus",
            "no acute distress; afebrile",
        ];
        let v = train_wordpiece(&corpus, 60).unwrap();
        for s in corpus {
            let ids = tokenize_wordpiece(s, &v);
            assert!(!ids.contains(&Vocabulary::UNK_ID), "{s}");
        }
    }

    #[test]
    fn detokenize_strips_continuations() {
        let v = train_wordpiece(&["hypertension hypotension"], 30).unwrap();
        for w in ["hypertension", "hypotension"] {
            assert_eq!(detokenize(&tokenize_wordpiece(w, &v), &v), w);
        }
    }
}
