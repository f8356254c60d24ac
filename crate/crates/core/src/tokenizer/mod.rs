//! Sub-word and word-level tokenization plus BERT-style pair encoding.

mod encode;
mod vocab;
mod wordpiece;

use serde::{Deserialize, Serialize};

pub use encode::{encode_ids, encode_pair, EncodedPair};
pub use vocab::{Vocabulary, CLS, CONTINUATION, PAD, SEP, SPECIALS, UNK};
pub use wordpiece::{
    build_word_vocab, detokenize, pretokenize, tokenize_wordpiece, tokenize_words, train_wordpiece, wordpiece_word,
};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// Greedy longest-match sub-words over a merge-trained lexicon.
    WordPiece,
    /// One id per word, `[UNK]` for out-of-vocabulary words.
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wordpiece" => Ok(TokenizerMode::WordPiece),
            "word" => Ok(TokenizerMode::Word),
            other => Err(crate::Error::Config(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn new(mode: TokenizerMode, vocab: Vocabulary) -> Self {
        Tokenizer { mode, vocab }
    }

    /// Builds a lexicon from `corpus`; `target_size` applies to word-piece mode only.
    pub fn train<S: AsRef<str>>(mode: TokenizerMode, corpus: &[S], target_size: usize) -> Result<Self> {
        let vocab = match mode {
            TokenizerMode::WordPiece => train_wordpiece(corpus, target_size)?,
            TokenizerMode::Word => build_word_vocab(corpus),
        };
        Ok(Tokenizer { mode, vocab })
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::WordPiece => tokenize_wordpiece(text, &self.vocab),
            TokenizerMode::Word => tokenize_words(text, &self.vocab),
        }
    }
}
