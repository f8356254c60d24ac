use super::{Tokenizer, Vocabulary};
use crate::error::{Error, Result};

/// `[CLS] premise [SEP] hypothesis [SEP]` followed by `[PAD]` up to the
/// configured length. Segment 0 runs through the first `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub label: Option<usize>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Re-pads (or strips padding) to `len` positions.
    pub fn padded_to(&self, len: usize) -> Result<EncodedPair> {
        let content = self.content_len();
        if len < content {
            return Err(Error::Config(format!("cannot pad {content} positions into {len}")));
        }
        let mut out = self.clone();
        out.token_ids.resize(content, 0);
        out.segment_ids.resize(content, 0);
        out.attention_mask.resize(content, 0);
        out.token_ids.resize(len, Vocabulary::PAD_ID);
        out.segment_ids.resize(len, 0);
        out.attention_mask.resize(len, 0);
        out.position_ids = (0..len).collect();
        Ok(out)
    }
}

/// Encodes already-tokenized sides. Overlong input is trimmed one token at
/// a time from the tail of whichever side is currently longer (the premise
/// on ties).
pub fn encode_ids(premise: &[usize], hypothesis: &[usize], max_len: usize) -> Result<EncodedPair> {
    if max_len < 5 {
        return Err(Error::Config(format!("max_len {max_len} is below the minimum of 5")));
    }
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(Error::Data("premise or hypothesis has no tokens".into()));
    }
    let budget = max_len - 3;
    let (mut p, mut h) = (premise.len(), hypothesis.len());
    while p + h > budget {
        if p >= h {
            p -= 1;
        } else {
            h -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(Vocabulary::CLS_ID);
    token_ids.extend_from_slice(&premise[..p]);
    token_ids.push(Vocabulary::SEP_ID);
    token_ids.extend_from_slice(&hypothesis[..h]);
    token_ids.push(Vocabulary::SEP_ID);
    let used = token_ids.len();
    let mut segment_ids = vec![0; p + 2];
    segment_ids.resize(used, 1);
    segment_ids.resize(max_len, 0);
    let mut attention_mask = vec![1; used];
    attention_mask.resize(max_len, 0);
    token_ids.resize(max_len, Vocabulary::PAD_ID);
    Ok(EncodedPair {
        token_ids,
        segment_ids,
        position_ids: (0..max_len).collect(),
        attention_mask,
        label: None,
    })
}

pub fn encode_pair(premise: &str, hypothesis: &str, tokenizer: &Tokenizer, max_len: usize) -> Result<EncodedPair> {
    encode_ids(&tokenizer.tokenize(premise), &tokenizer.tokenize(hypothesis), max_len)
}
