//! Prompt rendering, byte-level tokenization and sequence packing.

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::error::{Error, Result};

pub const QUESTION_PREFIX: &str = "Question: ";
pub const ANSWER_CUE: &str = " Answer: ";

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// A rendered training or scoring prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedExample {
    /// Everything up to and including the answer cue.
    pub prompt_text: String,
    pub full_text: String,
    /// Character offset of the answer within `full_text`.
    pub answer_start: usize,
}

impl PromptedExample {
    /// Byte offset of the answer within `full_text`.
    pub fn answer_byte_start(&self) -> usize {
        self.prompt_text.len()
    }

    pub fn answer(&self) -> &str {
        &self.full_text[self.prompt_text.len()..]
    }
}

/// The question segment: context and question joined by one space, with a
/// period appended unless it already ends in terminal punctuation.
pub fn question_segment(context: &str, question: &str) -> String {
    let mut segment = if context.is_empty() {
        question.to_string()
    } else {
        format!("{context} {question}")
    };
    if !segment.ends_with(['.', '?', '!']) {
        segment.push('.');
    }
    segment
}

pub fn render_parts(context: &str, question: &str, answer: &str) -> PromptedExample {
    let prompt_text = format!("{QUESTION_PREFIX}{}{ANSWER_CUE}", question_segment(context, question));
    let full_text = format!("{prompt_text}{answer}");
    PromptedExample {
        answer_start: prompt_text.chars().count(),
        prompt_text,
        full_text,
    }
}

pub fn render_prompt(rec: &QARecord) -> PromptedExample {
    render_parts(&rec.context, &rec.question, &rec.answer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence {
            ids,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Each UTF-8 byte is its own token.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence::new(text.bytes().map(u32::from).collect())
}

/// Inverse of [`tokenize`]. Special tokens are skipped.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS | EOS | PAD => {}
            _ => {
                return Err(Error::Token {
                    id,
                    vocab_size: VOCAB_SIZE,
                })
            }
        }
    }
    String::from_utf8(bytes).map_err(|_| Error::Utf8)
}

/// A packed training row. `loss_mask[i]` marks token `i` as a prediction
/// target (predicted from the logits at position `i - 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub tokens: TokenSequence,
    pub loss_mask: Vec<bool>,
    pub truncated: bool,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Model input: every token except the last.
    pub fn inputs(&self) -> &[u32] {
        &self.tokens.ids[..self.len().saturating_sub(1)]
    }

    /// Next-token targets aligned with [`Self::inputs`].
    pub fn targets(&self) -> &[u32] {
        &self.tokens.ids[1.min(self.len())..]
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.loss_mask[1.min(self.len())..]
    }

    /// Right-pad with PAD (mask false) up to `len`.
    pub fn padded(&self, len: usize) -> TrainingSequence {
        let mut out = self.clone();
        while out.tokens.ids.len() < len {
            out.tokens.ids.push(PAD);
            out.loss_mask.push(false);
        }
        out
    }
}

pub const MIN_PACK_LEN: usize = 8;

/// `BOS + tokenize(full_text) + EOS`, right-truncated to `max_len`.
pub fn pack_example(
    ex: &PromptedExample,
    max_len: usize,
    answer_only_loss: bool,
) -> Result<TrainingSequence> {
    if max_len < MIN_PACK_LEN {
        return Err(Error::Pack(format!(
            "max_len must be at least {MIN_PACK_LEN}, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(ex.full_text.len() + 2);
    ids.push(BOS);
    ids.extend(ex.full_text.bytes().map(u32::from));
    ids.push(EOS);

    let answer_pos = 1 + ex.answer_byte_start();
    if answer_pos >= max_len {
        return Err(Error::Pack(format!(
            "answer starts at token {answer_pos}, beyond max_len {max_len}"
        )));
    }
    let truncated = ids.len() > max_len;
    ids.truncate(max_len);

    let loss_mask = (0..ids.len())
        .map(|i| {
            if answer_only_loss {
                i >= answer_pos
            } else {
                i > 0
            }
        })
        .collect();
    Ok(TrainingSequence {
        tokens: TokenSequence::new(ids),
        loss_mask,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_examples() {
        let ex = render_parts("", "What is BP?", "Blood pressure.");
        assert_eq!(ex.full_text, "Question: What is BP? Answer: Blood pressure.");
        let ex = render_parts("Pt has fever", "Next step", "Antipyretics");
        assert_eq!(ex.full_text, "Question: Pt has fever Next step. Answer: Antipyretics");
        let ex = render_parts("", "X.", "Y");
        assert_eq!(ex.full_text, "Question: X. Answer: Y");
        assert_eq!(ex.prompt_text, "Question: X. Answer: ");
        assert_eq!(ex.answer(), "Y");
    }

    #[test]
    fn answer_start_counts_chars() {
        let ex = render_parts("", "Qué es?", "Sí");
        assert_eq!(ex.answer_start, "Question: Qué es? Answer: ".chars().count());
        assert_eq!(ex.answer_byte_start(), "Question: Qué es? Answer: ".len());
        assert!(ex.answer_start < ex.full_text.chars().count());
    }

    #[test]
    fn tokenizer_basics() {
        assert_eq!(tokenize("AB").ids, vec![65, 66]);
        assert!(tokenize("").is_empty());
        assert!(matches!(detokenize(&[300]), Err(Error::Token { id: 300, .. })));
        assert_eq!(detokenize(&[BOS, 72, 105, EOS, PAD]).unwrap(), "Hi");
        assert!(matches!(detokenize(&[0xff]), Err(Error::Utf8)));
    }

    #[test]
    fn pack_lengths_and_masks() {
        let ex = PromptedExample {
            prompt_text: "ab".into(),
            full_text: "abcde".into(),
            answer_start: 2,
        };
        let seq = pack_example(&ex, 16, false).unwrap();
        assert_eq!(seq.len(), 7);
        assert!(!seq.truncated);
        assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), seq.len() - 1);

        let seq = pack_example(&ex, 16, true).unwrap();
        assert_eq!(seq.loss_mask, [false, false, false, true, true, true, true]);
        assert_eq!(seq.tokens.ids[3], u32::from(b'c'));
        assert_eq!(*seq.tokens.ids.last().unwrap(), EOS);
    }

    #[test]
    fn pack_truncation() {
        let ex = PromptedExample {
            prompt_text: "0123456789012345678".into(),
            full_text: "01234567890123456789".into(),
            answer_start: 19,
        };
        assert!(matches!(pack_example(&ex, 8, false), Err(Error::Pack(_))));

        let ex = render_parts("", "Q?", "a long answer here");
        let seq = pack_example(&ex, 28, true).unwrap();
        assert!(seq.truncated);
        assert_eq!(seq.len(), 28);
        assert!(seq.loss_mask.iter().any(|&m| m));
        assert!(pack_example(&ex, 7, false).is_err());
    }

    #[test]
    fn padding_is_masked() {
        let ex = render_parts("", "Q?", "A");
        let seq = pack_example(&ex, 64, false).unwrap().padded(32);
        assert_eq!(seq.len(), 32);
        assert_eq!(seq.tokens.ids[31], PAD);
        assert!(!seq.loss_mask[31]);
    }
}
