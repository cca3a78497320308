//! Inference: per-token argmax over head logits, then BIO repair.

use crate::adapters::AdapterSet;
use crate::data::{encode_tokens, repair_bio, Tokenizer};
use crate::encoder::{CoreModel, PackedInput};
use crate::error::Result;
use crate::heads_registry::{ClassifierHead, LabelScheme, Resolved};
use crate::tensor::Tape;

/// Sentences per packed forward pass.
const CHUNK: usize = 64;

/// Tags for argmax indices, with dangling `I-X` rewritten to `B-X`.
pub fn decode_rows(argmax: &[usize], scheme: &LabelScheme) -> Vec<String> {
    let mut tags: Vec<String> = argmax.iter().map(|&i| scheme.tags[i].clone()).collect();
    repair_bio(&mut tags);
    tags
}

/// Tags every sentence; output lengths always equal input lengths (tokens
/// beyond the model's maximum length are tagged `O`).
pub fn tag_sentences<S: AsRef<str>>(
    core: &CoreModel,
    adapter: Option<&AdapterSet>,
    head: &ClassifierHead,
    scheme: &LabelScheme,
    tok: &Tokenizer,
    sentences: &[Vec<S>],
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(CHUNK) {
        let ids: Vec<Vec<usize>> = chunk
            .iter()
            .map(|s| encode_tokens(tok, s, core.config.max_seq_len))
            .collect();
        let input = PackedInput::from_sequences(&ids);
        let mut tape = Tape::new();
        let h = core.forward(&mut tape, &input, adapter)?;
        let logits = head.logits(&mut tape, h)?;
        let (_, cols) = tape.shape(logits);
        let values = tape.value(logits);
        for (s, seg) in chunk.iter().zip(&input.segments) {
            let am: Vec<usize> = (seg.start + 1..seg.start + seg.len)
                .map(|r| {
                    let row = &values[r * cols..(r + 1) * cols];
                    (0..cols).fold(0, |b, j| if row[j] > row[b] { j } else { b })
                })
                .collect();
            let mut tags = decode_rows(&am, scheme);
            tags.resize(s.len(), "O".to_string());
            out.push(tags);
        }
    }
    Ok(out)
}

pub fn tag_resolved<S: AsRef<str>>(r: &Resolved<'_>, tok: &Tokenizer, sentences: &[Vec<S>]) -> Result<Vec<Vec<String>>> {
    tag_sentences(r.core, Some(r.adapter), r.head, r.scheme, tok, sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_repairs_dangling_inside() {
        let s = LabelScheme::compact();
        let i_per = s.index_of("I-PER").unwrap();
        let o = s.index_of("O").unwrap();
        assert_eq!(decode_rows(&[i_per, i_per, o, i_per], &s), ["B-PER", "I-PER", "O", "B-PER"]);
    }
}
