use serde::{Deserialize, Serialize};

pub const PAD: u16 = 0;
pub const EOS: u16 = 1;
pub const UNK: u16 = 2;
/// Byte `b` is token `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: u16 = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

/// Fixed-length byte token sequence with its validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTokenSeq {
    ids: Vec<u16>,
    mask: Vec<bool>,
    truncated: bool,
}

impl ByteTokenSeq {
    /// Builds a sequence from raw ids; the mask marks every id up to and
    /// including the first EOS (or every non-PAD id when there is none).
    pub fn from_ids(ids: Vec<u16>) -> Self {
        let mut mask = vec![false; ids.len()];
        let mut seen_eos = false;
        for (m, &id) in mask.iter_mut().zip(&ids) {
            if seen_eos {
                break;
            }
            *m = id != PAD;
            seen_eos = id == EOS;
        }
        let truncated = !seen_eos && !ids.is_empty() && !ids.contains(&PAD);
        ByteTokenSeq {
            ids,
            mask,
            truncated,
        }
    }

    /// Explicit ids and mask; the sequence counts as truncated when no masked id is EOS.
    pub fn with_mask(ids: Vec<u16>, mask: Vec<bool>) -> Self {
        assert_eq!(ids.len(), mask.len());
        let truncated = !ids.iter().zip(&mask).any(|(&i, &m)| m && i == EOS);
        ByteTokenSeq {
            ids,
            mask,
            truncated,
        }
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }
}

/// UTF-8 bytes, then EOS, then PAD up to `max_len`. Text longer than
/// `max_len - 1` bytes keeps its first `max_len - 1` bytes, loses the EOS and
/// is flagged as truncated.
pub fn tokenize(text: &str, max_len: usize) -> ByteTokenSeq {
    assert!(max_len >= 1, "max_len must be positive");
    let bytes = text.as_bytes();
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    let truncated = bytes.len() > max_len - 1;
    for &b in bytes.iter().take(max_len - 1) {
        ids.push(b as u16 + BYTE_OFFSET);
        mask.push(true);
    }
    if !truncated {
        ids.push(EOS);
        mask.push(true);
    }
    while ids.len() < max_len {
        ids.push(PAD);
        mask.push(false);
    }
    ByteTokenSeq {
        ids,
        mask,
        truncated,
    }
}

/// Inverse of [`tokenize`]. UNK tokens and invalid byte runs become U+FFFD.
pub fn detokenize(seq: &ByteTokenSeq) -> String {
    let mut out = String::new();
    let mut run: Vec<u8> = Vec::new();
    for &id in seq.ids() {
        match id {
            EOS => break,
            PAD => {}
            UNK => {
                out.push_str(&String::from_utf8_lossy(&run));
                run.clear();
                out.push(char::REPLACEMENT_CHARACTER);
            }
            b if (b as usize) < VOCAB_SIZE => run.push((b - BYTE_OFFSET) as u8),
            _ => {
                out.push_str(&String::from_utf8_lossy(&run));
                run.clear();
                out.push(char::REPLACEMENT_CHARACTER);
            }
        }
    }
    out.push_str(&String::from_utf8_lossy(&run));
    out
}
