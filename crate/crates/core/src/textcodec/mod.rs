//! UTF-8 byte tokenization and the byte-level text encoder.

mod encoder;
mod tokenizer;

pub use encoder::{TextEncoder, TextEncoderConfig, TextFeatures};
pub(crate) use encoder::sinusoid;
pub use tokenizer::{detokenize, tokenize, ByteTokenSeq, BYTE_OFFSET, EOS, PAD, UNK, VOCAB_SIZE};
