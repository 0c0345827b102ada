//! One interface over the embedding methods: static word-vector tables,
//! FP32 contextual encoders, and the quantized student with its enhancer.

use rayon::prelude::*;

use crate::encoder::Encoder;
use crate::enhancer::EnhancerParams;
use crate::quant::QuantizedEncoder;
use crate::static_embed::{embed_events, EmbeddingTable, IdfModel};
use crate::wordpiece::Vocab;
use crate::{Embedding, Error, Result};

/// Events per encoder forward pass. Fixed so results never depend on the
/// worker count.
pub const ENCODE_BATCH: usize = 64;

/// Encodes `texts` in fixed-size batches, batches in parallel.
pub fn encode_in_batches(encoder: &Encoder, vocab: &Vocab, texts: &[&str]) -> Result<Vec<Embedding>> {
    let parts = texts
        .par_chunks(ENCODE_BATCH)
        .map(|chunk| encoder.embed_batch(vocab, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub enum Representation {
    Static {
        table: EmbeddingTable,
        idf: IdfModel,
    },
    Contextual {
        encoder: Encoder,
        vocab: Vocab,
    },
    Qtybert {
        student: QuantizedEncoder,
        vocab: Vocab,
        enhancer: Option<EnhancerParams>,
    },
}

impl Representation {
    pub fn dimension(&self) -> usize {
        match self {
            Self::Static { table, .. } => table.dimension,
            Self::Contextual { encoder, .. } => encoder.hidden_size(),
            Self::Qtybert { student, enhancer, .. } => {
                enhancer.as_ref().map_or(student.encoder.hidden_size(), |e| e.d_t)
            }
        }
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        match self {
            Self::Static { table, idf } => Ok(embed_events(texts, table, idf)),
            Self::Contextual { encoder, vocab } => encode_in_batches(encoder, vocab, texts),
            Self::Qtybert { student, vocab, enhancer } => {
                let hs = encode_in_batches(&student.encoder, vocab, texts)?;
                match enhancer {
                    Some(e) => {
                        if e.d_s != student.encoder.hidden_size() {
                            return Err(Error::Contract(format!(
                                "enhancer expects {}-dimensional student embeddings, student has {}",
                                e.d_s,
                                student.encoder.hidden_size()
                            )));
                        }
                        e.enhance_batch(&hs)
                    }
                    None => Ok(hs),
                }
            }
        }
    }
}
