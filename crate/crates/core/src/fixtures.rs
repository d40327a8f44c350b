//! Shape-faithful BERT-style checkpoints for tests and demos.

use crate::encoder::names;
use crate::tensorstore::{Checkpoint, DType};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BertDims {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_positions: usize,
    pub token_types: usize,
    pub num_layers: usize,
}

impl BertDims {
    /// bert-base-uncased dimensions.
    pub fn base() -> Self {
        Self {
            vocab_size: 30522,
            hidden: 768,
            heads: 12,
            ff: 3072,
            max_positions: 512,
            token_types: 2,
            num_layers: 12,
        }
    }
}

/// Zero-valued checkpoint with BERT tensor names and shapes, including the
/// pooler. Buffers come from zeroed allocations, so a full bert-base fixture
/// costs almost no resident memory until its bytes are touched.
pub fn bert_shaped(dims: &BertDims, dtype: DType) -> Checkpoint {
    let (d, f) = (dims.hidden, dims.ff);
    let mut c = Checkpoint::new();
    let mut put = |name: String, shape: Vec<usize>| {
        c.insert_zeros(name, dtype, shape)
            .expect("fixture names are unique");
    };
    let emb = |s: &str| format!("embeddings.{s}");
    put(emb(names::WORD_EMBEDDINGS), vec![dims.vocab_size, d]);
    put(emb(names::POSITION_EMBEDDINGS), vec![dims.max_positions, d]);
    if dims.token_types > 0 {
        put(emb(names::TOKEN_TYPE_EMBEDDINGS), vec![dims.token_types, d]);
    }
    put(emb(names::EMB_LN_WEIGHT), vec![d]);
    put(emb(names::EMB_LN_BIAS), vec![d]);
    for i in 0..dims.num_layers {
        for (suffix, shape) in names::layer_shapes(d, f) {
            put(format!("encoder.layer.{i}.{suffix}"), shape);
        }
    }
    put("pooler.dense.weight".into(), vec![d, d]);
    put("pooler.dense.bias".into(), vec![d]);
    c
}
