//! Token representation providers.
//!
//! The toy encoder is trainable: token embedding plus absolute position
//! embedding, mixed over a one-token window on each side by a ReLU layer.
//! Precomputed vectors enter the graph as constants.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Standard deviation of embedding initialization.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    /// `[1, 3, d, d]` window kernel.
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    pub d_model: usize,
    pub max_len: usize,
}

impl ToyEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        d_model: usize,
        max_len: usize,
    ) -> Result<Self> {
        let tokens = store.add("encoder.tokens", init_normal(rng, &[vocab_size, d_model], EMBED_INIT_STD))?;
        let positions = store.add("encoder.positions", init_normal(rng, &[max_len, d_model], EMBED_INIT_STD))?;
        let fan_in = 3 * d_model;
        let mix_weight = store.add("encoder.mix.weight", init_uniform(rng, &[1, 3, d_model, d_model], fan_in))?;
        let mix_bias = store.add("encoder.mix.bias", init_uniform(rng, &[d_model], fan_in))?;
        Ok(Self {
            tokens,
            positions,
            mix_weight,
            mix_bias,
            d_model,
            max_len,
        })
    }

    /// `[n, d_model]` representations of the given token ids.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, token_ids: &[usize]) -> Result<Var> {
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::InvalidSentence("cannot encode an empty sentence".into()));
        }
        if n > self.max_len {
            return Err(Error::InvalidSentence(format!(
                "sentence of {n} tokens exceeds max_len {}",
                self.max_len
            )));
        }
        let tok_table = g.param(store, self.tokens);
        let pos_table = g.param(store, self.positions);
        let tok = g.embedding(tok_table, token_ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.reshape(x, &[1, n, self.d_model])?;
        let w = g.param(store, self.mix_weight);
        let b = g.param(store, self.mix_bias);
        let y = g.conv2d(x, w)?;
        let y = g.add_bias(y, b)?;
        let y = g.relu(y);
        g.reshape(y, &[n, self.d_model])
    }
}

/// Places precomputed `[n, d_model]` vectors on the tape as a constant.
pub fn encode_precomputed(g: &mut Graph, h: &Tensor, n_tokens: usize, d_model: usize) -> Result<Var> {
    if h.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "encode_precomputed",
            lhs: h.shape().to_vec(),
            rhs: alloc::vec![n_tokens, d_model],
        });
    }
    if h.shape()[0] != n_tokens {
        return Err(Error::CountMismatch {
            what: "token count",
            expected: n_tokens,
            actual: h.shape()[0],
        });
    }
    if h.shape()[1] != d_model {
        return Err(Error::CountMismatch {
            what: "embedding dim",
            expected: d_model,
            actual: h.shape()[1],
        });
    }
    if !h.is_finite() {
        return Err(Error::InvalidArgument {
            op: "encode_precomputed",
            msg: "non-finite embedding value".into(),
        });
    }
    Ok(g.constant(h.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(d: usize) -> (ParamStore, ToyEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ToyEncoder::new(&mut store, &mut rng, 5, d, 16).unwrap();
        (store, enc)
    }

    #[test]
    fn positions_distinguish_repeated_tokens() {
        let (store, enc) = encoder(8);
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &store, &[2, 3, 3, 3, 3, 2]).unwrap();
        let t = g.value(h);
        assert_eq!(t.shape(), &[6, 8]);
        assert_ne!(t.row(0), t.row(5));
    }

    #[test]
    fn single_token_sentence() {
        let (store, enc) = encoder(8);
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &store, &[1]).unwrap();
        assert_eq!(g.shape(h), &[1, 8]);
    }

    #[test]
    fn empty_and_overlong_rejected() {
        let (store, enc) = encoder(4);
        let mut g = Graph::new();
        assert!(enc.encode(&mut g, &store, &[]).is_err());
        assert!(enc.encode(&mut g, &store, &[1; 17]).is_err());
    }

    #[test]
    fn precomputed_is_constant_and_checked() {
        let mut g = Graph::new();
        let h = Tensor::from_fn(&[4, 16], |i| i as f64);
        let v = encode_precomputed(&mut g, &h, 4, 16).unwrap();
        assert!(!g.requires_grad(v));
        assert_eq!(g.shape(v), &[4, 16]);
        assert_eq!(
            encode_precomputed(&mut g, &h, 5, 16).unwrap_err(),
            Error::CountMismatch {
                what: "token count",
                expected: 5,
                actual: 4
            }
        );
    }
}
