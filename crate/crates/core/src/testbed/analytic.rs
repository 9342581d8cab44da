//! Training-free attention field used as the gradient oracle testbed.
//!
//! Every spatial location's channel vector is scored against the active
//! token embeddings: `score[p, l] = <z[:, p], e_l> * scale`, softmax over `l`.

use crate::attention::{cross_attention_scaled, cross_attention_scaled_vjp, AttentionStack, Matrix};
use crate::error::{Error, Result};
use crate::nursing::{AttentionField, Latent};
use crate::testbed::embedding::TokenEmbeddingTable;

#[derive(Debug, Clone)]
pub struct AnalyticAttention {
    tokens: Matrix,
    scale: f64,
}

pub struct AnalyticTape {
    spatial: Matrix,
    stack: AttentionStack,
    shape: (usize, usize, usize),
}

impl AnalyticAttention {
    /// Field over `active_tokens` with the usual `1 / sqrt(d)` score scale.
    pub fn new(table: &TokenEmbeddingTable, active_tokens: &[usize]) -> Result<Self> {
        Self::with_scale(table, active_tokens, 1.0 / (table.dimension() as f64).sqrt())
    }

    pub fn with_scale(table: &TokenEmbeddingTable, active_tokens: &[usize], scale: f64) -> Result<Self> {
        if active_tokens.is_empty() {
            return Err(Error::Parameter("analytic attention needs at least one active token".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("score scale must be positive, got {scale}")));
        }
        Ok(Self { tokens: table.lookup(active_tokens)?, scale })
    }

    fn spatial_features(&self, z: &Latent) -> Result<Matrix> {
        let (c, h, w) = z.shape();
        if c != self.tokens.cols {
            return Err(Error::Shape(format!(
                "latent has {c} channels but embeddings have dimension {}",
                self.tokens.cols
            )));
        }
        let n = h * w;
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for (p, v) in z.channel(ch).iter().enumerate() {
                data[p * c + ch] = *v;
            }
        }
        Matrix::new(n, c, data)
    }
}

impl AttentionField for AnalyticAttention {
    type Tape = AnalyticTape;

    fn token_count(&self) -> usize {
        self.tokens.rows
    }

    fn forward(&self, z: &Latent) -> Result<(AttentionStack, AnalyticTape)> {
        let spatial = self.spatial_features(z)?;
        let (_, h, w) = z.shape();
        let stack = cross_attention_scaled(&self.tokens, &spatial, self.scale, self.tokens.cols, h, w)?;
        Ok((stack.clone(), AnalyticTape { spatial, stack, shape: z.shape() }))
    }

    fn backward(&self, tape: &AnalyticTape, grad_stack: &[f64]) -> Result<Vec<f64>> {
        if grad_stack.len() != tape.stack.values().len() {
            return Err(Error::Shape("gradient does not match the attention stack".into()));
        }
        let (_, g_sp) = cross_attention_scaled_vjp(&tape.stack, &self.tokens, &tape.spatial, self.scale, grad_stack);
        let (c, h, w) = tape.shape;
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = g_sp.data[p * c + ch];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latent_is_uniform() {
        let table = TokenEmbeddingTable::random(5, 4, 1).unwrap();
        let field = AnalyticAttention::new(&table, &[0, 1, 2, 3]).unwrap();
        let stack = field.attention(&Latent::zeros(4, 3, 3)).unwrap();
        assert!(stack.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_token_is_all_ones() {
        let table = TokenEmbeddingTable::random(5, 4, 1).unwrap();
        let field = AnalyticAttention::new(&table, &[3]).unwrap();
        let stack = field.attention(&Latent::standard_normal(4, 3, 2, 9)).unwrap();
        assert!(stack.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn orthogonal_tokens_unit_scale() {
        let table = TokenEmbeddingTable::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let field = AnalyticAttention::with_scale(&table, &[0, 1], 1.0).unwrap();
        let z = Latent::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let stack = field.attention(&z).unwrap();
        let e = 1f64.exp();
        assert!((stack.get(0, 0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((stack.get(0, 0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_tokens_rejected() {
        let table = TokenEmbeddingTable::random(5, 4, 1).unwrap();
        assert!(matches!(AnalyticAttention::new(&table, &[]), Err(Error::Parameter(_))));
    }
}
