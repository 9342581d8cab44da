use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::Matrix;
use crate::error::{Error, Result};

/// Frozen token embeddings with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingTable {
    vocabulary_size: usize,
    dimension: usize,
    vectors: Vec<f64>,
}

impl TokenEmbeddingTable {
    pub fn new(vocabulary_size: usize, dimension: usize, vectors: Vec<f64>) -> Result<Self> {
        if vocabulary_size == 0 || dimension == 0 {
            return Err(Error::Shape("embedding table dimensions must be positive".into()));
        }
        if vectors.len() != vocabulary_size * dimension {
            return Err(Error::Shape(format!(
                "{vocabulary_size}x{dimension} table needs {} values, got {}",
                vocabulary_size * dimension,
                vectors.len()
            )));
        }
        for (r, row) in vectors.chunks(dimension).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("embedding row {r} has norm {norm}")));
            }
        }
        Ok(Self { vocabulary_size, dimension, vectors })
    }

    /// Gaussian directions normalized to unit length.
    pub fn random(vocabulary_size: usize, dimension: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(vocabulary_size * dimension);
        for _ in 0..vocabulary_size {
            let row: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            vectors.extend(row.iter().map(|v| v / norm));
        }
        Self::new(vocabulary_size, dimension, vectors)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary_size
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.vectors[token * self.dimension..(token + 1) * self.dimension]
    }

    /// Rows for a token sequence, one per position.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(tokens.len() * self.dimension);
        for &t in tokens {
            if t >= self.vocabulary_size {
                return Err(Error::Index(format!(
                    "token id {t} outside vocabulary of {}",
                    self.vocabulary_size
                )));
            }
            data.extend_from_slice(self.row(t));
        }
        Matrix::new(tokens.len(), self.dimension, data)
    }
}
