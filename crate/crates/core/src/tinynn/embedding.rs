use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learned lookup table: one `dim`-wide row per discrete category.
///
/// Equivalent to a bias-free linear layer applied to a one-hot input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    params: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            params: vec![0.0; rows * dim],
        }
    }

    /// Rows drawn uniformly from `±1/sqrt(dim)`.
    pub fn new<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let params = (0..rows * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        EmbeddingTable { rows, dim, params }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn lookup(&self, row: usize) -> Result<&[f64]> {
        if row >= self.rows {
            return Err(Error::UnknownClass {
                class_id: row,
                classes: self.rows,
            });
        }
        Ok(&self.params[row * self.dim..(row + 1) * self.dim])
    }

    /// Adds `grad` (dL/d row) into the flat gradient buffer `grads`.
    pub fn accumulate_grad(&self, row: usize, grad: &[f64], grads: &mut [f64]) -> Result<()> {
        if row >= self.rows {
            return Err(Error::UnknownClass {
                class_id: row,
                classes: self.rows,
            });
        }
        if grad.len() != self.dim {
            return Err(Error::WidthMismatch {
                expected: self.dim,
                got: grad.len(),
            });
        }
        for (g, d) in grads[row * self.dim..(row + 1) * self.dim].iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_row_rejected() {
        let t = EmbeddingTable::zeros(3, 8);
        assert!(t.lookup(2).is_ok());
        assert!(matches!(t.lookup(3), Err(Error::UnknownClass { .. })));
    }

    #[test]
    fn gradient_lands_on_its_row_only() {
        let t = EmbeddingTable::zeros(3, 2);
        let mut g = vec![0.0; 6];
        t.accumulate_grad(1, &[1.0, -2.0], &mut g).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 1.0, -2.0, 0.0, 0.0]);
    }
}
