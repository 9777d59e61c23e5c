use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::IndexError;
use crate::store::MemoryStore;

/// Seeded linear map from `in_dim` to `out_dim` with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    in_dim: usize,
    out_dim: usize,
    /// `out_dim` rows of `in_dim` values.
    matrix: Vec<f32>,
    seed: u64,
}

impl Projection {
    /// `ceil(d / 9)`.
    pub fn default_out_dim(in_dim: usize) -> usize {
        in_dim.div_ceil(9)
    }

    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self, IndexError> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(IndexError::BadDim { in_dim, out_dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        while rows.len() < out_dim {
            let mut row: Vec<f64> = (0..in_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Gram-Schmidt, twice for numerical stability.
            for _ in 0..2 {
                for prev in &rows {
                    let proj: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                    row.iter_mut().zip(prev).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            row.iter_mut().for_each(|x| *x /= norm);
            rows.push(row);
        }
        let matrix = rows.into_iter().flatten().map(|x| x as f32).collect();
        Ok(Projection {
            in_dim,
            out_dim,
            matrix,
            seed,
        })
    }

    pub(crate) fn from_parts(
        in_dim: usize,
        out_dim: usize,
        matrix: Vec<f32>,
        seed: u64,
    ) -> Result<Self, IndexError> {
        if out_dim == 0 || out_dim > in_dim || matrix.len() != in_dim * out_dim {
            return Err(IndexError::BadDim { in_dim, out_dim });
        }
        Ok(Projection {
            in_dim,
            out_dim,
            matrix,
            seed,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// Projects `v` and rescales the result to unit length. A projection that
    /// lands on the origin is returned as the zero vector.
    pub fn apply(&self, v: &[f32]) -> Vec<f32> {
        debug_assert_eq!(v.len(), self.in_dim);
        let mut out: Vec<f64> = (0..self.out_dim)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            })
            .collect();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        out.into_iter().map(|x| x as f32).collect()
    }
}

/// Builds the reduction used ahead of graph construction. The map is
/// data-independent; the store only fixes the input dimension.
pub fn fit_projection(store: &MemoryStore, out_dim: usize, seed: u64) -> Result<Projection, IndexError> {
    Projection::random(store.dimension(), out_dim, seed)
}
