use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// One coordinate per (prompt, response); every table is representable.
    OneHot,
    /// Shared Gaussian features of a fixed dimension.
    LowRank,
    Custom,
}

/// Feature vectors `φ(x, y)` of a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct FeatureMap<F> {
    dim: usize,
    kind: FeatureKind,
    phi: Vec<Vec<Vec<F>>>,
    /// For one-hot maps: the coordinate owned by `(x, y)`.
    offsets: Vec<usize>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn one_hot(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::input("feature shape needs nonempty prompts"));
        }
        let dim: usize = shape.iter().sum();
        let mut offsets = Vec::with_capacity(shape.len());
        let mut phi = Vec::with_capacity(shape.len());
        let mut off = 0;
        for &k in shape {
            offsets.push(off);
            let rows = (0..k)
                .map(|y| {
                    let mut v = vec![F::zero(); dim];
                    v[off + y] = F::one();
                    v
                })
                .collect();
            phi.push(rows);
            off += k;
        }
        Ok(Self {
            dim,
            kind: FeatureKind::OneHot,
            phi,
            offsets,
        })
    }

    /// Standard-normal features of dimension `dim`, scaled by `1/sqrt(dim)`.
    pub fn low_rank(shape: &[usize], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || shape.is_empty() || shape.contains(&0) {
            return Err(Error::input("low-rank features need dim >= 1"));
        }
        let mut rng = rng_from_seed(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let phi = shape
            .iter()
            .map(|&k| {
                (0..k)
                    .map(|_| {
                        (0..dim)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                cast(z * scale)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            kind: FeatureKind::LowRank,
            phi,
            offsets: Vec::new(),
        })
    }

    pub fn custom(phi: Vec<Vec<Vec<F>>>) -> Result<Self> {
        let dim = phi
            .first()
            .and_then(|r| r.first())
            .map(Vec::len)
            .ok_or_else(|| Error::input("custom features need at least one vector"))?;
        for (x, row) in phi.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::input(format!("prompt {x} has no responses")));
            }
            for v in row {
                if v.len() != dim {
                    return Err(Error::input("inconsistent feature dimension"));
                }
                if v.iter().any(|f| !f.is_finite()) {
                    return Err(Error::input("features must be finite"));
                }
            }
        }
        Ok(Self {
            dim,
            kind: FeatureKind::Custom,
            phi,
            offsets: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn shape(&self) -> Vec<usize> {
        self.phi.iter().map(Vec::len).collect()
    }

    pub fn prompt_count(&self) -> usize {
        self.phi.len()
    }

    pub fn phi(&self, x: usize, y: usize) -> Result<&[F]> {
        self.phi
            .get(x)
            .and_then(|r| r.get(y))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::input(format!("unknown (prompt, response) ({x}, {y})")))
    }

    /// Logits `θᵀφ(x, ·)` for one prompt.
    pub fn logits(&self, theta: &[F], x: usize) -> Result<Vec<F>> {
        let row = self
            .phi
            .get(x)
            .ok_or_else(|| Error::input(format!("unknown prompt {x}")))?;
        if self.kind == FeatureKind::OneHot {
            let off = self.offsets[x];
            return Ok(theta[off..off + row.len()].to_vec());
        }
        Ok(row
            .iter()
            .map(|v| v.iter().zip(theta).map(|(a, b)| *a * *b).sum())
            .collect())
    }

    /// Maps per-logit sensitivities `c[x][y]` to a parameter gradient
    /// `Σ c[x][y] φ(x, y)`.
    pub fn pull_back(&self, logit_grad: &[Vec<F>]) -> Vec<F> {
        let mut g = vec![F::zero(); self.dim];
        if self.kind == FeatureKind::OneHot {
            for (x, row) in logit_grad.iter().enumerate() {
                let off = self.offsets[x];
                for (y, c) in row.iter().enumerate() {
                    g[off + y] += *c;
                }
            }
            return g;
        }
        for (x, row) in logit_grad.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                if c == F::zero() {
                    continue;
                }
                for (gi, f) in g.iter_mut().zip(&self.phi[x][y]) {
                    *gi += c * *f;
                }
            }
        }
        g
    }
}
