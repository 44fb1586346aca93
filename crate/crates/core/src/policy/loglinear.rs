use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{FeatureKind, FeatureMap};
use super::table::{parse_field, PolicyTable};
use super::Policy;
use crate::error::{Error, Result};
use crate::scalar::{cast, log_softmax, Scalar};

/// Softmax policy `π_θ(y|x) ∝ exp(θᵀφ(x, y))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct LogLinearPolicy<F> {
    theta: Vec<F>,
    features: Arc<FeatureMap<F>>,
}

impl<F: Scalar> LogLinearPolicy<F> {
    pub fn new(theta: Vec<F>, features: Arc<FeatureMap<F>>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(Error::input(format!(
                "theta has length {} but features have dimension {}",
                theta.len(),
                features.dim()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::input("theta must be finite"));
        }
        Ok(Self { theta, features })
    }

    pub fn zeros(features: Arc<FeatureMap<F>>) -> Self {
        let theta = vec![F::zero(); features.dim()];
        Self { theta, features }
    }

    /// Parameters whose policy matches `table` as closely as the feature map
    /// allows.
    ///
    /// One-hot maps reproduce the table exactly (θ = log p). Other maps run
    /// gradient descent on the cross-entropy `-Σ_x Σ_y p(y|x) log π_θ(y|x)`,
    /// which is convex in θ.
    pub fn fit_to_table(features: Arc<FeatureMap<F>>, table: &PolicyTable<F>) -> Result<Self> {
        if features.shape() != table.shape() {
            return Err(Error::input("feature map and table shapes differ"));
        }
        if features.kind() == FeatureKind::OneHot {
            let mut theta = Vec::with_capacity(features.dim());
            for row in table.log_rows() {
                for &l in row {
                    if !l.is_finite() {
                        return Err(Error::domain(
                            "cannot represent zero-probability response with finite θ",
                        ));
                    }
                    theta.push(l);
                }
            }
            return Self::new(theta, features);
        }
        let mut policy = Self::zeros(features);
        let lr: F = cast(2.0);
        let prompts: F = crate::scalar::from_usize(table.prompt_count());
        for _ in 0..4000 {
            let current = policy.table();
            let grad_logits: Vec<Vec<F>> = current
                .rows()
                .iter()
                .zip(table.rows())
                .map(|(pi, target)| {
                    pi.iter()
                        .zip(target)
                        .map(|(p, q)| (*q - *p) / prompts)
                        .collect()
                })
                .collect();
            let g = policy.features.pull_back(&grad_logits);
            let norm: F = g.iter().map(|v| *v * *v).sum::<F>().sqrt();
            for (t, gi) in policy.theta.iter_mut().zip(&g) {
                *t += lr * *gi;
            }
            if norm < cast(1e-12) {
                break;
            }
        }
        Ok(policy)
    }

    pub fn theta(&self) -> &[F] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [F] {
        &mut self.theta
    }

    pub fn features(&self) -> &Arc<FeatureMap<F>> {
        &self.features
    }

    pub fn with_theta(&self, theta: Vec<F>) -> Result<Self> {
        Self::new(theta, Arc::clone(&self.features))
    }

    /// Exact `∇_θ log π_θ(y|x) = φ(x, y) − E_{y'~π_θ(·|x)} φ(x, y')`.
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Result<Vec<F>> {
        let lp = self.log_probs(x)?;
        if y >= lp.len() {
            return Err(Error::input(format!("unknown response {y} for prompt {x}")));
        }
        let mut g = self.features.phi(x, y)?.to_vec();
        for (yp, l) in lp.iter().enumerate() {
            let p = l.exp();
            for (gi, f) in g.iter_mut().zip(self.features.phi(x, yp)?) {
                *gi -= p * *f;
            }
        }
        Ok(g)
    }

    /// Writes θ as one number per line.
    pub fn write_theta<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.theta {
            writeln!(out, "{t}").map_err(|e| Error::Parse(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_theta<R: BufRead>(input: R) -> Result<Vec<F>> {
        let mut theta = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            theta.push(parse_field(&line)?);
        }
        Ok(theta)
    }
}

impl<F: Scalar> Policy<F> for LogLinearPolicy<F> {
    fn shape(&self) -> Vec<usize> {
        self.features.shape()
    }

    fn log_probs(&self, x: usize) -> Result<Vec<F>> {
        Ok(log_softmax(&self.features.logits(&self.theta, x)?))
    }

    fn table(&self) -> PolicyTable<F> {
        let rows: Vec<Vec<F>> = (0..self.features.prompt_count())
            .map(|x| self.features.logits(&self.theta, x).expect("valid prompt"))
            .collect();
        PolicyTable::from_logits(&rows).expect("finite logits")
    }
}
