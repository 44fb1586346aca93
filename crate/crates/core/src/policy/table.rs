use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_softmax, Scalar};

/// Per-prompt probability vectors over a finite response set.
///
/// Log-probabilities are cached alongside the probabilities; a zero entry has
/// log-probability `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct PolicyTable<F> {
    probs: Vec<Vec<F>>,
    log_probs: Vec<Vec<F>>,
}

impl<F: Scalar> PolicyTable<F> {
    /// Builds a table from explicit probabilities, checking every row is a
    /// probability vector.
    pub fn from_probs(rows: Vec<Vec<F>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("policy table needs at least one prompt"));
        }
        let tol = F::normalization_tol();
        for (x, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::input(format!("prompt {x} has no responses")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < F::zero()) {
                return Err(Error::input(format!(
                    "prompt {x}: probabilities must be finite and nonnegative"
                )));
            }
            let total: F = row.iter().copied().sum();
            if (total - F::one()).abs() > tol {
                return Err(Error::input(format!(
                    "prompt {x}: probabilities sum to {total}, not 1"
                )));
            }
        }
        let log_probs = rows
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect();
        Ok(Self {
            probs: rows,
            log_probs,
        })
    }

    /// Softmax of each row of logits.
    pub fn from_logits(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
            return Err(Error::input("logit rows must be nonempty"));
        }
        if rows.iter().flatten().any(|l| l.is_nan() || *l == F::infinity()) {
            return Err(Error::input("logits must be finite or -inf"));
        }
        if rows
            .iter()
            .any(|r| r.iter().all(|l| *l == F::neg_infinity()))
        {
            return Err(Error::input("every prompt needs a response with finite logit"));
        }
        let log_probs: Vec<Vec<F>> = rows.iter().map(|r| log_softmax(r)).collect();
        let probs = log_probs
            .iter()
            .map(|r| r.iter().map(|l| l.exp()).collect())
            .collect();
        Ok(Self { probs, log_probs })
    }

    pub fn uniform(shape: &[usize]) -> Result<Self> {
        let rows = shape
            .iter()
            .map(|&k| vec![F::zero(); k])
            .collect::<Vec<_>>();
        Self::from_logits(&rows)
    }

    /// `p^exponent`, renormalized per prompt.
    pub fn tempered(&self, exponent: F) -> Self {
        let rows: Vec<Vec<F>> = self
            .log_probs
            .iter()
            .map(|r| r.iter().map(|&l| l * exponent).collect())
            .collect();
        Self::from_logits(&rows).expect("tempering preserves finiteness")
    }

    pub fn prompt_count(&self) -> usize {
        self.probs.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.probs.iter().map(Vec::len).collect()
    }

    pub fn row(&self, x: usize) -> Result<&[F]> {
        self.probs
            .get(x)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::input(format!("unknown prompt {x}")))
    }

    pub fn log_row(&self, x: usize) -> Result<&[F]> {
        self.log_probs
            .get(x)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::input(format!("unknown prompt {x}")))
    }

    pub fn prob(&self, x: usize, y: usize) -> Result<F> {
        self.row(x)?
            .get(y)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown response {y} for prompt {x}")))
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<F> {
        self.log_row(x)?
            .get(y)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown response {y} for prompt {x}")))
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.probs
    }

    pub fn log_rows(&self) -> &[Vec<F>] {
        &self.log_probs
    }

    pub fn min_prob(&self) -> F {
        self.probs
            .iter()
            .flatten()
            .copied()
            .fold(F::infinity(), F::min)
    }

    /// Overlap requirement for generation policies: every entry `>= floor > 0`.
    pub fn check_floor(&self, floor: F) -> Result<()> {
        let m = self.min_prob();
        if m < floor || m <= F::zero() {
            return Err(Error::domain(format!(
                "generation policy mass {m} below floor {floor}"
            )));
        }
        Ok(())
    }

    /// Total-variation distance per prompt.
    pub fn tv_per_prompt(&self, other: &Self) -> Result<Vec<F>> {
        if self.shape() != other.shape() {
            return Err(Error::input("policy tables have different shapes"));
        }
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| {
                a.iter().zip(b).map(|(p, q)| (*p - *q).abs()).sum::<F>() * crate::scalar::half()
            })
            .collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        if self.shape() != other.shape() {
            return Err(Error::input("policy tables have different shapes"));
        }
        Ok(self
            .probs
            .iter()
            .flatten()
            .zip(other.probs.iter().flatten())
            .map(|(p, q)| (*p - *q).abs())
            .fold(F::zero(), F::max))
    }

    /// Writes `prompt,response,prob` records with a header row.
    pub fn write_records<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["prompt", "response", "prob"])?;
        for (x, row) in self.probs.iter().enumerate() {
            for (y, p) in row.iter().enumerate() {
                w.write_record([x.to_string(), y.to_string(), p.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    /// Reads records written by [`PolicyTable::write_records`]. Rows must be
    /// dense and in order.
    pub fn read_records<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows: Vec<Vec<F>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Parse("expected prompt,response,prob".into()));
            }
            let x: usize = parse_field(&rec[0])?;
            let y: usize = parse_field(&rec[1])?;
            let p: F = parse_field(&rec[2])?;
            if x == rows.len() {
                rows.push(Vec::new());
            }
            if x + 1 != rows.len() || y != rows[x].len() {
                return Err(Error::Parse(format!(
                    "policy record ({x},{y}) out of order"
                )));
            }
            rows[x].push(p);
        }
        Self::from_probs(rows)
    }
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse field {s:?}")))
}
