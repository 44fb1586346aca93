//! Policies over finite response sets: tabular and log-linear softmax
//! policies, exact KL divergences, and the closed-form KL-regularized optima
//! used as oracles.
//!
//! The per-prompt normalizer of the reward–policy relation is never stored:
//! every loss is written in terms of log-probability differences, in which it
//! cancels.

mod features;
mod loglinear;
mod table;

pub use features::{FeatureKind, FeatureMap};
pub use loglinear::LogLinearPolicy;
pub use table::PolicyTable;
pub(crate) use table::parse_field as table_parse_field;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::world::{PrefTable, World};

/// A conditional distribution over responses for each prompt.
pub trait Policy<F: Scalar> {
    /// Number of responses per prompt.
    fn shape(&self) -> Vec<usize>;

    /// Normalized log-probabilities for prompt `x`.
    fn log_probs(&self, x: usize) -> Result<Vec<F>>;

    fn log_prob(&self, x: usize, y: usize) -> Result<F> {
        self.log_probs(x)?
            .get(y)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown response {y} for prompt {x}")))
    }

    fn probs(&self, x: usize) -> Result<Vec<F>> {
        Ok(self.log_probs(x)?.into_iter().map(F::exp).collect())
    }

    /// Materializes all rows.
    fn table(&self) -> PolicyTable<F>;
}

impl<F: Scalar> Policy<F> for PolicyTable<F> {
    fn shape(&self) -> Vec<usize> {
        PolicyTable::shape(self)
    }

    fn log_probs(&self, x: usize) -> Result<Vec<F>> {
        Ok(self.log_row(x)?.to_vec())
    }

    fn log_prob(&self, x: usize, y: usize) -> Result<F> {
        PolicyTable::log_prob(self, x, y)
    }

    fn table(&self) -> PolicyTable<F> {
        self.clone()
    }
}

/// `log π(y|x)`.
pub fn log_prob<F: Scalar, P: Policy<F> + ?Sized>(policy: &P, x: usize, y: usize) -> Result<F> {
    policy.log_prob(x, y)
}

/// `Δ_π(x; y1, y2) = log π(y1|x) − log π(y2|x)`.
pub fn delta_pi<F: Scalar, P: Policy<F> + ?Sized>(
    policy: &P,
    x: usize,
    y1: usize,
    y2: usize,
) -> Result<F> {
    if y1 == y2 {
        policy.log_prob(x, y1)?;
        return Ok(F::zero());
    }
    let lp = policy.log_probs(x)?;
    let a = lp
        .get(y1)
        .ok_or_else(|| Error::input(format!("unknown response {y1}")))?;
    let b = lp
        .get(y2)
        .ok_or_else(|| Error::input(format!("unknown response {y2}")))?;
    Ok(*a - *b)
}

fn kl_row<F: Scalar>(p: &[F], log_p: &[F], log_q: &[F], x: usize) -> Result<F> {
    let mut kl = F::zero();
    for ((pi, lp), lq) in p.iter().zip(log_p).zip(log_q) {
        if *pi == F::zero() {
            continue;
        }
        if *lq == F::neg_infinity() {
            return Err(Error::domain(format!(
                "reference has zero mass on a supported response of prompt {x}"
            )));
        }
        kl += *pi * (*lp - *lq);
    }
    Ok(kl.max(F::zero()))
}

/// Exact `KL(π(·|x) ‖ π_ref(·|x))` in nats.
pub fn kl_to_ref<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    x: usize,
) -> Result<F> {
    let lp = policy.log_probs(x)?;
    let lq = reference.log_probs(x)?;
    if lp.len() != lq.len() {
        return Err(Error::input("policy and reference have different response sets"));
    }
    let p: Vec<F> = lp.iter().map(|l| l.exp()).collect();
    kl_row(&p, &lp, &lq, x)
}

/// `E_{x~D_X} KL(π(·|x) ‖ π_ref(·|x))`.
pub fn expected_kl<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    prompt_weights: &[F],
) -> Result<F> {
    let mut total = F::zero();
    for (x, w) in prompt_weights.iter().enumerate() {
        total += *w * kl_row(policy.row(x)?, policy.log_row(x)?, reference.log_row(x)?, x)?;
    }
    Ok(total)
}

/// `π(y|x) ∝ π_ref(y|x) · exp(score(x, y) / β)`.
pub fn exponential_tilt<F: Scalar>(
    reference: &PolicyTable<F>,
    scores: &[Vec<F>],
    beta: F,
) -> Result<PolicyTable<F>> {
    if !(beta > F::zero()) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    if scores.len() != reference.prompt_count() {
        return Err(Error::input("score table and reference differ in prompt count"));
    }
    let logits: Vec<Vec<F>> = reference
        .log_rows()
        .iter()
        .zip(scores)
        .map(|(lr, s)| lr.iter().zip(s).map(|(l, v)| *l + *v / beta).collect())
        .collect();
    PolicyTable::from_logits(&logits)
}

/// Optimum of `E_π r* − β KL(π ‖ π_ref)`: `π*(y|x) ∝ π_ref(y|x) exp(r*(x,y)/β)`.
pub fn closed_form_dpo_opt<F: Scalar>(
    world: &World<F>,
    reference: &PolicyTable<F>,
    beta: F,
) -> Result<PolicyTable<F>> {
    if reference.shape() != world.shape() {
        return Err(Error::input("reference shape does not match world"));
    }
    exponential_tilt(reference, world.reward().rows(), beta)
}

/// Optimum of `P(π ≻ π_ref) − β KL(π ‖ π_ref)` under preference `pref`:
/// `π*(y|x) ∝ π_ref(y|x) exp(β⁻¹ E_{y'~π_ref} pref(y, y'|x))`.
pub fn closed_form_ipo_opt<F: Scalar>(
    world: &World<F>,
    reference: &PolicyTable<F>,
    beta: F,
    pref: &PrefTable<F>,
) -> Result<PolicyTable<F>> {
    if reference.shape() != world.shape() || pref.shape() != world.shape() {
        return Err(Error::input("reference or preference shape does not match world"));
    }
    let adv = pref.advantage_against(reference)?;
    exponential_tilt(reference, &adv, beta)
}
