//! Ground truth by exact enumeration over `(x, y, y')` triples.

use serde::{Deserialize, Serialize};

use crate::ddpo::dpo_margin_loss;
use crate::error::{Error, Result};
use crate::policy::{closed_form_dpo_opt, closed_form_ipo_opt, expected_kl, Policy, PolicyTable};
use crate::scalar::{to_f64, Scalar};
use crate::world::{PrefTable, World};

/// Default cap on the number of `(x, y, y')` triples an oracle will enumerate.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretKind {
    /// Expected true reward against the KL-regularized reward optimum.
    DpoReward,
    /// Preference probability against the best response per prompt.
    IpoPref,
}

/// Gap in the KL-regularized objective the optimum actually maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizedGap {
    pub beta: f64,
    pub objective_opt: f64,
    pub objective_hat: f64,
    /// `objective_opt − objective_hat`, nonnegative up to rounding.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub value_opt: f64,
    pub value_hat: f64,
    /// `value_opt − value_hat`.
    pub regret: f64,
    pub kind: RegretKind,
    pub regularized: Option<RegularizedGap>,
}

/// Enumeration oracle over one world with an explicit triple budget.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a, F> {
    world: &'a World<F>,
    budget: usize,
}

fn sum_tolerance<F: Scalar>() -> f64 {
    (1e-12f64).max(64.0 * to_f64(F::epsilon()))
}

impl<'a, F: Scalar> Oracle<'a, F> {
    pub fn new(world: &'a World<F>) -> Self {
        Self {
            world,
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    pub fn with_budget(self, budget: usize) -> Self {
        Self { budget, ..self }
    }

    pub fn world(&self) -> &'a World<F> {
        self.world
    }

    fn check(&self) -> Result<()> {
        let needed = self.world.triple_count();
        if needed > self.budget {
            return Err(Error::Budget {
                needed,
                budget: self.budget,
            });
        }
        let mass: f64 = self.world.prompt_weights().iter().map(|w| to_f64(*w)).sum();
        if (mass - 1.0).abs() > sum_tolerance::<F>() {
            return Err(Error::domain(format!("prompt weights sum to {mass}")));
        }
        Ok(())
    }

    fn table<P: Policy<F> + ?Sized>(&self, policy: &P) -> Result<PolicyTable<F>> {
        if policy.shape() != self.world.shape() {
            return Err(Error::input("policy shape does not match world"));
        }
        let t = policy.table();
        for (x, row) in t.rows().iter().enumerate() {
            let s: f64 = row.iter().map(|p| to_f64(*p)).sum();
            if (s - 1.0).abs() > sum_tolerance::<F>() {
                return Err(Error::domain(format!("policy row {x} sums to {s}")));
            }
        }
        Ok(t)
    }

    /// `Σ_x p(x) Σ_{y,y'} π(y|x) π_ref(y'|x) g(y, y'|x)` with the given preference.
    pub fn pref_prob_under<P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
        &self,
        policy: &P,
        reference: &Q,
        pref: &PrefTable<F>,
    ) -> Result<F> {
        self.check()?;
        let pi = self.table(policy)?;
        let rf = self.table(reference)?;
        let mut total = F::zero();
        for (x, w) in self.world.prompt_weights().iter().enumerate() {
            total += *w * pref.prompt_value(x, pi.row(x)?, rf.row(x)?);
        }
        Ok(total)
    }

    /// `P(π ≻ π_ref)` under the true human preference.
    pub fn pref_prob<P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(&self, policy: &P, reference: &Q) -> Result<F> {
        self.pref_prob_under(policy, reference, &self.world.human_table())
    }

    /// Exact expected DPO loss over `x ~ D_X`, `(y1, y2) ~ π_Gen^AI`,
    /// `Z ~ Bernoulli(pref)`.
    pub fn population_dpo_loss_under<P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
        &self,
        policy: &P,
        reference: &Q,
        beta: F,
        pref: &PrefTable<F>,
    ) -> Result<F> {
        if !(beta > F::zero()) {
            return Err(Error::input(format!("beta must be positive, got {beta}")));
        }
        self.check()?;
        let pi = self.table(policy)?;
        let rf = self.table(reference)?;
        let gen = self.world.gen_ai();
        let mut total = F::zero();
        for (x, w) in self.world.prompt_weights().iter().enumerate() {
            let (lp, lr, gr) = (pi.log_row(x)?, rf.log_row(x)?, gen.row(x)?);
            let mut acc = F::zero();
            for (a, ga) in gr.iter().enumerate() {
                for (b, gb) in gr.iter().enumerate() {
                    let m = (lp[a] - lp[b]) - (lr[a] - lr[b]);
                    let g = pref.get(x, a, b);
                    let l = g * dpo_margin_loss(m, true, beta) + (F::one() - g) * dpo_margin_loss(m, false, beta);
                    acc += *ga * *gb * l;
                }
            }
            total += *w * acc;
        }
        Ok(total)
    }

    pub fn population_dpo_loss<P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
        &self,
        policy: &P,
        reference: &Q,
        beta: F,
    ) -> Result<F> {
        self.population_dpo_loss_under(policy, reference, beta, &self.world.human_table())
    }

    fn expected_reward(&self, pi: &PolicyTable<F>) -> Result<F> {
        let mut total = F::zero();
        for (x, w) in self.world.prompt_weights().iter().enumerate() {
            let mut v = F::zero();
            for (p, r) in pi.row(x)?.iter().zip(&self.world.reward().rows()[x]) {
                v += *p * *r;
            }
            total += *w * v;
        }
        Ok(total)
    }

    /// Expected true reward of `policy` against the `β`-regularized optimum.
    pub fn regret_dpo<P: Policy<F> + ?Sized>(
        &self,
        policy: &P,
        reference: &PolicyTable<F>,
        beta: F,
    ) -> Result<RegretReport> {
        self.check()?;
        let opt = closed_form_dpo_opt(self.world, reference, beta)?;
        let hat = self.table(policy)?;
        let rf = self.table(reference)?;
        let v_opt = self.expected_reward(&opt)?;
        let v_hat = self.expected_reward(&hat)?;
        let weights = self.world.prompt_weights();
        let j_opt = v_opt - beta * expected_kl(&opt, &rf, weights)?;
        let j_hat = v_hat - beta * expected_kl(&hat, &rf, weights)?;
        Ok(RegretReport {
            value_opt: to_f64(v_opt),
            value_hat: to_f64(v_hat),
            regret: to_f64(v_opt - v_hat),
            kind: RegretKind::DpoReward,
            regularized: Some(RegularizedGap {
                beta: to_f64(beta),
                objective_opt: to_f64(j_opt),
                objective_hat: to_f64(j_hat),
                gap: to_f64(j_opt - j_hat),
            }),
        })
    }

    /// `P(π ≻ π_ref)` against the unregularized maximum
    /// `Σ_x p(x) max_y E_{y'~π_ref} g(y, y'|x)`.
    pub fn regret_ipo<P: Policy<F> + ?Sized>(&self, policy: &P, reference: &PolicyTable<F>) -> Result<RegretReport> {
        self.check()?;
        let g = self.world.human_table();
        let rf = self.table(reference)?;
        let adv = g.advantage_against(&rf)?;
        let mut v_opt = F::zero();
        for (w, row) in self.world.prompt_weights().iter().zip(&adv) {
            let best = row.iter().copied().fold(F::neg_infinity(), F::max);
            v_opt += *w * best;
        }
        let v_hat = self.pref_prob_under(policy, &rf, &g)?;
        Ok(RegretReport {
            value_opt: to_f64(v_opt),
            value_hat: to_f64(v_hat),
            regret: to_f64(v_opt - v_hat),
            kind: RegretKind::IpoPref,
            regularized: None,
        })
    }

    /// [`Oracle::regret_ipo`] plus the gap in `P(π ≻ π_ref) − β KL(π ‖ π_ref)`
    /// against its exact maximizer.
    pub fn regret_ipo_regularized<P: Policy<F> + ?Sized>(
        &self,
        policy: &P,
        reference: &PolicyTable<F>,
        beta: F,
    ) -> Result<RegretReport> {
        let mut report = self.regret_ipo(policy, reference)?;
        let g = self.world.human_table();
        let opt = closed_form_ipo_opt(self.world, reference, beta, &g)?;
        let hat = self.table(policy)?;
        let weights = self.world.prompt_weights();
        let j_opt = self.pref_prob_under(&opt, reference, &g)? - beta * expected_kl(&opt, reference, weights)?;
        let j_hat = self.pref_prob_under(&hat, reference, &g)? - beta * expected_kl(&hat, reference, weights)?;
        report.regularized = Some(RegularizedGap {
            beta: to_f64(beta),
            objective_opt: to_f64(j_opt),
            objective_hat: to_f64(j_hat),
            gap: to_f64(j_opt - j_hat),
        });
        Ok(report)
    }
}

/// `P(π ≻ π_ref)` by full enumeration under the true human preference.
pub fn exact_pref_prob<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    world: &World<F>,
) -> Result<F> {
    Oracle::new(world).pref_prob(policy, reference)
}

/// [`exact_pref_prob`] for tabular policies.
pub fn exact_pref_prob_table<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    world: &World<F>,
) -> Result<F> {
    exact_pref_prob(policy, reference, world)
}

/// Population DPO loss with human labels.
pub fn exact_population_dpo_loss<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    world: &World<F>,
    beta: F,
) -> Result<F> {
    Oracle::new(world).population_dpo_loss(policy, reference, beta)
}

pub fn exact_regret_dpo<F: Scalar, P: Policy<F> + ?Sized>(
    policy: &P,
    world: &World<F>,
    beta: F,
    reference: &PolicyTable<F>,
) -> Result<RegretReport> {
    Oracle::new(world).regret_dpo(policy, reference, beta)
}

pub fn exact_regret_ipo<F: Scalar, P: Policy<F> + ?Sized>(
    policy: &P,
    world: &World<F>,
    reference: &PolicyTable<F>,
) -> Result<RegretReport> {
    Oracle::new(world).regret_ipo(policy, reference)
}

#[cfg(test)]
mod tests;
