//! Preference-probability estimators (direct, bias-corrected, human-augmented),
//! the sampled IPO loss, and the gradient-ascent DIPO trainer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddpo::{GenHumEstimate, LabelField, TrainConfig};
use crate::error::{Error, Result};
use crate::policy::{LogLinearPolicy, Policy, PolicyTable};
use crate::rng::{cdf_of, derive_seed, rng_from_seed, sample_cdf, StdRng};
use crate::scalar::{cast, from_usize, half, to_f64, Scalar};
use crate::world::{mc_judge_label_with, PreferencePair, World};

/// Importance-ratio clipping range `[c_min, c_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ClipBounds<F> {
    pub c_min: F,
    pub c_max: F,
}

impl<F: Scalar> ClipBounds<F> {
    pub fn new(c_min: F, c_max: F) -> Result<Self> {
        if !(c_min > F::zero() && c_min <= c_max && c_max.is_finite()) {
            return Err(Error::input(format!(
                "clip bounds need 0 < c_min <= c_max, got [{c_min}, {c_max}]"
            )));
        }
        Ok(Self { c_min, c_max })
    }

    /// `[0.1, 10]`.
    pub fn standard() -> Self {
        Self {
            c_min: cast(0.1),
            c_max: cast(10.0),
        }
    }

    /// Bounds that never bind.
    pub fn none() -> Self {
        Self {
            c_min: F::min_positive_value(),
            c_max: F::max_value(),
        }
    }

    fn active(&self, v: F) -> bool {
        v < self.c_min || v > self.c_max
    }
}

/// `min(max(value, c_min), c_max)`.
pub fn clip_ratio<F: Scalar>(value: F, bounds: &ClipBounds<F>) -> Result<F> {
    if !(value > F::zero()) {
        return Err(Error::input(format!("ratio must be positive, got {value}")));
    }
    Ok(value.max(bounds.c_min).min(bounds.c_max))
}

/// How judge preferences enter the direct term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JudgeBackend {
    /// Exact probabilities `g̃`.
    Scores,
    /// Mean of `m` Bernoulli(`g̃`) labels.
    MonteCarlo { m: usize },
}

/// What plays the role of `Ẑ` in the bias estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// The recorded binary judge label.
    Labels,
    /// The judge probability `g̃(x, y1, y2)` on the record.
    JudgeScores,
}

/// Human generation policy used in the ratios.
#[derive(Debug, Clone, Copy)]
pub enum GenHum<'a, F> {
    Table(&'a PolicyTable<F>),
    /// Cross-fitted estimate; record `i` uses the fold fitted without it.
    CrossFit(&'a GenHumEstimate<F>),
}

impl<'a, F: Scalar> GenHum<'a, F> {
    pub fn table_for(&self, i: usize) -> &'a PolicyTable<F> {
        match self {
            GenHum::Table(t) => t,
            GenHum::CrossFit(e) => e.table_for(i),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if let GenHum::CrossFit(e) = self {
            if e.assignment.len() != n {
                return Err(Error::input("cross-fitted estimate built on a different record set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EstimatorReport {
    pub estimate: f64,
    pub direct_term: f64,
    pub bias_term: f64,
    pub n_used: usize,
    pub N_used: usize,
    pub clipped_fraction: f64,
}

/// One direct-term draw: `Y ~ π(·|x)`, `Y1, Y2 ~ π_ref(·|x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectDraw {
    pub x: usize,
    pub y: usize,
    pub y1: usize,
    pub y2: usize,
}

/// `count` prompts from `D_X`.
pub fn sample_prompts<F: Scalar, R: Rng + ?Sized>(world: &World<F>, count: usize, rng: &mut R) -> Vec<usize> {
    let cdf = cdf_of(world.prompt_weights());
    (0..count).map(|_| sample_cdf(&cdf, rng)).collect()
}

pub fn draw_direct<F: Scalar, R: Rng + ?Sized>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    prompts: &[usize],
    rng: &mut R,
) -> Result<Vec<DirectDraw>> {
    let pc: Vec<Vec<f64>> = policy.rows().iter().map(|r| cdf_of(r)).collect();
    let rc: Vec<Vec<f64>> = reference.rows().iter().map(|r| cdf_of(r)).collect();
    prompts
        .iter()
        .map(|&x| {
            if x >= pc.len() || x >= rc.len() {
                return Err(Error::input(format!("unknown prompt {x}")));
            }
            Ok(DirectDraw {
                x,
                y: sample_cdf(&pc[x], rng),
                y1: sample_cdf(&rc[x], rng),
                y2: sample_cdf(&rc[x], rng),
            })
        })
        .collect()
}

/// `½[ĝ(Y, Y1) + ĝ(Y, Y2)]` per draw under the chosen backend.
fn direct_values<F: Scalar>(
    world: &World<F>,
    draws: &[DirectDraw],
    backend: JudgeBackend,
    rng: &mut StdRng,
) -> Result<Vec<F>> {
    draws
        .iter()
        .map(|d| {
            let (a, b) = match backend {
                JudgeBackend::Scores => (
                    world.judge_pref_prob(d.x, d.y, d.y1)?,
                    world.judge_pref_prob(d.x, d.y, d.y2)?,
                ),
                JudgeBackend::MonteCarlo { m } => (
                    mc_judge_label_with(world, d.x, d.y, d.y1, m, rng)?,
                    mc_judge_label_with(world, d.x, d.y, d.y2, m, rng)?,
                ),
            };
            Ok((a + b) * half())
        })
        .collect()
}

/// Direct estimate of `P(π ≻ π_ref)` from judge preferences on fresh draws.
pub fn p_dm_from_draws<F: Scalar>(
    world: &World<F>,
    draws: &[DirectDraw],
    backend: JudgeBackend,
    seed: u64,
) -> Result<EstimatorReport> {
    if draws.is_empty() {
        return Err(Error::input("direct estimator needs a nonempty prompt sample"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 20));
    let vals = direct_values(world, draws, backend, &mut rng)?;
    let dm = to_f64(vals.iter().copied().sum::<F>() / from_usize(vals.len()));
    Ok(EstimatorReport {
        estimate: dm,
        direct_term: dm,
        bias_term: 0.0,
        n_used: 0,
        N_used: draws.len(),
        clipped_fraction: 0.0,
    })
}

/// `P_DM`: draws `Y ~ π`, `Y1, Y2 ~ π_ref` for each prompt in `prompts`.
pub fn p_dm<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    world: &World<F>,
    prompts: &[usize],
    backend: JudgeBackend,
    seed: u64,
) -> Result<EstimatorReport> {
    if prompts.is_empty() {
        return Err(Error::input("direct estimator needs a nonempty prompt sample"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 21));
    let draws = draw_direct(policy, reference, prompts, &mut rng)?;
    p_dm_from_draws(world, &draws, backend, seed)
}

/// Cross ratios `(w1, w2) = (π(y1)π_ref(y2), π(y2)π_ref(y1)) / (g(y1)g(y2))`.
fn cross_ratios<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: &PolicyTable<F>,
    p: &PreferencePair,
) -> Result<(F, F)> {
    let d = gen_hum.prob(p.x, p.y1)? * gen_hum.prob(p.x, p.y2)?;
    if !(d > F::zero()) {
        return Err(Error::domain(format!(
            "zero human generation mass at ({}, {}, {})",
            p.x, p.y1, p.y2
        )));
    }
    let w1 = policy.prob(p.x, p.y1)? * reference.prob(p.x, p.y2)? / d;
    let w2 = policy.prob(p.x, p.y2)? * reference.prob(p.x, p.y1)? / d;
    Ok((w1, w2))
}

/// `Ẑ − Z` on a human record, with `Ẑ` a label or a judge probability.
fn residual<F: Scalar>(world: Option<&World<F>>, p: &PreferencePair, mode: Residual) -> Result<F> {
    let z = if LabelField::Z.get(p)? { F::one() } else { F::zero() };
    let zh = match mode {
        Residual::Labels => {
            if LabelField::ZHat.get(p)? {
                F::one()
            } else {
                F::zero()
            }
        }
        Residual::JudgeScores => world
            .ok_or_else(|| Error::input("judge-score residuals need the world"))?
            .judge_pref_prob(p.x, p.y1, p.y2)?,
    };
    Ok(zh - z)
}

/// Symmetrized bias estimate and its clipped fraction:
/// `(1/2n) Σ (Ẑ−Z) clip(w1) + (Z−Ẑ) clip(w2)`.
pub fn bias_hat<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: GenHum<'_, F>,
    human: &[PreferencePair],
    clip: &ClipBounds<F>,
    mode: Residual,
    world: Option<&World<F>>,
) -> Result<(F, f64)> {
    if human.is_empty() {
        return Err(Error::input("bias estimator needs human records"));
    }
    gen_hum.check(human.len())?;
    let mut total = F::zero();
    let mut clipped = 0usize;
    for (i, p) in human.iter().enumerate() {
        let (w1, w2) = cross_ratios(policy, reference, gen_hum.table_for(i), p)?;
        let r = residual(world, p, mode)?;
        if clip.active(w1) || clip.active(w2) {
            clipped += 1;
        }
        let c1 = clip_ratio(w1, clip)?;
        let c2 = clip_ratio(w2, clip)?;
        total += r * (c1 - c2);
    }
    let n: F = from_usize(human.len());
    Ok((total * half() / n, clipped as f64 / human.len() as f64))
}

/// Everything the bias-corrected estimators need besides the policies.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorSetup<'a, F> {
    pub world: &'a World<F>,
    pub gen_hum: GenHum<'a, F>,
    pub clip: ClipBounds<F>,
    pub backend: JudgeBackend,
    pub residual: Residual,
}

impl<'a, F: Scalar> EstimatorSetup<'a, F> {
    /// True `π_Gen^Hum`, standard clipping, exact judge scores, label residuals.
    pub fn new(world: &'a World<F>) -> Self {
        Self {
            world,
            gen_hum: GenHum::Table(world.gen_hum()),
            clip: ClipBounds::standard(),
            backend: JudgeBackend::Scores,
            residual: Residual::Labels,
        }
    }
}

/// `P_DIPO = P_DM − Bias-hat` on given draws and human records.
pub fn p_dipo_from_draws<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    setup: &EstimatorSetup<'_, F>,
    draws: &[DirectDraw],
    human: &[PreferencePair],
    seed: u64,
) -> Result<EstimatorReport> {
    let dm = p_dm_from_draws(setup.world, draws, setup.backend, seed)?;
    let (bias, frac) = bias_hat(
        policy,
        reference,
        setup.gen_hum,
        human,
        &setup.clip,
        setup.residual,
        Some(setup.world),
    )?;
    let bias = to_f64(bias);
    Ok(EstimatorReport {
        estimate: dm.direct_term - bias,
        direct_term: dm.direct_term,
        bias_term: bias,
        n_used: human.len(),
        N_used: draws.len(),
        clipped_fraction: frac,
    })
}

/// `P_DIPO` with fresh direct draws for `prompts`.
pub fn p_dipo<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    setup: &EstimatorSetup<'_, F>,
    prompts: &[usize],
    human: &[PreferencePair],
    seed: u64,
) -> Result<EstimatorReport> {
    if prompts.is_empty() {
        return Err(Error::input("direct estimator needs a nonempty prompt sample"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 21));
    let draws = draw_direct(policy, reference, prompts, &mut rng)?;
    p_dipo_from_draws(policy, reference, setup, &draws, human, seed)
}

/// Human-only estimate: mean of the influence function `ψ` over the human
/// records with preference nuisance `g` and human generation policy
/// `gen_hum`.
pub fn p_hum<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    human: &[PreferencePair],
    gen_hum: GenHum<'_, F>,
    g: crate::semipar::PrefNuisance<'_, F>,
) -> Result<F> {
    crate::semipar::psi_mean(policy, reference, gen_hum, g, human)
}

/// `P_DIPO + λ·P_Hum`. `direct_term` absorbs `λ·P_Hum` so that
/// `estimate = direct_term − bias_term` still holds.
pub fn p_dipo_plus(dipo: &EstimatorReport, p_hum: f64, lambda: f64) -> Result<EstimatorReport> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::input(format!("lambda must be >= 0, got {lambda}")));
    }
    let direct = dipo.direct_term + lambda * p_hum;
    Ok(EstimatorReport {
        estimate: direct - dipo.bias_term,
        direct_term: direct,
        ..*dipo
    })
}

/// `[(2Z−1)·log(π(y1)π_ref(y2) / (π(y2)π_ref(y1))) − 1/β]²` summed over
/// records, together with `∂/∂ log-ratio` per record.
fn sipo_terms<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    pairs: &[PreferencePair],
    field: LabelField,
    beta: F,
) -> Result<Vec<(F, F)>> {
    if !(beta > F::zero()) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    if pairs.is_empty() {
        return Err(Error::input("sampled IPO loss over an empty dataset"));
    }
    let inv_beta = F::one() / beta;
    pairs
        .iter()
        .map(|p| {
            let lp1 = policy.log_prob(p.x, p.y1)?;
            let lp2 = policy.log_prob(p.x, p.y2)?;
            if !lp1.is_finite() || !lp2.is_finite() {
                return Err(Error::domain(format!("zero policy mass on record {p:?}")));
            }
            let lr = lp1 - lp2 - (reference.log_prob(p.x, p.y1)? - reference.log_prob(p.x, p.y2)?);
            if !lr.is_finite() {
                return Err(Error::domain(format!("zero reference mass on record {p:?}")));
            }
            let s = if field.get(p)? { F::one() } else { -F::one() };
            let e = s * lr - inv_beta;
            Ok((e * e, cast::<F>(2.0) * s * e))
        })
        .collect()
}

/// Sampled IPO loss: mean over `pairs` of
/// `[(2Z−1)·log(π(y1)π_ref(y2) / (π(y2)π_ref(y1))) − β⁻¹]²`.
pub fn sampled_ipo_loss<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    pairs: &[PreferencePair],
    field: LabelField,
    beta: F,
) -> Result<F> {
    let terms = sipo_terms(policy, reference, pairs, field, beta)?;
    Ok(terms.iter().map(|t| t.0).sum::<F>() / from_usize(terms.len()))
}

/// θ-gradient of [`sampled_ipo_loss`].
pub fn sampled_ipo_grad<F: Scalar>(
    policy: &LogLinearPolicy<F>,
    reference: &PolicyTable<F>,
    pairs: &[PreferencePair],
    field: LabelField,
    beta: F,
) -> Result<Vec<F>> {
    let table = policy.table();
    let terms = sipo_terms(&table, reference, pairs, field, beta)?;
    let n: F = from_usize(pairs.len());
    let mut c: Vec<Vec<F>> = table.shape().iter().map(|&k| vec![F::zero(); k]).collect();
    for (p, (_, d)) in pairs.iter().zip(&terms) {
        c[p.x][p.y1] += *d / n;
        c[p.x][p.y2] -= *d / n;
    }
    Ok(policy.features().pull_back(&c))
}

/// Gradient descent on [`sampled_ipo_loss`] plus `ridge·‖θ − θ₀‖²`, starting
/// at `init`. `batch = 0` uses every pair each step.
pub fn train_sampled_ipo<F: Scalar>(
    pairs: &[PreferencePair],
    field: LabelField,
    init: &LogLinearPolicy<F>,
    reference: &PolicyTable<F>,
    config: &TrainConfig,
) -> Result<(LogLinearPolicy<F>, Vec<F>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::input("sampled IPO needs at least one pair"));
    }
    let beta: F = cast(config.beta);
    let lr: F = cast(config.lr);
    let ridge: F = cast(config.ridge);
    let theta0 = init.theta().to_vec();
    let mut policy = init.clone();
    let mut rng = rng_from_seed(derive_seed(config.seed, 300));
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Vec::new();
    for step in 0..config.steps {
        let used: &[PreferencePair] = if config.batch == 0 {
            pairs
        } else {
            batch.clear();
            batch.extend((0..config.batch).map(|_| pairs[rng.gen_range(0..pairs.len())]));
            &batch
        };
        let loss = sampled_ipo_loss(&policy.table(), reference, used, field, beta)?;
        let mut g = sampled_ipo_grad(&policy, reference, used, field, beta)?;
        for ((gi, t), t0) in g.iter_mut().zip(policy.theta()).zip(&theta0) {
            *gi += cast::<F>(2.0) * ridge * (*t - *t0);
        }
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("sampled IPO loss {loss}"),
            });
        }
        losses.push(loss);
        for (t, gi) in policy.theta_mut().iter_mut().zip(&g) {
            *t -= lr * *gi;
        }
    }
    Ok((policy, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DipoMode {
    /// Direct term from sampled prompts and responses, score-function gradient.
    Sampled,
    /// Direct term and its gradient by exact enumeration.
    ExactExpectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipoOptions {
    pub mode: DipoMode,
    pub backend: JudgeBackend,
    pub residual: Residual,
    /// Subtract the bias estimate; `false` gives plain IPO on judge preferences.
    pub debias: bool,
    /// Weight of the human-only term; 0 gives DIPO, 1 the DIPO+ default.
    pub lambda: f64,
    /// Exact objective evaluation period in steps (0 disables).
    pub eval_every: usize,
}

impl Default for DipoOptions {
    fn default() -> Self {
        Self {
            mode: DipoMode::Sampled,
            backend: JudgeBackend::Scores,
            residual: Residual::Labels,
            debias: true,
            lambda: 0.0,
            eval_every: 100,
        }
    }
}

/// Exactly differentiable parts of the DIPO objective over a fixed human set.
pub struct DipoObjective<'a, F> {
    pub world: &'a World<F>,
    pub reference: &'a PolicyTable<F>,
    pub human: &'a [PreferencePair],
    pub gen_hum: GenHum<'a, F>,
    pub clip: ClipBounds<F>,
    pub beta: F,
    pub options: DipoOptions,
    judge_adv: Vec<Vec<F>>,
    residuals: Vec<F>,
    /// `½(Z − g̃(y1, y2))` per human record for the human-only term.
    psi_residuals: Vec<F>,
}

/// Values of the objective's components at one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoValue {
    pub objective: f64,
    pub direct: f64,
    pub bias: f64,
    pub human: f64,
    pub kl: f64,
}

impl<'a, F: Scalar> DipoObjective<'a, F> {
    pub fn new(
        world: &'a World<F>,
        reference: &'a PolicyTable<F>,
        human: &'a [PreferencePair],
        gen_hum: GenHum<'a, F>,
        clip: ClipBounds<F>,
        beta: F,
        options: DipoOptions,
    ) -> Result<Self> {
        if !(beta > F::zero()) {
            return Err(Error::input(format!("beta must be positive, got {beta}")));
        }
        if reference.shape() != world.shape() {
            return Err(Error::input("reference shape does not match world"));
        }
        if (options.debias || options.lambda > 0.0) && human.is_empty() {
            return Err(Error::input("bias correction needs human records"));
        }
        if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
            return Err(Error::input("lambda must be >= 0"));
        }
        gen_hum.check(human.len())?;
        let judge = world.judge_table();
        let judge_adv = judge.advantage_against(reference)?;
        let residuals = human
            .iter()
            .map(|p| residual(Some(world), p, options.residual))
            .collect::<Result<Vec<_>>>()?;
        let psi_residuals = human
            .iter()
            .map(|p| {
                let z = if LabelField::Z.get(p)? { F::one() } else { F::zero() };
                Ok((z - judge.try_get(p.x, p.y1, p.y2)?) * half())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            world,
            reference,
            human,
            gen_hum,
            clip,
            beta,
            options,
            judge_adv,
            residuals,
            psi_residuals,
        })
    }

    /// Exact direct term `Σ_x p(x) Σ π(y)π_ref(y')g̃(y,y')` and its logit gradient.
    fn direct_exact(&self, pi: &PolicyTable<F>, grad: Option<&mut [Vec<F>]>) -> F {
        let mut v = F::zero();
        let mut per_prompt = Vec::with_capacity(pi.prompt_count());
        for (x, px) in self.world.prompt_weights().iter().enumerate() {
            let row = pi.row(x).expect("shape checked");
            let mean: F = row.iter().zip(&self.judge_adv[x]).map(|(p, a)| *p * *a).sum();
            v += *px * mean;
            per_prompt.push(mean);
        }
        if let Some(g) = grad {
            for (x, px) in self.world.prompt_weights().iter().enumerate() {
                let row = pi.row(x).expect("shape checked");
                for (j, p) in row.iter().enumerate() {
                    g[x][j] += *px * *p * (self.judge_adv[x][j] - per_prompt[x]);
                }
            }
        }
        v
    }

    /// Bias estimate over the human set and its logit gradient; the gradient
    /// of a clipped ratio is zero where the clip binds.
    fn bias(&self, pi: &PolicyTable<F>, grad: Option<&mut [Vec<F>]>, scale: F) -> Result<F> {
        let mut total = F::zero();
        let n: F = from_usize(self.human.len());
        let mut grad = grad;
        for (i, p) in self.human.iter().enumerate() {
            let (w1, w2) = cross_ratios(pi, self.reference, self.gen_hum.table_for(i), p)?;
            let r = self.residuals[i];
            if r == F::zero() {
                continue;
            }
            let c1 = clip_ratio(w1, &self.clip)?;
            let c2 = clip_ratio(w2, &self.clip)?;
            total += r * (c1 - c2);
            if let Some(g) = grad.as_deref_mut() {
                let k = r * half() / n * scale;
                let row = pi.row(p.x)?;
                // ∂w/∂logit_j = w (δ_{j,y} − π_j) for w ∝ π(y)
                if !self.clip.active(w1) {
                    for (j, pj) in row.iter().enumerate() {
                        g[p.x][j] -= k * w1 * *pj;
                    }
                    g[p.x][p.y1] += k * w1;
                }
                if !self.clip.active(w2) {
                    for (j, pj) in row.iter().enumerate() {
                        g[p.x][j] += k * w2 * *pj;
                    }
                    g[p.x][p.y2] -= k * w2;
                }
            }
        }
        Ok(total * half() / n)
    }

    /// Human-only ψ-mean with the judge as preference nuisance, and its
    /// logit gradient.
    fn human(&self, pi: &PolicyTable<F>, grad: Option<&mut [Vec<F>]>, scale: F) -> Result<F> {
        let n: F = from_usize(self.human.len());
        let mut plug = vec![F::zero(); pi.prompt_count()];
        for (x, v) in plug.iter_mut().enumerate() {
            *v = pi
                .row(x)?
                .iter()
                .zip(&self.judge_adv[x])
                .map(|(p, a)| *p * *a)
                .sum();
        }
        let mut total = F::zero();
        let mut counts = vec![F::zero(); pi.prompt_count()];
        let mut grad = grad;
        for (i, p) in self.human.iter().enumerate() {
            let (w1, w2) = cross_ratios(pi, self.reference, self.gen_hum.table_for(i), p)?;
            let r = self.psi_residuals[i];
            total += plug[p.x] + r * (w1 - w2);
            counts[p.x] += F::one();
            if let Some(g) = grad.as_deref_mut() {
                let k = r / n * scale;
                let row = pi.row(p.x)?;
                for (j, pj) in row.iter().enumerate() {
                    g[p.x][j] -= k * (w1 - w2) * *pj;
                }
                g[p.x][p.y1] += k * w1;
                g[p.x][p.y2] -= k * w2;
            }
        }
        if let Some(g) = grad {
            for (x, c) in counts.iter().enumerate() {
                if *c == F::zero() {
                    continue;
                }
                let row = pi.row(x)?;
                for (j, pj) in row.iter().enumerate() {
                    g[x][j] += scale * *c / n * *pj * (self.judge_adv[x][j] - plug[x]);
                }
            }
        }
        Ok(total / n)
    }

    /// `Σ_x p(x) KL_x` and its logit gradient `p(x) π_j (log π_j/π_ref,j − KL_x)`.
    fn kl(&self, pi: &PolicyTable<F>, grad: Option<&mut [Vec<F>]>, scale: F) -> Result<F> {
        let mut total = F::zero();
        let mut grad = grad;
        for (x, px) in self.world.prompt_weights().iter().enumerate() {
            let p = pi.row(x)?;
            let lp = pi.log_row(x)?;
            let lq = self.reference.log_row(x)?;
            let mut kx = F::zero();
            for ((a, b), c) in p.iter().zip(lp).zip(lq) {
                if *a > F::zero() {
                    kx += *a * (*b - *c);
                }
            }
            total += *px * kx;
            if let Some(g) = grad.as_deref_mut() {
                for j in 0..p.len() {
                    if p[j] > F::zero() {
                        g[x][j] += scale * *px * p[j] * (lp[j] - lq[j] - kx);
                    }
                }
            }
        }
        Ok(total)
    }

    /// Everything except the direct term, accumulated into `grad` (ascent
    /// direction of the objective).
    fn deterministic_parts(&self, pi: &PolicyTable<F>, grad: Option<&mut [Vec<F>]>) -> Result<(F, F, F)> {
        let mut grad = grad;
        let bias = if self.options.debias {
            self.bias(pi, grad.as_deref_mut(), -F::one())?
        } else {
            F::zero()
        };
        let lambda: F = cast(self.options.lambda);
        let human = if self.options.lambda > 0.0 {
            self.human(pi, grad.as_deref_mut(), lambda)?
        } else {
            F::zero()
        };
        let kl = self.kl(pi, grad, -self.beta)?;
        Ok((bias, human, kl))
    }

    /// Exact objective `P_DM^exact − Bias-hat + λ·P_Hum − β·KL` with the direct
    /// term enumerated, and its θ-gradient.
    pub fn exact_value_and_grad(&self, policy: &LogLinearPolicy<F>) -> Result<(DipoValue, Vec<F>)> {
        let pi = policy.table();
        let mut g: Vec<Vec<F>> = pi.shape().iter().map(|&k| vec![F::zero(); k]).collect();
        let direct = self.direct_exact(&pi, Some(&mut g));
        let (bias, human, kl) = self.deterministic_parts(&pi, Some(&mut g))?;
        let value = self.combine(direct, bias, human, kl);
        Ok((value, policy.features().pull_back(&g)))
    }

    pub fn exact_value(&self, policy: &PolicyTable<F>) -> Result<DipoValue> {
        let direct = self.direct_exact(policy, None);
        let (bias, human, kl) = self.deterministic_parts(policy, None)?;
        Ok(self.combine(direct, bias, human, kl))
    }

    fn combine(&self, direct: F, bias: F, human: F, kl: F) -> DipoValue {
        let lambda: F = cast(self.options.lambda);
        DipoValue {
            objective: to_f64(direct - bias + lambda * human - self.beta * kl),
            direct: to_f64(direct),
            bias: to_f64(bias),
            human: to_f64(human),
            kl: to_f64(kl),
        }
    }

    /// Sampled direct term over `batch` prompts with a leave-one-out
    /// baseline score-function gradient; other parts exact.
    fn sampled_value_and_grad(
        &self,
        policy: &LogLinearPolicy<F>,
        batch: usize,
        rng: &mut StdRng,
    ) -> Result<(DipoValue, Vec<F>)> {
        let pi = policy.table();
        let prompts = sample_prompts(self.world, batch.max(2), rng);
        let draws = draw_direct(&pi, self.reference, &prompts, rng)?;
        let h = direct_values(self.world, &draws, self.options.backend, rng)?;
        let b: F = from_usize(h.len());
        let sum: F = h.iter().copied().sum();
        let direct = sum / b;
        let mut g: Vec<Vec<F>> = pi.shape().iter().map(|&k| vec![F::zero(); k]).collect();
        let loo = b - F::one();
        for (d, hv) in draws.iter().zip(&h) {
            let baseline = (sum - *hv) / loo;
            let c = (*hv - baseline) / b;
            // ∇ log π(y|x) in logits: e_y − π(·|x)
            let row = pi.row(d.x)?;
            for (j, pj) in row.iter().enumerate() {
                g[d.x][j] -= c * *pj;
            }
            g[d.x][d.y] += c;
        }
        let (bias, human, kl) = self.deterministic_parts(&pi, Some(&mut g))?;
        let value = self.combine(direct, bias, human, kl);
        Ok((value, policy.features().pull_back(&g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoTraceRow {
    pub step: usize,
    pub objective: f64,
    pub direct: f64,
    pub bias: f64,
    pub kl: f64,
    pub grad_norm: f64,
    /// Exact objective, every `eval_every` steps.
    pub exact_objective: Option<f64>,
}

/// Gradient ascent on `P_DIPO(π_θ) − β KL(π_θ ‖ π_ref)` from `reference`.
pub fn train_dipo<F: Scalar>(
    world: &World<F>,
    reference: &LogLinearPolicy<F>,
    human: &[PreferencePair],
    gen_hum: GenHum<'_, F>,
    config: &TrainConfig,
    options: &DipoOptions,
) -> Result<(LogLinearPolicy<F>, Vec<DipoTraceRow>)> {
    config.validate()?;
    let ref_table = reference.table();
    let objective = DipoObjective::new(
        world,
        &ref_table,
        human,
        gen_hum,
        config.clip_bounds(),
        cast(config.beta),
        options.clone(),
    )?;
    let lr: F = cast(config.lr);
    let ridge: F = cast(config.ridge);
    let theta0 = reference.theta().to_vec();
    let mut policy = reference.clone();
    let mut rng = rng_from_seed(derive_seed(config.seed, 200));
    let batch = if config.batch == 0 { 256 } else { config.batch };
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (value, mut g) = match options.mode {
            DipoMode::ExactExpectation => objective.exact_value_and_grad(&policy)?,
            DipoMode::Sampled => objective.sampled_value_and_grad(&policy, batch, &mut rng)?,
        };
        if ridge > F::zero() {
            for ((gi, t), t0) in g.iter_mut().zip(policy.theta()).zip(&theta0) {
                *gi -= cast::<F>(2.0) * ridge * (*t - *t0);
            }
        }
        let norm = g.iter().map(|v| to_f64(*v).powi(2)).sum::<f64>().sqrt();
        if !value.objective.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("objective {} grad norm {norm}", value.objective),
            });
        }
        let exact_objective = if options.eval_every > 0 && step % options.eval_every == 0 {
            Some(objective.exact_value(&policy.table())?.objective)
        } else {
            None
        };
        trace.push(DipoTraceRow {
            step,
            objective: value.objective,
            direct: value.direct,
            bias: value.bias,
            kl: value.kl,
            grad_norm: norm,
            exact_objective,
        });
        if lr != F::zero() {
            for (t, gi) in policy.theta_mut().iter_mut().zip(&g) {
                *t += lr * *gi;
            }
        }
    }
    Ok((policy, trace))
}

/// Writes DIPO trace rows as CSV.
pub fn write_dipo_trace<W: std::io::Write>(rows: &[DipoTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests;
