//! DPO losses on preference pairs, density-ratio weights, the debiased DDPO
//! objective, and its gradient-descent trainer.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dipo::{clip_ratio, ClipBounds};
use crate::error::{Error, Result};
use crate::policy::{FeatureMap, LogLinearPolicy, Policy, PolicyTable};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{cast, from_usize, sigmoid, softplus, to_f64, Scalar};
use crate::world::{DatasetPair, PreferencePair, World};

/// Optimizer and regularization settings shared by the trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// KL weight β.
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    /// Records (DDPO) or prompts (DIPO) per step; 0 means full batch.
    pub batch: usize,
    /// Penalty `ridge·‖θ − θ₀‖²` added to the training objective only.
    pub ridge: f64,
    pub clip: (f64, f64),
    /// Clip DDPO density ratios to `clip`. DIPO always clips.
    pub clip_weights: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 0.1,
            steps: 2000,
            batch: 256,
            ridge: 1e-4,
            clip: (0.1, 10.0),
            clip_weights: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the DIPO trainer: 3000 steps, lr 0.05, 256 prompts per step.
    pub fn dipo_default() -> Self {
        Self {
            lr: 0.05,
            steps: 3000,
            ridge: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("train.beta = {} must be positive", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be >= 0", self.lr)));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::Config(format!("train.ridge = {} must be >= 0", self.ridge)));
        }
        ClipBounds::<f64>::new(self.clip.0, self.clip.1).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn clip_bounds<F: Scalar>(&self) -> ClipBounds<F> {
        ClipBounds::new(cast(self.clip.0), cast(self.clip.1)).expect("validated clip bounds")
    }
}

/// Which label of a record a loss reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelField {
    Z,
    ZHat,
}

impl LabelField {
    pub fn get(self, pair: &PreferencePair) -> Result<bool> {
        let v = match self {
            LabelField::Z => pair.z,
            LabelField::ZHat => pair.z_hat,
        };
        v.ok_or_else(|| Error::input(format!("record {pair:?} lacks label {self:?}")))
    }
}

/// `ℓ = −log σ(β s m) = softplus(−β s m)` with `s = 2·label − 1` and margin
/// `m = Δ_π − Δ_ref`.
pub fn dpo_margin_loss<F: Scalar>(margin: F, label: bool, beta: F) -> F {
    let s = if label { F::one() } else { -F::one() };
    softplus(-beta * s * margin)
}

/// `∂ℓ/∂m = −β s σ(−β s m)`.
pub fn dpo_margin_grad<F: Scalar>(margin: F, label: bool, beta: F) -> F {
    let s = if label { F::one() } else { -F::one() };
    -beta * s * sigmoid(-beta * s * margin)
}

fn check_beta<F: Scalar>(beta: F) -> Result<()> {
    if !(beta > F::zero() && beta.is_finite()) {
        return Err(Error::input(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// `Δ_π − Δ_ref` on the pair's responses.
pub fn margin<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    pair: &PreferencePair,
) -> Result<F> {
    Ok(crate::policy::delta_pi(policy, pair.x, pair.y1, pair.y2)?
        - crate::policy::delta_pi(reference, pair.x, pair.y1, pair.y2)?)
}

pub fn dpo_example_loss<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    pair: &PreferencePair,
    label: bool,
    beta: F,
) -> Result<F> {
    check_beta(beta)?;
    Ok(dpo_margin_loss(margin(policy, reference, pair)?, label, beta))
}

/// `∇_θ ℓ = ∂ℓ/∂m · (φ(x, y1) − φ(x, y2))`.
pub fn dpo_example_grad<F: Scalar, Q: Policy<F> + ?Sized>(
    policy: &LogLinearPolicy<F>,
    reference: &Q,
    pair: &PreferencePair,
    label: bool,
    beta: F,
) -> Result<Vec<F>> {
    check_beta(beta)?;
    let d = dpo_margin_grad(margin(policy, reference, pair)?, label, beta);
    let fm = policy.features();
    let a = fm.phi(pair.x, pair.y1)?;
    let b = fm.phi(pair.x, pair.y2)?;
    Ok(a.iter().zip(b).map(|(u, v)| d * (*u - *v)).collect())
}

/// Mean of [`dpo_example_loss`] over `data` using `field` as the label.
pub fn empirical_dpo_loss<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    data: &[PreferencePair],
    field: LabelField,
    beta: F,
) -> Result<F> {
    check_beta(beta)?;
    if data.is_empty() {
        return Err(Error::input("empirical loss over an empty dataset"));
    }
    let pt = policy.table();
    let rt = reference.table();
    let mut total = F::zero();
    for p in data {
        let label = field.get(p)?;
        total += dpo_margin_loss(margin(&pt, &rt, p)?, label, beta);
    }
    Ok(total / from_usize(data.len()))
}

/// Density-ratio weight `w = Π_j π_Gen^AI(y_j|x) / π_Gen^Hum(y_j|x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RatioWeight<F> {
    pub value: F,
    pub clipped: bool,
}

impl<F: Scalar> RatioWeight<F> {
    pub fn unit() -> Self {
        Self {
            value: F::one(),
            clipped: false,
        }
    }

    pub fn clip(self, bounds: &ClipBounds<F>) -> Self {
        let v = clip_ratio(self.value, bounds).expect("ratio weights are positive");
        Self {
            value: v,
            clipped: self.clipped || v != self.value,
        }
    }
}

/// `Π_j num(y_j|x) / den(y_j|x)`.
pub fn ratio_from_tables<F: Scalar>(
    num: &PolicyTable<F>,
    den: &PolicyTable<F>,
    x: usize,
    y1: usize,
    y2: usize,
) -> Result<RatioWeight<F>> {
    let d1 = den.prob(x, y1)?;
    let d2 = den.prob(x, y2)?;
    if d1 <= F::zero() || d2 <= F::zero() {
        return Err(Error::domain(format!(
            "zero human generation mass at ({x}, {y1}, {y2}): overlap violated"
        )));
    }
    Ok(RatioWeight {
        value: num.prob(x, y1)? / d1 * (num.prob(x, y2)? / d2),
        clipped: false,
    })
}

pub fn density_ratio<F: Scalar>(world: &World<F>, x: usize, y1: usize, y2: usize) -> Result<RatioWeight<F>> {
    ratio_from_tables(world.gen_ai(), world.gen_hum(), x, y1, y2)
}

/// True density ratios for every record.
pub fn exact_weights<F: Scalar>(world: &World<F>, pairs: &[PreferencePair]) -> Result<Vec<RatioWeight<F>>> {
    pairs
        .iter()
        .map(|p| density_ratio(world, p.x, p.y1, p.y2))
        .collect()
}

/// Clips every weight; returns the clipped weights and the clipped fraction.
pub fn clip_weights<F: Scalar>(weights: &[RatioWeight<F>], bounds: &ClipBounds<F>) -> (Vec<RatioWeight<F>>, f64) {
    let out: Vec<RatioWeight<F>> = weights.iter().map(|w| w.clip(bounds)).collect();
    let frac = if out.is_empty() {
        0.0
    } else {
        out.iter().filter(|w| w.clipped).count() as f64 / out.len() as f64
    };
    (out, frac)
}

/// Cross-fitted estimates of `π_Gen^Hum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct GenHumEstimate<F> {
    /// `folds[k]` is fitted on every fold except `k`.
    pub folds: Vec<PolicyTable<F>>,
    /// Fold of record `i`.
    pub assignment: Vec<usize>,
    /// `(fold, prompt)` pairs whose training folds held no record of the
    /// prompt; those rows are uniform.
    pub fallbacks: Vec<(usize, usize)>,
}

impl<F: Scalar> GenHumEstimate<F> {
    /// Estimate used to weight record `i` (fitted without record `i`'s fold).
    pub fn table_for(&self, i: usize) -> &PolicyTable<F> {
        &self.folds[self.assignment[i]]
    }

    /// Cross-fitted weights `ŵ_i` for the records the estimate was built from.
    pub fn weights(&self, gen_ai: &PolicyTable<F>, pairs: &[PreferencePair]) -> Result<Vec<RatioWeight<F>>> {
        if pairs.len() != self.assignment.len() {
            return Err(Error::input("weights requested for a different record set"));
        }
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| ratio_from_tables(gen_ai, self.table_for(i), p.x, p.y1, p.y2))
            .collect()
    }
}

/// K-fold add-one-smoothed frequency estimates of the human generation
/// policy from the responses `y1, y2` of the human records. Record `i` belongs
/// to fold `i mod K`.
pub fn estimate_gen_hum<F: Scalar>(
    human: &[PreferencePair],
    shape: &[usize],
    folds: usize,
) -> Result<GenHumEstimate<F>> {
    if folds < 2 {
        return Err(Error::input("cross-fitting needs K >= 2 folds"));
    }
    if human.len() < folds {
        return Err(Error::input(format!(
            "{} human records cannot fill {folds} folds",
            human.len()
        )));
    }
    let mut counts: Vec<Vec<Vec<f64>>> = vec![shape.iter().map(|&k| vec![0.0; k]).collect(); folds];
    let assignment: Vec<usize> = (0..human.len()).map(|i| i % folds).collect();
    for (p, &k) in human.iter().zip(&assignment) {
        let row = counts[k]
            .get_mut(p.x)
            .ok_or_else(|| Error::input(format!("unknown prompt {}", p.x)))?;
        if p.y1 >= row.len() || p.y2 >= row.len() {
            return Err(Error::input(format!("unknown responses in record {p:?}")));
        }
        row[p.y1] += 1.0;
        row[p.y2] += 1.0;
    }
    let mut tables = Vec::with_capacity(folds);
    let mut fallbacks = Vec::new();
    for k in 0..folds {
        let mut rows = Vec::with_capacity(shape.len());
        for (x, &kx) in shape.iter().enumerate() {
            let mut c = vec![1.0; kx];
            let mut seen = 0.0;
            for (j, fold) in counts.iter().enumerate() {
                if j == k {
                    continue;
                }
                for (ci, v) in c.iter_mut().zip(&fold[x]) {
                    *ci += v;
                    seen += v;
                }
            }
            if seen == 0.0 {
                fallbacks.push((k, x));
            }
            let total: f64 = c.iter().sum();
            rows.push(c.iter().map(|v| cast::<F>(v / total)).collect::<Vec<F>>());
        }
        tables.push(PolicyTable::from_probs(rows)?);
    }
    Ok(GenHumEstimate {
        folds: tables,
        assignment,
        fallbacks,
    })
}

/// `(1/n) Σ w_i [ℓ(Ẑ_i) − ℓ(Z_i)]`.
pub fn ddpo_bias_term<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    human: &[PreferencePair],
    weights: &[RatioWeight<F>],
    beta: F,
) -> Result<F> {
    check_beta(beta)?;
    if human.is_empty() {
        return Err(Error::input("bias term over an empty human set"));
    }
    if weights.len() != human.len() {
        return Err(Error::input("one weight per human record required"));
    }
    let pt = policy.table();
    let rt = reference.table();
    let mut total = F::zero();
    for (p, w) in human.iter().zip(weights) {
        let z = LabelField::Z.get(p)?;
        let zh = LabelField::ZHat.get(p)?;
        if z == zh {
            continue;
        }
        let m = margin(&pt, &rt, p)?;
        total += w.value * (dpo_margin_loss(m, zh, beta) - dpo_margin_loss(m, z, beta));
    }
    Ok(total / from_usize(human.len()))
}

/// Components of the DDPO loss; `total = ai_term − bias_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ai_term: f64,
    pub bias_term: f64,
}

pub fn ddpo_loss<F: Scalar, P: Policy<F> + ?Sized, Q: Policy<F> + ?Sized>(
    policy: &P,
    reference: &Q,
    data: &DatasetPair,
    weights: &[RatioWeight<F>],
    beta: F,
) -> Result<LossReport> {
    let ai = empirical_dpo_loss(policy, reference, &data.ai, LabelField::ZHat, beta)?;
    let bias = ddpo_bias_term(policy, reference, &data.human, weights, beta)?;
    Ok(LossReport {
        total: to_f64(ai - bias),
        ai_term: to_f64(ai),
        bias_term: to_f64(bias),
    })
}

/// `c1·ℓ(m; label 1) + c0·ℓ(m; label 0)` on the triple `(x, y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct PairTerm<F> {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub c1: F,
    pub c0: F,
}

impl<F: Scalar> PairTerm<F> {
    fn labeled(p: &PreferencePair, label: bool, weight: F) -> Self {
        let (c1, c0) = if label { (weight, F::zero()) } else { (F::zero(), weight) };
        Self {
            x: p.x,
            y1: p.y1,
            y2: p.y2,
            c1,
            c0,
        }
    }
}

/// Mean of pair terms over one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ObjectivePart<F> {
    units: Vec<PairTerm<F>>,
    /// Units merged by triple and divided by the unit count.
    aggregated: Vec<PairTerm<F>>,
}

impl<F: Scalar> ObjectivePart<F> {
    pub fn new(units: Vec<PairTerm<F>>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::input("objective part needs at least one record"));
        }
        let inv = F::one() / from_usize(units.len());
        let mut merged: BTreeMap<(usize, usize, usize), (F, F)> = BTreeMap::new();
        for u in &units {
            let e = merged.entry((u.x, u.y1, u.y2)).or_insert((F::zero(), F::zero()));
            e.0 += u.c1;
            e.1 += u.c0;
        }
        let aggregated = merged
            .into_iter()
            .map(|((x, y1, y2), (c1, c0))| PairTerm {
                x,
                y1,
                y2,
                c1: c1 * inv,
                c0: c0 * inv,
            })
            .collect();
        Ok(Self { units, aggregated })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// `primary − correction`, each a mean of pair terms; DPO has no correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Objective<F> {
    pub beta: F,
    pub primary: ObjectivePart<F>,
    pub correction: Option<ObjectivePart<F>>,
}

/// Per-prompt logits of θ and of the reference.
struct Margins<F> {
    logits: Vec<Vec<F>>,
    ref_logp: Vec<Vec<F>>,
}

impl<F: Scalar> Margins<F> {
    fn new(policy: &LogLinearPolicy<F>, ref_logp: &[Vec<F>]) -> Result<Self> {
        let fm = policy.features();
        let logits = (0..fm.prompt_count())
            .map(|x| fm.logits(policy.theta(), x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            logits,
            ref_logp: ref_logp.to_vec(),
        })
    }

    #[inline]
    fn get(&self, t: &PairTerm<F>) -> F {
        let l = &self.logits[t.x];
        let r = &self.ref_logp[t.x];
        (l[t.y1] - l[t.y2]) - (r[t.y1] - r[t.y2])
    }
}

impl<F: Scalar> Objective<F> {
    /// Plain DPO on `data` with the labels in `field`.
    pub fn dpo(data: &[PreferencePair], field: LabelField, beta: F) -> Result<Self> {
        check_beta(beta)?;
        let units = data
            .iter()
            .map(|p| Ok(PairTerm::labeled(p, field.get(p)?, F::one())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta,
            primary: ObjectivePart::new(units)?,
            correction: None,
        })
    }

    /// DPO on explicit `(record, label)` pairs.
    pub fn dpo_labeled(data: &[(PreferencePair, bool)], beta: F) -> Result<Self> {
        check_beta(beta)?;
        let units = data
            .iter()
            .map(|(p, l)| PairTerm::labeled(p, *l, F::one()))
            .collect();
        Ok(Self {
            beta,
            primary: ObjectivePart::new(units)?,
            correction: None,
        })
    }

    /// `(1/N) Σ_AI ℓ(Ẑ) − (1/n) Σ_H w [ℓ(Ẑ) − ℓ(Z)]`.
    pub fn ddpo(data: &DatasetPair, weights: &[RatioWeight<F>], beta: F) -> Result<Self> {
        check_beta(beta)?;
        if weights.len() != data.human.len() {
            return Err(Error::input("one weight per human record required"));
        }
        let primary = data
            .ai
            .iter()
            .map(|p| Ok(PairTerm::labeled(p, LabelField::ZHat.get(p)?, F::one())))
            .collect::<Result<Vec<_>>>()?;
        let mut correction = Vec::with_capacity(data.human.len());
        for (p, w) in data.human.iter().zip(weights) {
            let z = LabelField::Z.get(p)?;
            let zh = LabelField::ZHat.get(p)?;
            let mut t = PairTerm::labeled(p, zh, w.value);
            if z == zh {
                t.c1 = F::zero();
                t.c0 = F::zero();
            } else if z {
                t.c1 = -w.value;
            } else {
                t.c0 = -w.value;
            }
            correction.push(t);
        }
        Ok(Self {
            beta,
            primary: ObjectivePart::new(primary)?,
            correction: Some(ObjectivePart::new(correction)?),
        })
    }

    fn part_value_grad(&self, part: &[PairTerm<F>], scale: F, m: &Margins<F>, grad: &mut [Vec<F>]) -> F {
        let mut v = F::zero();
        for t in part {
            let mg = m.get(t);
            let mut d = F::zero();
            if t.c1 != F::zero() {
                v += t.c1 * dpo_margin_loss(mg, true, self.beta);
                d += t.c1 * dpo_margin_grad(mg, true, self.beta);
            }
            if t.c0 != F::zero() {
                v += t.c0 * dpo_margin_loss(mg, false, self.beta);
                d += t.c0 * dpo_margin_grad(mg, false, self.beta);
            }
            let d = d * scale;
            grad[t.x][t.y1] += d;
            grad[t.x][t.y2] -= d;
        }
        v
    }

    /// Exact value and θ-gradient of the full objective.
    pub fn value_and_grad<Q: Policy<F> + ?Sized>(
        &self,
        policy: &LogLinearPolicy<F>,
        reference: &Q,
    ) -> Result<(LossReport, Vec<F>)> {
        let rt = reference.table();
        let m = Margins::new(policy, rt.log_rows())?;
        let (report, logit_grad) = self.eval(&m, None)?;
        Ok((report, policy.features().pull_back(&logit_grad)))
    }

    pub fn value<Q: Policy<F> + ?Sized>(&self, policy: &LogLinearPolicy<F>, reference: &Q) -> Result<LossReport> {
        Ok(self.value_and_grad(policy, reference)?.0)
    }

    /// Full objective when `batch` is `None`; otherwise minibatch means over
    /// the sampled unit indices of each part.
    fn eval(&self, m: &Margins<F>, batch: Option<(&[usize], &[usize])>) -> Result<(LossReport, Vec<Vec<F>>)> {
        let mut grad: Vec<Vec<F>> = m.logits.iter().map(|r| vec![F::zero(); r.len()]).collect();
        let (ai, bias) = match batch {
            None => {
                let ai = self.part_value_grad(&self.primary.aggregated, F::one(), m, &mut grad);
                let bias = match &self.correction {
                    Some(c) => self.part_value_grad(&c.aggregated, -F::one(), m, &mut grad),
                    None => F::zero(),
                };
                (ai, bias)
            }
            Some((bi, bc)) => {
                let pick = |part: &ObjectivePart<F>, idx: &[usize]| -> Vec<PairTerm<F>> {
                    let inv = F::one() / from_usize(idx.len().max(1));
                    idx.iter()
                        .map(|&i| {
                            let u = part.units[i];
                            PairTerm {
                                c1: u.c1 * inv,
                                c0: u.c0 * inv,
                                ..u
                            }
                        })
                        .collect()
                };
                let ai = self.part_value_grad(&pick(&self.primary, bi), F::one(), m, &mut grad);
                let bias = match &self.correction {
                    Some(c) => self.part_value_grad(&pick(c, bc), -F::one(), m, &mut grad),
                    None => F::zero(),
                };
                (ai, bias)
            }
        };
        Ok((
            LossReport {
                total: to_f64(ai - bias),
                ai_term: to_f64(ai),
                bias_term: to_f64(bias),
            },
            grad,
        ))
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub ai_term: f64,
    pub bias_term: f64,
    pub grad_norm: f64,
}

/// Writes trace rows as CSV with header `step,total,ai_term,bias_term,grad_norm`.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Gradient descent on `objective + ridge·‖θ − θ_init‖²` starting from `init`.
///
/// Each step samples `config.batch` units with replacement from each part
/// (`batch = 0` uses the exact full objective). Trace rows hold the
/// (minibatch) objective before the update; the ridge term is excluded.
pub fn train_objective<F: Scalar, Q: Policy<F> + ?Sized>(
    objective: &Objective<F>,
    init: &LogLinearPolicy<F>,
    reference: &Q,
    config: &TrainConfig,
) -> Result<(LogLinearPolicy<F>, Vec<TraceRow>)> {
    config.validate()?;
    let rt = reference.table();
    if rt.shape() != init.shape() {
        return Err(Error::input("reference and policy shapes differ"));
    }
    let lr: F = cast(config.lr);
    let ridge: F = cast(config.ridge);
    let two: F = cast(2.0);
    let theta0 = init.theta().to_vec();
    let mut policy = init.clone();
    let mut rng = rng_from_seed(derive_seed(config.seed, 100));
    let mut trace = Vec::with_capacity(config.steps);
    let mut bi = Vec::new();
    let mut bc = Vec::new();
    for step in 0..config.steps {
        let m = Margins::new(&policy, rt.log_rows())?;
        let (report, logit_grad) = if config.batch == 0 {
            objective.eval(&m, None)?
        } else {
            bi.clear();
            bc.clear();
            let np = objective.primary.len();
            bi.extend((0..config.batch).map(|_| rng.gen_range(0..np)));
            if let Some(c) = &objective.correction {
                let nc = c.len();
                bc.extend((0..config.batch).map(|_| rng.gen_range(0..nc)));
            }
            objective.eval(&m, Some((&bi, &bc)))?
        };
        let mut g = policy.features().pull_back(&logit_grad);
        if ridge > F::zero() {
            for ((gi, t), t0) in g.iter_mut().zip(policy.theta()).zip(&theta0) {
                *gi += two * ridge * (*t - *t0);
            }
        }
        let norm = g.iter().map(|v| to_f64(*v).powi(2)).sum::<f64>().sqrt();
        if !report.total.is_finite() || !norm.is_finite() {
            let detail = if config.batch == 0 {
                format!("full batch, loss {} grad norm {norm}", report.total)
            } else {
                format!(
                    "loss {} grad norm {norm}; batch primary {:?} correction {:?}",
                    report.total, bi, bc
                )
            };
            return Err(Error::NonFinite { step, detail });
        }
        trace.push(TraceRow {
            step,
            total: report.total,
            ai_term: report.ai_term,
            bias_term: report.bias_term,
            grad_norm: norm,
        });
        if lr != F::zero() {
            for (t, gi) in policy.theta_mut().iter_mut().zip(&g) {
                *t -= lr * *gi;
            }
        }
    }
    Ok((policy, trace))
}

/// Algorithm-1 trainer: DDPO on `data` with the given weights, initialized
/// at the reference policy.
pub fn train_ddpo<F: Scalar>(
    data: &DatasetPair,
    weights: &[RatioWeight<F>],
    reference: &LogLinearPolicy<F>,
    config: &TrainConfig,
) -> Result<(LogLinearPolicy<F>, Vec<TraceRow>)> {
    config.validate()?;
    let weights = if config.clip_weights {
        clip_weights(weights, &config.clip_bounds()).0
    } else {
        weights.to_vec()
    };
    let obj = Objective::ddpo(data, &weights, cast(config.beta))?;
    train_objective(&obj, reference, reference, config)
}

/// One-hot policy equal to `table`, the usual starting point of training.
pub fn one_hot_policy<F: Scalar>(table: &PolicyTable<F>) -> Result<LogLinearPolicy<F>> {
    let fm = std::sync::Arc::new(FeatureMap::one_hot(&table.shape())?);
    LogLinearPolicy::fit_to_table(fm, table)
}
