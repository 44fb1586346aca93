//! Influence-function estimator of `P(π ≻ π_ref)`, its robustness and
//! efficiency studies, and the expansion diagnostic of the debiased estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpo::LabelField;
use crate::dipo::{
    draw_direct, p_dipo_from_draws, sample_prompts, ClipBounds, DirectDraw, EstimatorSetup, GenHum,
    JudgeBackend, Residual,
};
use crate::error::{Error, Result};
use crate::oracle::exact_pref_prob_table;
use crate::policy::PolicyTable;
use crate::rng::{derive_seed, replicate_seed, rng_from_seed};
use crate::scalar::{cast, from_usize, half, to_f64, Scalar};
use crate::stats::{paired_mse_diff_ci, summarize, Summary};
use crate::world::{JudgeKind, PrefTable, PreferencePair, Sampler, Source, World};

/// `ψ = plug_in + augmentation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceValue {
    pub psi: f64,
    pub plug_in: f64,
    pub augmentation: f64,
}

/// Preference nuisance used inside `ψ`.
#[derive(Debug, Clone, Copy)]
pub enum PrefNuisance<'a, F> {
    Table(&'a PrefTable<F>),
    /// Record `i` uses the fold fitted without it.
    CrossFit(&'a FittedPref<F>),
}

impl<'a, F: Scalar> PrefNuisance<'a, F> {
    pub fn table_for(&self, i: usize) -> &'a PrefTable<F> {
        match self {
            PrefNuisance::Table(t) => t,
            PrefNuisance::CrossFit(f) => &f.folds[f.assignment[i]],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if let PrefNuisance::CrossFit(f) = self {
            if f.assignment.len() != n {
                return Err(Error::input("cross-fitted preference built on a different record set"));
            }
        }
        Ok(())
    }
}

/// Cross-fitted preference tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct FittedPref<F> {
    pub folds: Vec<PrefTable<F>>,
    pub assignment: Vec<usize>,
}

/// K-fold per-triple frequency of `field` labels with add-one smoothing.
///
/// Each record counts once for `(y1, y2)` with its label and once for
/// `(y2, y1)` with the complement, so the fitted table is antisymmetric and
/// ties itself at 0.5. Record `i` is in fold `i mod K`.
pub fn fit_pref<F: Scalar>(
    pairs: &[PreferencePair],
    shape: &[usize],
    field: LabelField,
    folds: usize,
) -> Result<FittedPref<F>> {
    if folds < 2 {
        return Err(Error::input("cross-fitting needs K >= 2 folds"));
    }
    if pairs.len() < folds {
        return Err(Error::input(format!("{} records cannot fill {folds} folds", pairs.len())));
    }
    let empty: Vec<Vec<Vec<f64>>> = shape.iter().map(|&k| vec![vec![0.0; k]; k]).collect();
    let mut wins = vec![empty.clone(); folds];
    let mut seen = vec![empty; folds];
    let assignment: Vec<usize> = (0..pairs.len()).map(|i| i % folds).collect();
    for (p, &k) in pairs.iter().zip(&assignment) {
        let kx = *shape
            .get(p.x)
            .ok_or_else(|| Error::input(format!("unknown prompt {}", p.x)))?;
        if p.y1 >= kx || p.y2 >= kx {
            return Err(Error::input(format!("unknown responses in record {p:?}")));
        }
        let z = if field.get(p)? { 1.0 } else { 0.0 };
        wins[k][p.x][p.y1][p.y2] += z;
        seen[k][p.x][p.y1][p.y2] += 1.0;
        wins[k][p.x][p.y2][p.y1] += 1.0 - z;
        seen[k][p.x][p.y2][p.y1] += 1.0;
    }
    let tables = (0..folds)
        .map(|k| {
            PrefTable::from_fn(shape, |x, a, b| {
                if a == b {
                    return half();
                }
                let (mut w, mut s) = (1.0, 2.0);
                for j in (0..folds).filter(|&j| j != k) {
                    w += wins[j][x][a][b];
                    s += seen[j][x][a][b];
                }
                cast(w / s)
            })
        })
        .collect();
    Ok(FittedPref {
        folds: tables,
        assignment,
    })
}

/// `W = [π(y1)π_ref(y2) − π(y2)π_ref(y1)] / [gen(y1) gen(y2)]`.
pub fn augmentation_weight<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: &PolicyTable<F>,
    x: usize,
    y1: usize,
    y2: usize,
) -> Result<F> {
    let d = gen_hum.prob(x, y1)? * gen_hum.prob(x, y2)?;
    if !(d > F::zero()) {
        return Err(Error::domain(format!(
            "zero human generation mass at ({x}, {y1}, {y2})"
        )));
    }
    Ok((policy.prob(x, y1)? * reference.prob(x, y2)? - policy.prob(x, y2)? * reference.prob(x, y1)?) / d)
}

fn plug_in<F: Scalar>(policy: &PolicyTable<F>, reference: &PolicyTable<F>, g: &PrefTable<F>, x: usize) -> Result<F> {
    Ok(g.prompt_value(x, policy.row(x)?, reference.row(x)?))
}

fn influence_parts<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: &PolicyTable<F>,
    g: &PrefTable<F>,
    record: &PreferencePair,
) -> Result<(F, F)> {
    let z = if LabelField::Z.get(record)? { F::one() } else { F::zero() };
    let w = augmentation_weight(policy, reference, gen_hum, record.x, record.y1, record.y2)?;
    let gv = g.try_get(record.x, record.y1, record.y2)?;
    Ok((plug_in(policy, reference, g, record.x)?, (z - gv) * w * half()))
}

/// `ψ(record) = Σ π(y)π_ref(y')g(y,y'|x) + ½(Z − g(y1,y2|x))·W`.
pub fn influence_psi<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: &PolicyTable<F>,
    g: &PrefTable<F>,
    record: &PreferencePair,
) -> Result<InfluenceValue> {
    let (p, a) = influence_parts(policy, reference, gen_hum, g, record)?;
    Ok(InfluenceValue {
        psi: to_f64(p + a),
        plug_in: to_f64(p),
        augmentation: to_f64(a),
    })
}

/// Mean of `ψ` over `human`, the human-only estimator of `P(π ≻ π_ref)`.
pub fn psi_mean<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    gen_hum: GenHum<'_, F>,
    g: PrefNuisance<'_, F>,
    human: &[PreferencePair],
) -> Result<F> {
    if human.is_empty() {
        return Err(Error::input("human-only estimator needs human records"));
    }
    g.check(human.len())?;
    if let GenHum::CrossFit(e) = gen_hum {
        if e.assignment.len() != human.len() {
            return Err(Error::input("cross-fitted estimate built on a different record set"));
        }
    }
    let mut total = F::zero();
    for (i, r) in human.iter().enumerate() {
        let (p, a) = influence_parts(policy, reference, gen_hum.table_for(i), g.table_for(i), r)?;
        total += p + a;
    }
    Ok(total / from_usize(human.len()))
}

/// `g'(y, y') = clip_[0.01, 0.99](g(y, y') + m·sign(y' − y))`, ties kept at 0.5.
///
/// The shift is antisymmetric, so `g'` remains a preference table.
pub fn corrupt_g<F: Scalar>(g: &PrefTable<F>, magnitude: F) -> PrefTable<F> {
    let lo: F = cast(0.01);
    let hi: F = cast(0.99);
    g.map(|_, a, b, v| {
        if a == b {
            half()
        } else {
            let s = if b > a { magnitude } else { -magnitude };
            (v + s).max(lo).min(hi)
        }
    })
}

/// `gen^(1 + m)` renormalized.
pub fn corrupt_gen<F: Scalar>(gen_hum: &PolicyTable<F>, magnitude: F) -> PolicyTable<F> {
    gen_hum.tempered(F::one() + magnitude)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    CorruptG,
    CorruptGen,
    /// Both nuisances; rejected by [`double_robustness_check`].
    Both,
}

/// Replicated ψ-means against the enumerated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub truth: f64,
    pub mean: f64,
    pub se: f64,
    pub bias: f64,
    /// `|bias| / se`.
    pub bias_in_se: f64,
    pub reps: usize,
    pub n: usize,
    pub estimates: Vec<f64>,
}

fn human_records<F: Scalar>(world: &World<F>, n: usize, seed: u64) -> Vec<PreferencePair> {
    let sampler = Sampler::new(world);
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    sampler.records(Source::Human, n, &mut rng)
}

/// ψ-mean over `reps` independent human samples of size `n` with the given
/// nuisances. Replicate `r` uses seed `seed ⊕ r`.
#[allow(clippy::too_many_arguments)]
pub fn psi_replicates<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    world: &World<F>,
    g: &PrefTable<F>,
    gen_hum: &PolicyTable<F>,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<ReplicationReport> {
    if n < 1 || reps < 2 {
        return Err(Error::input("need n >= 1 and at least two replications"));
    }
    let truth = to_f64(exact_pref_prob_table(policy, reference, world)?);
    let estimates = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let human = human_records(world, n, replicate_seed(seed, r));
            psi_mean(policy, reference, GenHum::Table(gen_hum), PrefNuisance::Table(g), &human).map(to_f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let s = summarize(&estimates).expect("nonempty");
    let se = s.se.unwrap_or(f64::NAN);
    let bias = s.mean - truth;
    Ok(ReplicationReport {
        truth,
        mean: s.mean,
        se,
        bias,
        bias_in_se: bias.abs() / se,
        reps,
        n,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleRobustnessReport {
    pub perturbation: Perturbation,
    pub magnitude: f64,
    pub result: ReplicationReport,
}

/// ψ-mean with exactly one nuisance corrupted: `g` shifted by `magnitude`
/// (true `π_Gen^Hum`), or `π_Gen^Hum` tempered by `1 + magnitude` (true `g`).
#[allow(clippy::too_many_arguments)]
pub fn double_robustness_check<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    world: &World<F>,
    perturbation: Perturbation,
    magnitude: F,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<DoubleRobustnessReport> {
    let g = world.human_table();
    let (g_used, gen_used) = match perturbation {
        Perturbation::CorruptG => (corrupt_g(&g, magnitude), world.gen_hum().clone()),
        Perturbation::CorruptGen => (g, corrupt_gen(world.gen_hum(), magnitude)),
        Perturbation::Both => {
            return Err(Error::input(
                "corrupting both nuisances tests nothing; corrupt exactly one",
            ))
        }
    };
    let result = psi_replicates(policy, reference, world, &g_used, &gen_used, n, reps, seed)?;
    Ok(DoubleRobustnessReport {
        perturbation,
        magnitude: to_f64(magnitude),
        result,
    })
}

/// Preference nuisance of the human-only estimator in efficiency studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HumanNuisance {
    /// The judge's probability `g̃`.
    Judge,
    /// Cross-fitted from the human labels.
    CrossFit { folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyOptions {
    pub backend: JudgeBackend,
    pub residual: Residual,
    pub human_nuisance: HumanNuisance,
    pub clip: (f64, f64),
    pub resamples: usize,
    pub level: f64,
}

impl Default for EfficiencyOptions {
    fn default() -> Self {
        Self {
            backend: JudgeBackend::Scores,
            residual: Residual::JudgeScores,
            human_nuisance: HumanNuisance::CrossFit { folds: 2 },
            clip: (0.1, 10.0),
            resamples: 2000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodError {
    pub summary: Summary,
    pub mse: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EfficiencyReport {
    pub truth: f64,
    pub n: usize,
    pub N: usize,
    pub reps: usize,
    pub dipo: MethodError,
    pub human_only: MethodError,
    /// Paired bootstrap CI for `MSE(dipo) − MSE(human_only)`: (point, lo, hi).
    pub mse_diff_ci: Option<(f64, f64, f64)>,
    pub dipo_wins: bool,
    /// Set when the comparison's preconditions (`N > n`, informative judge) fail.
    pub regime: Option<String>,
    pub warnings: Vec<String>,
    pub dipo_errors: Vec<f64>,
    pub human_errors: Vec<f64>,
}

fn method_error(errors: &[f64]) -> MethodError {
    let summary = summarize(errors).expect("nonempty");
    MethodError {
        mse: errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64,
        bias: summary.mean,
        summary,
    }
}

/// Replicated `P_DIPO` (N direct draws, n human records) against the
/// human-only ψ-mean on the same human records.
#[allow(non_snake_case, clippy::too_many_arguments)]
pub fn efficiency_compare<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    world: &World<F>,
    n: usize,
    N: usize,
    reps: usize,
    seed: u64,
    options: &EfficiencyOptions,
) -> Result<EfficiencyReport> {
    if n < 1 || N < 1 || reps < 2 {
        return Err(Error::input("efficiency comparison needs n, N >= 1 and reps >= 2"));
    }
    let mut warnings = Vec::new();
    if reps < 100 {
        warnings.push(format!("only {reps} replications; bootstrap CI unreliable"));
    }
    let mut regime = None;
    if N <= n {
        regime = Some(format!("N = {N} <= n = {n}: AI sample not larger than human sample"));
    }
    if let JudgeKind::FlipChannel { rho } = &world.judge().kind {
        if to_f64(*rho) >= 0.5 {
            regime = Some(format!("flip rate {rho}: judge carries no preference signal"));
        }
    }
    let truth = to_f64(exact_pref_prob_table(policy, reference, world)?);
    let judge = world.judge_table();
    let clip = ClipBounds::new(cast(options.clip.0), cast(options.clip.1))?;
    let setup = EstimatorSetup {
        world,
        gen_hum: GenHum::Table(world.gen_hum()),
        clip,
        backend: options.backend,
        residual: options.residual,
    };
    let shape = world.shape();
    let pairs = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = replicate_seed(seed, r);
            let human = human_records(world, n, s);
            let mut rng = rng_from_seed(derive_seed(s, 2));
            let prompts = sample_prompts(world, N, &mut rng);
            let draws = draw_direct(policy, reference, &prompts, &mut rng)?;
            let dipo = p_dipo_from_draws(policy, reference, &setup, &draws, &human, s)?.estimate;
            let hum = match options.human_nuisance {
                HumanNuisance::Judge => psi_mean(
                    policy,
                    reference,
                    GenHum::Table(world.gen_hum()),
                    PrefNuisance::Table(&judge),
                    &human,
                )?,
                HumanNuisance::CrossFit { folds } => {
                    let fitted = fit_pref(&human, &shape, LabelField::Z, folds)?;
                    psi_mean(
                        policy,
                        reference,
                        GenHum::Table(world.gen_hum()),
                        PrefNuisance::CrossFit(&fitted),
                        &human,
                    )?
                }
            };
            Ok((dipo - truth, to_f64(hum) - truth))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let dipo_errors: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let human_errors: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ci = paired_mse_diff_ci(&dipo_errors, &human_errors, options.resamples, options.level, derive_seed(seed, 99));
    let dipo_wins = ci.map(|c| c.2 < 0.0).unwrap_or(false);
    Ok(EfficiencyReport {
        truth,
        n,
        N,
        reps,
        dipo: method_error(&dipo_errors),
        human_only: method_error(&human_errors),
        mse_diff_ci: ci,
        dipo_wins,
        regime,
        warnings,
        dipo_errors,
        human_errors,
    })
}

/// Leading terms of the debiased estimator's expansion and the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionDiagnostic {
    /// `(1/2N) Σ_i Σ_a g(Y_i, Y_i^a)` with the true human preference.
    pub direct_sum: f64,
    /// `(1/2n) Σ W_i (Z_i − g_i)` with the true generation policy.
    pub human_residual_sum: f64,
    /// `(1/2n) Σ W_i (Ẑ_i − ĝ_i)`.
    pub ai_residual_sum: f64,
    /// `p_dipo − (direct_sum + human_residual_sum − ai_residual_sum)`.
    pub remainder: f64,
    pub p_dipo: f64,
    /// `sup |ĝ − g|` over all triples.
    pub g_err_sup: f64,
    /// `sqrt(mean (ĝ − g)²)` over the human records.
    pub g_err_l2: f64,
    /// `sup |gen / gen_used − 1|` over all responses.
    pub ratio_err_sup: f64,
    /// `sqrt(mean (gen/gen_used − 1)²)` over the human records' responses.
    pub ratio_err_l2: f64,
}

/// Nuisances of the expansion: the preference model `ĝ` in the third term and
/// the generation policy used inside `p_dipo`'s ratios.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionNuisances<'a, F> {
    pub g_hat: &'a PrefTable<F>,
    pub gen_hum: &'a PolicyTable<F>,
}

/// Evaluates the expansion on one data set. `p_dipo` uses `setup` with
/// `nuisances.gen_hum` as its generation policy.
pub fn expansion_diagnostic<F: Scalar>(
    policy: &PolicyTable<F>,
    reference: &PolicyTable<F>,
    setup: &EstimatorSetup<'_, F>,
    draws: &[DirectDraw],
    human: &[PreferencePair],
    nuisances: ExpansionNuisances<'_, F>,
    seed: u64,
) -> Result<ExpansionDiagnostic> {
    let world = setup.world;
    let used = EstimatorSetup {
        gen_hum: GenHum::Table(nuisances.gen_hum),
        ..*setup
    };
    let p = p_dipo_from_draws(policy, reference, &used, draws, human, seed)?.estimate;
    let g = world.human_table();
    let mut direct = F::zero();
    for d in draws {
        direct += (g.get(d.x, d.y, d.y1) + g.get(d.x, d.y, d.y2)) * half();
    }
    let direct = to_f64(direct / from_usize(draws.len()));
    let mut hr = F::zero();
    let mut ar = F::zero();
    let mut g_sq = 0.0;
    let mut r_sq = 0.0;
    for rec in human {
        let w = augmentation_weight(policy, reference, world.gen_hum(), rec.x, rec.y1, rec.y2)?;
        let z = if LabelField::Z.get(rec)? { F::one() } else { F::zero() };
        let zh = match setup.residual {
            Residual::Labels => {
                if LabelField::ZHat.get(rec)? {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Residual::JudgeScores => world.judge_pref_prob(rec.x, rec.y1, rec.y2)?,
        };
        let gv = g.get(rec.x, rec.y1, rec.y2);
        let gh = nuisances.g_hat.try_get(rec.x, rec.y1, rec.y2)?;
        hr += w * (z - gv);
        ar += w * (zh - gh);
        g_sq += to_f64(gh - gv).powi(2);
        for y in [rec.y1, rec.y2] {
            let ratio = world.gen_hum().prob(rec.x, y)? / nuisances.gen_hum.prob(rec.x, y)?;
            r_sq += to_f64(ratio - F::one()).powi(2) / 2.0;
        }
    }
    let n: F = from_usize(human.len());
    let hr = to_f64(hr * half() / n);
    let ar = to_f64(ar * half() / n);
    let mut g_sup = 0.0f64;
    for x in 0..world.prompt_count() {
        for (a, row) in g.block(x).iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                g_sup = g_sup.max(to_f64(nuisances.g_hat.try_get(x, a, b)? - *v).abs());
            }
        }
    }
    let mut r_sup = 0.0f64;
    for (row_t, row_u) in world.gen_hum().rows().iter().zip(nuisances.gen_hum.rows()) {
        for (t, u) in row_t.iter().zip(row_u) {
            r_sup = r_sup.max(to_f64(*t / *u - F::one()).abs());
        }
    }
    Ok(ExpansionDiagnostic {
        direct_sum: direct,
        human_residual_sum: hr,
        ai_residual_sum: ar,
        remainder: p - (direct + hr - ar),
        p_dipo: p,
        g_err_sup: g_sup,
        g_err_l2: (g_sq / human.len() as f64).sqrt(),
        ratio_err_sup: r_sup,
        ratio_err_l2: (r_sq / human.len() as f64).sqrt(),
    })
}
