//! Finite synthetic preference worlds and the datasets sampled from them.
//!
//! A [`World`] fixes a prompt distribution, a latent reward per
//! (prompt, response), a judge whose preference probability may disagree with
//! the Bradley–Terry human preference, and two generation policies (one for
//! AI-labeled pairs, one for human-labeled pairs).

mod config;
mod io;
mod sample;

pub use config::{JudgeConfig, JudgeKindConfig, WorldConfig};
pub use io::{read_dataset, write_dataset};
pub use sample::{mc_judge_label, sample_dataset, sample_protocol, Sampler};
pub(crate) use sample::mc_judge_label_with;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyTable;
use crate::scalar::{cast, sigmoid, Scalar};

/// Latent reward `r(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RewardTable<F> {
    r: Vec<Vec<F>>,
    r_max: F,
}

impl<F: Scalar> RewardTable<F> {
    pub fn new(r: Vec<Vec<F>>, r_max: F) -> Result<Self> {
        if r.is_empty() || r.iter().any(Vec::is_empty) {
            return Err(Error::input("reward table needs responses for every prompt"));
        }
        for (x, row) in r.iter().enumerate() {
            for (y, v) in row.iter().enumerate() {
                if !v.is_finite() || v.abs() > r_max {
                    return Err(Error::input(format!(
                        "reward ({x},{y}) = {v} not finite or exceeds r_max {r_max}"
                    )));
                }
            }
        }
        Ok(Self { r, r_max })
    }

    /// Bounded by the largest absolute entry.
    pub fn from_rows(r: Vec<Vec<F>>) -> Result<Self> {
        let r_max = r.iter().flatten().fold(F::zero(), |m, v| m.max(v.abs()));
        Self::new(r, r_max)
    }

    pub fn get(&self, x: usize, y: usize) -> Result<F> {
        self.r
            .get(x)
            .and_then(|row| row.get(y))
            .copied()
            .ok_or_else(|| Error::input(format!("unknown (prompt, response) ({x}, {y})")))
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.r
    }

    pub fn r_max(&self) -> F {
        self.r_max
    }

    pub fn shape(&self) -> Vec<usize> {
        self.r.iter().map(Vec::len).collect()
    }

    /// Adds `offsets[x]` to every reward of prompt `x`.
    pub fn shifted(&self, offsets: &[F]) -> Result<Self> {
        if offsets.len() != self.r.len() {
            return Err(Error::input("one offset per prompt required"));
        }
        let rows = self
            .r
            .iter()
            .zip(offsets)
            .map(|(row, c)| row.iter().map(|v| *v + *c).collect())
            .collect();
        Self::from_rows(rows)
    }
}

/// How the judge's preference probability `g̃` relates to the human one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub enum JudgeKind<F> {
    /// `g̃ = (1−ρ)g + ρ(1−g)`; labels are the human label flipped with
    /// probability `ρ`.
    FlipChannel { rho: F },
    /// `g̃ = σ(r̃(x,y1) − r̃(x,y2))`; labels drawn independently of `Z`.
    MisalignedReward { reward: RewardTable<F> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct JudgeSpec<F> {
    pub kind: JudgeKind<F>,
    /// Draws per comparison for Monte Carlo judge labels.
    pub mc_comparisons: usize,
}

impl<F: Scalar> JudgeSpec<F> {
    pub fn flip(rho: F) -> Result<Self> {
        let spec = Self {
            kind: JudgeKind::FlipChannel { rho },
            mc_comparisons: 8,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn misaligned(reward: RewardTable<F>) -> Self {
        Self {
            kind: JudgeKind::MisalignedReward { reward },
            mc_comparisons: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_comparisons < 1 {
            return Err(Error::input("judge needs at least one comparison"));
        }
        if let JudgeKind::FlipChannel { rho } = &self.kind {
            if !(*rho >= F::zero() && *rho <= F::one()) {
                return Err(Error::input(format!("flip rate {rho} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Finite preference environment. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct World<F> {
    prompt_weights: Vec<F>,
    reward: RewardTable<F>,
    judge: JudgeSpec<F>,
    gen_ai: PolicyTable<F>,
    gen_hum: PolicyTable<F>,
}

impl<F: Scalar> World<F> {
    pub fn new(
        prompt_weights: Vec<F>,
        reward: RewardTable<F>,
        judge: JudgeSpec<F>,
        gen_ai: PolicyTable<F>,
        gen_hum: PolicyTable<F>,
    ) -> Result<Self> {
        if prompt_weights.is_empty() {
            return Err(Error::input("world needs at least one prompt"));
        }
        if prompt_weights.iter().any(|w| !w.is_finite() || *w < F::zero()) {
            return Err(Error::input("prompt weights must be finite and nonnegative"));
        }
        let total: F = prompt_weights.iter().copied().sum();
        if (total - F::one()).abs() > F::normalization_tol() {
            return Err(Error::input(format!("prompt weights sum to {total}, not 1")));
        }
        let shape = reward.shape();
        if shape.len() != prompt_weights.len() {
            return Err(Error::input("reward table and prompt weights differ in prompt count"));
        }
        if shape.iter().any(|&k| k < 2) {
            return Err(Error::input("every prompt needs at least two responses"));
        }
        if gen_ai.shape() != shape || gen_hum.shape() != shape {
            return Err(Error::input("generation policies do not match the reward shape"));
        }
        if let JudgeKind::MisalignedReward { reward: rt } = &judge.kind {
            if rt.shape() != shape {
                return Err(Error::input("judge reward does not match the reward shape"));
            }
        }
        judge.validate()?;
        gen_ai.check_floor(F::min_positive_value())?;
        gen_hum.check_floor(F::min_positive_value())?;
        Ok(Self {
            prompt_weights,
            reward,
            judge,
            gen_ai,
            gen_hum,
        })
    }

    pub fn prompt_weights(&self) -> &[F] {
        &self.prompt_weights
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_weights.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.reward.shape()
    }

    /// Number of `(x, y, y')` triples.
    pub fn triple_count(&self) -> usize {
        self.shape().iter().map(|k| k * k).sum()
    }

    pub fn reward(&self) -> &RewardTable<F> {
        &self.reward
    }

    pub fn judge(&self) -> &JudgeSpec<F> {
        &self.judge
    }

    pub fn gen_ai(&self) -> &PolicyTable<F> {
        &self.gen_ai
    }

    pub fn gen_hum(&self) -> &PolicyTable<F> {
        &self.gen_hum
    }

    pub fn with_judge(&self, judge: JudgeSpec<F>) -> Result<Self> {
        Self::new(
            self.prompt_weights.clone(),
            self.reward.clone(),
            judge,
            self.gen_ai.clone(),
            self.gen_hum.clone(),
        )
    }

    pub fn with_reward(&self, reward: RewardTable<F>) -> Result<Self> {
        Self::new(
            self.prompt_weights.clone(),
            reward,
            self.judge.clone(),
            self.gen_ai.clone(),
            self.gen_hum.clone(),
        )
    }

    pub fn with_generators(&self, gen_ai: PolicyTable<F>, gen_hum: PolicyTable<F>) -> Result<Self> {
        Self::new(
            self.prompt_weights.clone(),
            self.reward.clone(),
            self.judge.clone(),
            gen_ai,
            gen_hum,
        )
    }

    fn check_ids(&self, x: usize, y1: usize, y2: usize) -> Result<usize> {
        let k = self
            .reward
            .r
            .get(x)
            .map(Vec::len)
            .ok_or_else(|| Error::input(format!("unknown prompt {x}")))?;
        if y1 >= k || y2 >= k {
            return Err(Error::input(format!(
                "unknown response pair ({y1}, {y2}) for prompt {x}"
            )));
        }
        Ok(k)
    }

    /// `g(y1, y2 | x) = σ(r(x,y1) − r(x,y2))`.
    pub fn human_pref_prob(&self, x: usize, y1: usize, y2: usize) -> Result<F> {
        self.check_ids(x, y1, y2)?;
        Ok(self.human_pref_unchecked(x, y1, y2))
    }

    pub(crate) fn human_pref_unchecked(&self, x: usize, y1: usize, y2: usize) -> F {
        let r = &self.reward.r[x];
        sigmoid(r[y1] - r[y2])
    }

    /// Judge preference probability `g̃(y1, y2 | x)`.
    pub fn judge_pref_prob(&self, x: usize, y1: usize, y2: usize) -> Result<F> {
        self.check_ids(x, y1, y2)?;
        Ok(self.judge_pref_unchecked(x, y1, y2))
    }

    pub(crate) fn judge_pref_unchecked(&self, x: usize, y1: usize, y2: usize) -> F {
        match &self.judge.kind {
            JudgeKind::FlipChannel { rho } => {
                let g = self.human_pref_unchecked(x, y1, y2);
                (F::one() - *rho) * g + *rho * (F::one() - g)
            }
            JudgeKind::MisalignedReward { reward } => {
                let r = &reward.r[x];
                sigmoid(r[y1] - r[y2])
            }
        }
    }

    /// `E |g̃ − g|` over `x ~ D_X`, `y1, y2 ~ π_Gen^AI(·|x)` i.i.d.
    pub fn mean_judge_gap(&self) -> F {
        let mut total = F::zero();
        for (x, px) in self.prompt_weights.iter().enumerate() {
            let gen = self.gen_ai.row(x).expect("validated shape");
            for (a, pa) in gen.iter().enumerate() {
                for (b, pb) in gen.iter().enumerate() {
                    let d = self.judge_pref_unchecked(x, a, b) - self.human_pref_unchecked(x, a, b);
                    total += *px * *pa * *pb * d.abs();
                }
            }
        }
        total
    }

    /// Replaces the judge by `r̃ = r + κ·direction` with `κ ≥ 0` chosen by
    /// bisection so that [`World::mean_judge_gap`] equals `target_gap`.
    ///
    /// Returns the calibrated world and `κ`.
    pub fn with_tilted_judge(&self, direction: &[Vec<F>], target_gap: F) -> Result<(Self, F)> {
        if direction.len() != self.prompt_count()
            || direction.iter().zip(self.shape()).any(|(d, k)| d.len() != k)
        {
            return Err(Error::input("tilt direction does not match the world shape"));
        }
        if direction.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("tilt direction must be finite"));
        }
        if !(target_gap >= F::zero() && target_gap < half_one::<F>()) {
            return Err(Error::input("target judge gap must lie in [0, 0.5)"));
        }
        let build = |kappa: F| -> Result<Self> {
            let rows = self
                .reward
                .r
                .iter()
                .zip(direction)
                .map(|(r, d)| r.iter().zip(d).map(|(a, b)| *a + kappa * *b).collect())
                .collect();
            let judge = JudgeSpec {
                kind: JudgeKind::MisalignedReward {
                    reward: RewardTable::from_rows(rows)?,
                },
                mc_comparisons: self.judge.mc_comparisons,
            };
            self.with_judge(judge)
        };
        let mut lo = F::zero();
        let mut hi = F::one();
        let mut grow = 0;
        while build(hi)?.mean_judge_gap() < target_gap {
            hi = hi + hi;
            grow += 1;
            if grow > 60 {
                return Err(Error::domain("tilt direction cannot reach the target gap"));
            }
        }
        for _ in 0..100 {
            let mid = (lo + hi) * cast(0.5);
            if build(mid)?.mean_judge_gap() < target_gap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let kappa = (lo + hi) * cast(0.5);
        Ok((build(kappa)?, kappa))
    }

    pub fn human_table(&self) -> PrefTable<F> {
        PrefTable::from_fn(&self.shape(), |x, a, b| self.human_pref_unchecked(x, a, b))
    }

    pub fn judge_table(&self) -> PrefTable<F> {
        PrefTable::from_fn(&self.shape(), |x, a, b| self.judge_pref_unchecked(x, a, b))
    }
}

fn half_one<F: Scalar>() -> F {
    cast(0.5)
}

/// `g(y1, y2 | x)` for the world's human preference.
pub fn human_pref_prob<F: Scalar>(world: &World<F>, x: usize, y1: usize, y2: usize) -> Result<F> {
    world.human_pref_prob(x, y1, y2)
}

/// `g̃(y1, y2 | x)` for the world's judge.
pub fn judge_pref_prob<F: Scalar>(world: &World<F>, x: usize, y1: usize, y2: usize) -> Result<F> {
    world.judge_pref_prob(x, y1, y2)
}

/// Dense preference probabilities `pref[x][y1][y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct PrefTable<F> {
    g: Vec<Vec<Vec<F>>>,
}

impl<F: Scalar> PrefTable<F> {
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize, usize, usize) -> F) -> Self {
        let g = shape
            .iter()
            .enumerate()
            .map(|(x, &k)| {
                (0..k)
                    .map(|a| (0..k).map(|b| f(x, a, b)).collect())
                    .collect()
            })
            .collect();
        Self { g }
    }

    /// Validates entries lie in `[0, 1]`.
    pub fn new(g: Vec<Vec<Vec<F>>>) -> Result<Self> {
        for (x, m) in g.iter().enumerate() {
            if m.is_empty() || m.iter().any(|row| row.len() != m.len()) {
                return Err(Error::input(format!("preference block of prompt {x} is not square")));
            }
            if m
                .iter()
                .flatten()
                .any(|v| !(*v >= F::zero() && *v <= F::one()))
            {
                return Err(Error::input(format!(
                    "preference probabilities of prompt {x} outside [0, 1]"
                )));
            }
        }
        Ok(Self { g })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.iter().map(Vec::len).collect()
    }

    /// Panics on out-of-range ids; use [`PrefTable::try_get`] for checked access.
    #[inline]
    pub fn get(&self, x: usize, y1: usize, y2: usize) -> F {
        self.g[x][y1][y2]
    }

    pub fn try_get(&self, x: usize, y1: usize, y2: usize) -> Result<F> {
        self.g
            .get(x)
            .and_then(|m| m.get(y1))
            .and_then(|r| r.get(y2))
            .copied()
            .ok_or_else(|| Error::input(format!("unknown triple ({x}, {y1}, {y2})")))
    }

    pub fn block(&self, x: usize) -> &[Vec<F>] {
        &self.g[x]
    }

    /// Largest `|g(a,b) + g(b,a) − 1|` over all triples.
    pub fn antisymmetry_defect(&self) -> F {
        let mut worst = F::zero();
        for m in &self.g {
            for (a, row) in m.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    worst = worst.max((*v + m[b][a] - F::one()).abs());
                }
            }
        }
        worst
    }

    /// `A(x, y) = Σ_{y'} reference(y'|x) · pref(y, y' | x)`.
    pub fn advantage_against(&self, reference: &PolicyTable<F>) -> Result<Vec<Vec<F>>> {
        if reference.shape() != self.shape() {
            return Err(Error::input("reference shape does not match preference table"));
        }
        Ok(self
            .g
            .iter()
            .zip(reference.rows())
            .map(|(m, q)| {
                m.iter()
                    .map(|row| row.iter().zip(q).map(|(g, p)| *g * *p).sum())
                    .collect()
            })
            .collect())
    }

    /// `Σ_{y,y'} π(y|x) π_ref(y'|x) pref(y, y'|x)` for one prompt.
    pub fn prompt_value(&self, x: usize, pi: &[F], reference: &[F]) -> F {
        let mut v = F::zero();
        for (a, pa) in pi.iter().enumerate() {
            if *pa == F::zero() {
                continue;
            }
            let row = &self.g[x][a];
            let inner: F = row.iter().zip(reference).map(|(g, q)| *g * *q).sum();
            v += *pa * inner;
        }
        v
    }

    /// Maps every entry through `f(x, y1, y2, value)`.
    pub fn map(&self, mut f: impl FnMut(usize, usize, usize, F) -> F) -> Self {
        let shape = self.shape();
        Self::from_fn(&shape, |x, a, b| f(x, a, b, self.g[x][a][b]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Human,
    Ai,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Ai => "ai",
        }
    }
}

/// One comparison `(x, y1, y2)` with its labels.
///
/// `z = Some(true)` means `y1` is preferred by the human. Human records
/// always carry both `z` and `z_hat`. AI records sampled by the simulator also
/// carry the latent human label in `z`; only the oracle-label baselines read
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub z: Option<bool>,
    pub z_hat: Option<bool>,
    pub source: Source,
}

impl PreferencePair {
    /// The same comparison with responses swapped and labels complemented.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.x,
            y1: self.y2,
            y2: self.y1,
            z: self.z.map(|b| !b),
            z_hat: self.z_hat.map(|b| !b),
            source: self.source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.source {
            Source::Human if self.z.is_none() => {
                Err(Error::input("human record without human label"))
            }
            Source::Ai if self.z_hat.is_none() => Err(Error::input("AI record without AI label")),
            _ => Ok(()),
        }
    }
}

/// Human-labeled and AI-labeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub human: Vec<PreferencePair>,
    pub ai: Vec<PreferencePair>,
}

impl DatasetPair {
    pub fn n(&self) -> usize {
        self.human.len()
    }

    #[allow(non_snake_case)]
    pub fn N(&self) -> usize {
        self.ai.len()
    }

    /// Checks sizes, labels, and (when `shape` is nonempty) id ranges.
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if self.human.is_empty() || self.ai.is_empty() {
            return Err(Error::input("datasets need n >= 1 and N >= 1"));
        }
        for p in self.human.iter().chain(&self.ai) {
            p.validate()?;
            if !shape.is_empty() {
                let k = shape
                    .get(p.x)
                    .ok_or_else(|| Error::input(format!("unknown prompt {}", p.x)))?;
                if p.y1 >= *k || p.y2 >= *k {
                    return Err(Error::input(format!("unknown responses in record {p:?}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
