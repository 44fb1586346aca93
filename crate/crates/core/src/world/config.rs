use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{JudgeKind, JudgeSpec, RewardTable, World};
use crate::error::{Error, Result};
use crate::policy::PolicyTable;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{cast, Scalar};

/// Shape and randomization of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub prompt_count: usize,
    pub responses_per_prompt: usize,
    /// Rewards are i.i.d. uniform on `[-reward_range, reward_range]`.
    pub reward_range: f64,
    /// `π_Gen^Hum ∝ (π_Gen^AI)^shift_temperature`; 1 means no shift.
    pub shift_temperature: f64,
    /// Generation logits are uniform on `[-gen_logit_range, gen_logit_range]`.
    pub gen_logit_range: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            prompt_count: 8,
            responses_per_prompt: 6,
            reward_range: 2.0,
            shift_temperature: 0.7,
            gen_logit_range: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKindConfig {
    Flip,
    Misaligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKindConfig,
    /// Flip rate of the flip channel.
    pub rho: f64,
    /// Monte Carlo draws per comparison.
    pub m: usize,
    /// Misaligned judge: `r̃ = r + noise·U[-1, 1]` per entry.
    pub noise: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            kind: JudgeKindConfig::Flip,
            rho: 0.4,
            m: 8,
            noise: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_count < 1 {
            return Err(Error::Config("world.prompt_count must be >= 1".into()));
        }
        if self.responses_per_prompt < 2 {
            return Err(Error::Config("world.responses_per_prompt must be >= 2".into()));
        }
        if !(self.reward_range.is_finite() && self.reward_range >= 0.0) {
            return Err(Error::Config("world.reward_range must be finite and >= 0".into()));
        }
        if !(self.shift_temperature.is_finite() && self.shift_temperature > 0.0) {
            return Err(Error::Config("world.shift_temperature must be positive".into()));
        }
        if !(self.gen_logit_range.is_finite() && self.gen_logit_range >= 0.0) {
            return Err(Error::Config("world.gen_logit_range must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Draws the world. Each component uses its own sub-stream of `seed`, so
    /// changing the judge does not move rewards or generators.
    pub fn build<F: Scalar>(&self, judge: &JudgeConfig) -> Result<World<F>> {
        self.validate()?;
        judge.validate()?;
        let (p, k) = (self.prompt_count, self.responses_per_prompt);
        let mut wr = rng_from_seed(derive_seed(self.seed, 10));
        let raw: Vec<f64> = (0..p).map(|_| wr.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<F> = raw.iter().map(|w| cast(w / total)).collect();
        // absorb rounding so the weights sum to one in F
        let sum_rest: F = weights[1..].iter().copied().sum();
        weights[0] = F::one() - sum_rest;

        let range = self.reward_range;
        let mut rr = rng_from_seed(derive_seed(self.seed, 11));
        let rewards: Vec<Vec<F>> = (0..p)
            .map(|_| (0..k).map(|_| cast(uniform(&mut rr, range))).collect())
            .collect();
        let reward = RewardTable::new(rewards, cast(range))?;

        let mut gr = rng_from_seed(derive_seed(self.seed, 12));
        let logits: Vec<Vec<F>> = (0..p)
            .map(|_| {
                (0..k)
                    .map(|_| cast(uniform(&mut gr, self.gen_logit_range)))
                    .collect()
            })
            .collect();
        let gen_ai = PolicyTable::from_logits(&logits)?;
        let gen_hum = gen_ai.tempered(cast(self.shift_temperature));

        let kind = match judge.kind {
            JudgeKindConfig::Flip => JudgeKind::FlipChannel { rho: cast(judge.rho) },
            JudgeKindConfig::Misaligned => {
                let mut jr = rng_from_seed(derive_seed(self.seed, 13));
                let rows = reward
                    .rows()
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|v| *v + cast(uniform(&mut jr, judge.noise)))
                            .collect()
                    })
                    .collect();
                JudgeKind::MisalignedReward {
                    reward: RewardTable::from_rows(rows)?,
                }
            }
        };
        let spec = JudgeSpec {
            kind,
            mc_comparisons: judge.m,
        };
        World::new(weights, reward, spec, gen_ai, gen_hum)
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("judge.rho = {} outside [0, 1]", self.rho)));
        }
        if self.m < 1 {
            return Err(Error::Config("judge.m must be >= 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("judge.noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.gen_range(-half_width..=half_width)
    }
}
