use rand::seq::index;
use rand::Rng;

use super::{DatasetPair, JudgeKind, PreferencePair, Source, World};
use crate::error::{Error, Result};
use crate::rng::{bernoulli, cdf_of, derive_seed, rng_from_seed, sample_cdf, StdRng};
use crate::scalar::{from_usize, Scalar};

/// Precomputed CDFs for fast repeated draws from one world.
#[derive(Debug, Clone)]
pub struct Sampler<'a, F> {
    world: &'a World<F>,
    prompt_cdf: Vec<f64>,
    ai_cdf: Vec<Vec<f64>>,
    hum_cdf: Vec<Vec<f64>>,
}

impl<'a, F: Scalar> Sampler<'a, F> {
    pub fn new(world: &'a World<F>) -> Self {
        Self {
            world,
            prompt_cdf: cdf_of(world.prompt_weights()),
            ai_cdf: world.gen_ai().rows().iter().map(|r| cdf_of(r)).collect(),
            hum_cdf: world.gen_hum().rows().iter().map(|r| cdf_of(r)).collect(),
        }
    }

    pub fn world(&self) -> &World<F> {
        self.world
    }

    pub fn prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_cdf(&self.prompt_cdf, rng)
    }

    pub fn response<R: Rng + ?Sized>(&self, source: Source, x: usize, rng: &mut R) -> usize {
        match source {
            Source::Ai => sample_cdf(&self.ai_cdf[x], rng),
            Source::Human => sample_cdf(&self.hum_cdf[x], rng),
        }
    }

    /// `Z ~ Bernoulli(g(y1, y2 | x))`.
    pub fn human_label<R: Rng + ?Sized>(&self, x: usize, y1: usize, y2: usize, rng: &mut R) -> bool {
        bernoulli(self.world.human_pref_unchecked(x, y1, y2), rng)
    }

    /// Judge label on the triple. The flip channel flips `z`; a misaligned
    /// reward judge draws independently from `g̃`.
    pub fn judge_label<R: Rng + ?Sized>(
        &self,
        x: usize,
        y1: usize,
        y2: usize,
        z: bool,
        rng: &mut R,
    ) -> bool {
        match &self.world.judge().kind {
            JudgeKind::FlipChannel { rho } => z ^ bernoulli(*rho, rng),
            JudgeKind::MisalignedReward { .. } => {
                bernoulli(self.world.judge_pref_unchecked(x, y1, y2), rng)
            }
        }
    }

    /// One fully labeled record with `(y1, y2)` drawn from the generator of
    /// `source`.
    pub fn record<R: Rng + ?Sized>(&self, source: Source, rng: &mut R) -> PreferencePair {
        let x = self.prompt(rng);
        let y1 = self.response(source, x, rng);
        let y2 = self.response(source, x, rng);
        let z = self.human_label(x, y1, y2, rng);
        let z_hat = self.judge_label(x, y1, y2, z, rng);
        PreferencePair {
            x,
            y1,
            y2,
            z: Some(z),
            z_hat: Some(z_hat),
            source,
        }
    }

    pub fn records(&self, source: Source, count: usize, rng: &mut StdRng) -> Vec<PreferencePair> {
        (0..count).map(|_| self.record(source, rng)).collect()
    }
}

/// Heterogeneous-generator datasets: `n` human records from `π_Gen^Hum` and
/// `N` AI records from `π_Gen^AI`, every record labeled by both annotators.
#[allow(non_snake_case)]
pub fn sample_dataset<F: Scalar>(world: &World<F>, n: usize, N: usize, seed: u64) -> Result<DatasetPair> {
    if n < 1 || N < 1 {
        return Err(Error::input(format!("dataset sizes must be positive, got n={n}, N={N}")));
    }
    let sampler = Sampler::new(world);
    let mut hr = rng_from_seed(derive_seed(seed, 1));
    let mut ar = rng_from_seed(derive_seed(seed, 2));
    Ok(DatasetPair {
        human: sampler.records(Source::Human, n, &mut hr),
        ai: sampler.records(Source::Ai, N, &mut ar),
    })
}

/// Relabeling protocol: `N` pairs from `π_Gen^AI` labeled by the judge, of
/// which `round(human_fraction·N)` chosen uniformly without replacement are
/// re-annotated by humans and copied into the human set.
#[allow(non_snake_case)]
pub fn sample_protocol<F: Scalar>(
    world: &World<F>,
    N: usize,
    human_fraction: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if !(0.0..=1.0).contains(&human_fraction) {
        return Err(Error::input(format!("human fraction {human_fraction} outside [0, 1]")));
    }
    let n = (human_fraction * N as f64).round() as usize;
    if N < 1 || n < 1 {
        return Err(Error::input(format!(
            "protocol needs N >= 1 and at least one re-annotated pair (N={N}, fraction={human_fraction})"
        )));
    }
    let sampler = Sampler::new(world);
    let mut ar = rng_from_seed(derive_seed(seed, 2));
    let ai = sampler.records(Source::Ai, N, &mut ar);
    let mut sr = rng_from_seed(derive_seed(seed, 3));
    let mut picked = index::sample(&mut sr, N, n).into_vec();
    picked.sort_unstable();
    let human = picked
        .into_iter()
        .map(|i| PreferencePair {
            source: Source::Human,
            ..ai[i]
        })
        .collect();
    Ok(DatasetPair { human, ai })
}

/// Fraction of `m` judge draws preferring `y1`.
pub fn mc_judge_label<F: Scalar>(
    world: &World<F>,
    x: usize,
    y1: usize,
    y2: usize,
    m: usize,
    seed: u64,
) -> Result<F> {
    let mut rng = rng_from_seed(seed);
    mc_judge_label_with(world, x, y1, y2, m, &mut rng)
}

pub(crate) fn mc_judge_label_with<F: Scalar, R: Rng + ?Sized>(
    world: &World<F>,
    x: usize,
    y1: usize,
    y2: usize,
    m: usize,
    rng: &mut R,
) -> Result<F> {
    if m < 1 {
        return Err(Error::input("Monte Carlo judge needs m >= 1"));
    }
    let p = world.judge_pref_prob(x, y1, y2)?;
    let wins = (0..m).filter(|_| bernoulli(p, rng)).count();
    Ok(from_usize::<F>(wins) / from_usize(m))
}
