//! Replicated experiments: configuration, runs, sweeps and summaries.
//!
//! Experiments run in `f64`. Every replicate draws its data from
//! `seed ⊕ replicate`, trains each configured method on the same data and
//! scores the result with the exact oracle, so records are paired across
//! methods by replicate id.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpo::{
    estimate_gen_hum, exact_weights, one_hot_policy, train_ddpo, train_objective, GenHumEstimate, LabelField,
    Objective, RatioWeight, TrainConfig,
};
use crate::dipo::{train_dipo, train_sampled_ipo, DipoOptions, GenHum};
use crate::error::{Error, Result};
use crate::oracle::{Oracle, RegretKind, DEFAULT_ENUMERATION_BUDGET};
use crate::policy::{LogLinearPolicy, Policy};
use crate::rng::{derive_seed, replicate_seed};
use crate::stats::{paired_win_rate, summarize};
use crate::world::{
    sample_dataset, sample_protocol, DatasetPair, JudgeConfig, JudgeKindConfig, JudgeSpec, PreferencePair, World,
    WorldConfig,
};

/// Version tag written into every JSON output.
pub const SCHEMA_VERSION: u32 = 1;

/// Name of the metric reported in summaries.
pub const METRIC: &str = "exact oracle regret (synthetic stand-in for judge win rates)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DpoNaive,
    DpoOracleLabels,
    Ddpo,
    IpoNaive,
    IpoOracleLabels,
    Dipo,
    DipoPlus,
    SampledIpo,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::DpoNaive,
        Method::DpoOracleLabels,
        Method::Ddpo,
        Method::IpoNaive,
        Method::IpoOracleLabels,
        Method::Dipo,
        Method::DipoPlus,
        Method::SampledIpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DpoNaive => "dpo_naive",
            Method::DpoOracleLabels => "dpo_oracle_labels",
            Method::Ddpo => "ddpo",
            Method::IpoNaive => "ipo_naive",
            Method::IpoOracleLabels => "ipo_oracle_labels",
            Method::Dipo => "dipo",
            Method::DipoPlus => "dipo_plus",
            Method::SampledIpo => "sampled_ipo",
        }
    }

    /// Regret the method is scored with.
    pub fn regret_kind(self) -> RegretKind {
        match self {
            Method::DpoNaive | Method::DpoOracleLabels | Method::Ddpo => RegretKind::DpoReward,
            _ => RegretKind::IpoPref,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// `N` judge-labeled pairs from `π_Gen^AI`; a `human_fraction` subset is
    /// re-annotated by humans. Human and AI generators coincide, so `w ≡ 1`.
    Flip,
    /// Separate human draw from `π_Gen^Hum`, both labels on every record.
    Heterogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Exact,
    /// Cross-fitted estimate of `π_Gen^Hum` with `protocol.folds` folds.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    /// Human set size. In flip mode it must equal `round(human_fraction·N)`
    /// when given; in heterogeneous mode it defaults to that value.
    pub n: Option<usize>,
    pub N: usize,
    pub human_fraction: f64,
    /// Density ratios in heterogeneous mode (flip mode always uses `w ≡ 1`).
    pub weights: WeightMode,
    pub folds: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::Flip,
            n: None,
            N: 10_000,
            human_fraction: 0.2,
            weights: WeightMode::Exact,
            folds: 5,
        }
    }
}

impl ProtocolConfig {
    /// Human set size implied by the configuration.
    pub fn human_count(&self) -> usize {
        self.n
            .unwrap_or_else(|| (self.human_fraction * self.N as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.human_fraction) {
            return Err(Error::Config(format!(
                "protocol.human_fraction = {} outside [0, 1]",
                self.human_fraction
            )));
        }
        if self.N < 1 {
            return Err(Error::Config("protocol.N must be >= 1".into()));
        }
        let implied = (self.human_fraction * self.N as f64).round() as usize;
        if self.mode == ProtocolMode::Flip {
            if let Some(n) = self.n {
                if n != implied {
                    return Err(Error::Config(format!(
                        "protocol.n = {n} disagrees with round(human_fraction·N) = {implied}"
                    )));
                }
            }
        }
        if self.human_count() < 1 {
            return Err(Error::Config("protocol needs at least one human record".into()));
        }
        if self.weights == WeightMode::Estimated {
            if self.folds < 2 {
                return Err(Error::Config("protocol.folds must be >= 2".into()));
            }
            if self.human_count() < self.folds {
                return Err(Error::Config("fewer human records than cross-fitting folds".into()));
            }
        }
        Ok(())
    }
}

/// One experiment: a world, a data protocol, trainer settings and methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub judge: JudgeConfig,
    /// DPO-family trainers.
    pub train: TrainConfig,
    /// IPO-family trainers (naive IPO, DIPO, DIPO+, Sampled IPO).
    pub dipo_train: TrainConfig,
    /// DIPO options; `debias` and `lambda` are set per method.
    pub dipo: DipoOptions,
    /// Weight of the human-only term for `dipo_plus`.
    pub dipo_plus_lambda: f64,
    pub protocol: ProtocolConfig,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            judge: JudgeConfig::default(),
            train: TrainConfig::default(),
            dipo_train: TrainConfig::dipo_default(),
            dipo: DipoOptions::default(),
            dipo_plus_lambda: 1.0,
            protocol: ProtocolConfig::default(),
            methods: vec![Method::DpoNaive, Method::DpoOracleLabels, Method::Ddpo],
            replications: 200,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every field; nothing runs on an invalid configuration.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.judge.validate()?;
        self.train.validate()?;
        self.dipo_train.validate()?;
        self.protocol.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if !(self.dipo_plus_lambda.is_finite() && self.dipo_plus_lambda >= 0.0) {
            return Err(Error::Config("dipo_plus_lambda must be finite and >= 0".into()));
        }
        let k = self.world.responses_per_prompt;
        let triples = self.world.prompt_count * k * k;
        if triples > DEFAULT_ENUMERATION_BUDGET {
            return Err(Error::Budget {
                needed: triples,
                budget: DEFAULT_ENUMERATION_BUDGET,
            });
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration's canonical JSON (object keys sorted).
    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// Hex SHA-256 of the canonical JSON form of any serializable value.
///
/// `serde_json::Value` keeps object keys sorted, so field or key order in the
/// source does not affect the digest.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes to JSON");
    let s = serde_json::to_string(&v).expect("JSON value serializes");
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub replicate: u64,
    pub seed: u64,
    pub regret: Option<f64>,
    pub kind: Option<RegretKind>,
    /// Gap in the β-regularized objective.
    pub regularized_gap: Option<f64>,
    /// Exact `P(π ≻ π_ref)` of the trained policy.
    pub pref_prob: Option<f64>,
    /// Last training objective (minibatch value for sampled trainers).
    pub final_objective: Option<f64>,
    pub wall_time_ms: f64,
    pub config_digest: String,
    /// Diagnostic of an aborted run.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.regret.is_some()
    }
}

/// Data of one replicate, shared by every method.
pub struct Replicate {
    pub data: DatasetPair,
    pub weights: Vec<RatioWeight<f64>>,
    pub gen_hum_estimate: Option<GenHumEstimate<f64>>,
}

impl Replicate {
    /// Human generation policy the ratios of this replicate use.
    pub fn gen_hum<'a>(&'a self, mode: ProtocolMode, world: &'a World<f64>) -> GenHum<'a, f64> {
        match (&self.gen_hum_estimate, mode) {
            (Some(e), _) => GenHum::CrossFit(e),
            (None, ProtocolMode::Flip) => GenHum::Table(world.gen_ai()),
            (None, ProtocolMode::Heterogeneous) => GenHum::Table(world.gen_hum()),
        }
    }
}

/// Builds the world of an experiment.
pub fn build_world(config: &ExperimentConfig) -> Result<World<f64>> {
    config.world.build(&config.judge)
}

/// Draws the datasets and density ratios of replicate `seed`.
pub fn sample_replicate(config: &ExperimentConfig, world: &World<f64>, seed: u64) -> Result<Replicate> {
    let p = &config.protocol;
    match p.mode {
        ProtocolMode::Flip => {
            let data = sample_protocol(world, p.N, p.human_fraction, seed)?;
            let weights = vec![RatioWeight::unit(); data.human.len()];
            Ok(Replicate {
                data,
                weights,
                gen_hum_estimate: None,
            })
        }
        ProtocolMode::Heterogeneous => {
            let data = sample_dataset(world, p.human_count(), p.N, seed)?;
            match p.weights {
                WeightMode::Exact => {
                    let weights = exact_weights(world, &data.human)?;
                    Ok(Replicate {
                        data,
                        weights,
                        gen_hum_estimate: None,
                    })
                }
                WeightMode::Estimated => {
                    let est = estimate_gen_hum(&data.human, &world.shape(), p.folds)?;
                    let weights = est.weights(world.gen_ai(), &data.human)?;
                    Ok(Replicate {
                        data,
                        weights,
                        gen_hum_estimate: Some(est),
                    })
                }
            }
        }
    }
}

fn union(data: &DatasetPair) -> Vec<PreferencePair> {
    data.ai.iter().chain(&data.human).copied().collect()
}

/// Trains `method` on one replicate; returns the policy and last objective.
pub fn train_method(
    method: Method,
    config: &ExperimentConfig,
    world: &World<f64>,
    rep: &Replicate,
    train_seed: u64,
) -> Result<(LogLinearPolicy<f64>, Option<f64>)> {
    let reference = one_hot_policy(world.gen_ai())?;
    let train = TrainConfig {
        seed: train_seed,
        ..config.train.clone()
    };
    let dipo_train = TrainConfig {
        seed: train_seed,
        ..config.dipo_train.clone()
    };
    let gen_hum = rep.gen_hum(config.protocol.mode, world);
    let dpo = |obj: Objective<f64>| -> Result<(LogLinearPolicy<f64>, Option<f64>)> {
        let (p, trace) = train_objective(&obj, &reference, &reference, &train)?;
        Ok((p, trace.last().map(|r| r.total)))
    };
    let ipo = |w: &World<f64>, debias: bool, lambda: f64| -> Result<(LogLinearPolicy<f64>, Option<f64>)> {
        let options = DipoOptions {
            debias,
            lambda,
            ..config.dipo.clone()
        };
        let (p, trace) = train_dipo(w, &reference, &rep.data.human, gen_hum, &dipo_train, &options)?;
        Ok((p, trace.last().map(|r| r.objective)))
    };
    match method {
        Method::DpoNaive => dpo(Objective::dpo(&union(&rep.data), LabelField::ZHat, train.beta)?),
        Method::DpoOracleLabels => dpo(Objective::dpo(&rep.data.ai, LabelField::Z, train.beta)?),
        Method::Ddpo => {
            let (p, trace) = train_ddpo(&rep.data, &rep.weights, &reference, &train)?;
            Ok((p, trace.last().map(|r| r.total)))
        }
        Method::IpoNaive => ipo(world, false, 0.0),
        Method::IpoOracleLabels => ipo(&world.with_judge(JudgeSpec::flip(0.0)?)?, false, 0.0),
        Method::Dipo => ipo(world, true, 0.0),
        Method::DipoPlus => ipo(world, true, config.dipo_plus_lambda),
        Method::SampledIpo => {
            let (p, losses) = train_sampled_ipo(
                &union(&rep.data),
                LabelField::ZHat,
                &reference,
                world.gen_ai(),
                &dipo_train,
            )?;
            Ok((p, losses.last().copied()))
        }
    }
}

struct Scored {
    regret: f64,
    kind: RegretKind,
    gap: Option<f64>,
    pref_prob: f64,
}

fn score(method: Method, config: &ExperimentConfig, world: &World<f64>, policy: &LogLinearPolicy<f64>) -> Result<Scored> {
    let oracle = Oracle::new(world);
    let table = policy.table();
    let report = match method.regret_kind() {
        RegretKind::DpoReward => oracle.regret_dpo(&table, world.gen_ai(), config.train.beta)?,
        RegretKind::IpoPref => oracle.regret_ipo_regularized(&table, world.gen_ai(), config.dipo_train.beta)?,
    };
    Ok(Scored {
        regret: report.regret,
        kind: report.kind,
        gap: report.regularized.map(|g| g.gap),
        pref_prob: oracle.pref_prob(&table, world.gen_ai())?,
    })
}

fn run_replicate(config: &ExperimentConfig, world: &World<f64>, digest: &str, rep_id: u64) -> Vec<RunRecord> {
    let seed = replicate_seed(config.seed, rep_id);
    let aborted = |method: Method, err: &Error, ms: f64| RunRecord {
        method,
        replicate: rep_id,
        seed,
        regret: None,
        kind: None,
        regularized_gap: None,
        pref_prob: None,
        final_objective: None,
        wall_time_ms: ms,
        config_digest: digest.to_string(),
        error: Some(err.to_string()),
    };
    let start = Instant::now();
    let rep = match sample_replicate(config, world, seed) {
        Ok(r) => r,
        Err(e) => {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            return config.methods.iter().map(|&m| aborted(m, &e, ms)).collect();
        }
    };
    config
        .methods
        .iter()
        .map(|&method| {
            let t = Instant::now();
            let out = train_method(method, config, world, &rep, derive_seed(seed, 7))
                .and_then(|(p, obj)| Ok((score(method, config, world, &p)?, obj)));
            let ms = t.elapsed().as_secs_f64() * 1e3;
            match out {
                Ok((s, obj)) => RunRecord {
                    method,
                    replicate: rep_id,
                    seed,
                    regret: Some(s.regret),
                    kind: Some(s.kind),
                    regularized_gap: s.gap,
                    pref_prob: Some(s.pref_prob),
                    final_objective: obj,
                    wall_time_ms: ms,
                    config_digest: digest.to_string(),
                    error: None,
                },
                Err(e) => aborted(method, &e, ms),
            }
        })
        .collect()
}

/// Runs every replicate and method. Output order is replicate-major in the
/// configured method order, whatever order the work pool finishes in.
///
/// A failing run is recorded with its diagnostic and the others continue.
/// Only an invalid configuration or world is an error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let world = build_world(config)?;
    let digest = config.digest();
    let per_rep: Vec<Vec<RunRecord>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| run_replicate(config, &world, &digest, r))
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

/// Runs one replicate only (as `run_experiment` would for replicate `rep`).
pub fn run_single(config: &ExperimentConfig, rep: u64) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let world = build_world(config)?;
    Ok(run_replicate(config, &world, &config.digest(), rep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Human set size (flip mode moves `human_fraction` to `n / N`).
    #[serde(rename = "n")]
    SmallN,
    /// AI set size.
    #[serde(rename = "N")]
    LargeN,
    /// Flip rate of the judge.
    Rho,
    /// KL weight of every trainer.
    Beta,
    /// Generator shift temperature.
    Shift,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::SmallN => "n",
            SweepAxis::LargeN => "N",
            SweepAxis::Rho => "rho",
            SweepAxis::Beta => "beta",
            SweepAxis::Shift => "shift",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let count = || -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::input(format!("{} must be a positive integer, got {value}", self.as_str())));
            }
            Ok(value as usize)
        };
        match self {
            SweepAxis::SmallN => {
                let n = count()?;
                if c.protocol.mode == ProtocolMode::Flip {
                    c.protocol.human_fraction = n as f64 / c.protocol.N as f64;
                }
                c.protocol.n = Some(n);
            }
            SweepAxis::LargeN => {
                c.protocol.N = count()?;
                if c.protocol.mode == ProtocolMode::Flip {
                    c.protocol.n = None;
                }
            }
            SweepAxis::Rho => {
                if c.judge.kind != JudgeKindConfig::Flip {
                    return Err(Error::input("the rho axis needs a flip-channel judge"));
                }
                c.judge.rho = value;
            }
            SweepAxis::Beta => {
                c.train.beta = value;
                c.dipo_train.beta = value;
            }
            SweepAxis::Shift => c.world.shift_temperature = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepAxis::SmallN),
            "N" => Ok(SweepAxis::LargeN),
            "rho" => Ok(SweepAxis::Rho),
            "beta" => Ok(SweepAxis::Beta),
            "shift" => Ok(SweepAxis::Shift),
            _ => Err(Error::input(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// One cell of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub method: Method,
    /// Mean regret over successful runs.
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub reps: usize,
    pub failed: usize,
    pub mean_pref_prob: Option<f64>,
}

/// Per-method mean and SE of regret for each value of `axis`.
///
/// `values` must be nonempty and strictly increasing.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::input("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::input("sweep values must be strictly increasing"));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&value, cfg) in values.iter().zip(&configs) {
        let records = run_experiment(cfg)?;
        for method in &cfg.methods {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == *method).collect();
            let regrets: Vec<f64> = mine.iter().filter_map(|r| r.regret).collect();
            let prefs: Vec<f64> = mine.iter().filter_map(|r| r.pref_prob).collect();
            let s = summarize(&regrets);
            rows.push(SweepRow {
                axis: axis.as_str().to_string(),
                value,
                method: *method,
                mean: s.map(|s| s.mean),
                se: s.and_then(|s| s.se),
                reps: regrets.len(),
                failed: mine.len() - regrets.len(),
                mean_pref_prob: summarize(&prefs).map(|s| s.mean),
            });
        }
    }
    Ok(rows)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_file(path, &csv_bytes(rows)?)
}

pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    write_file(path, &csv_bytes(records)?)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{other:?}")),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per-method statistics of a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Absent for fewer than two successful runs.
    pub se: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean_pref_prob: Option<f64>,
}

/// Share of replicates where `method` has lower regret than `against`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub method: Method,
    pub against: Method,
    /// Ties count one half; absent without paired replicates.
    pub rate: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub metric: String,
    pub methods: Vec<MethodSummary>,
    pub win_rates: Vec<WinRate>,
}

fn regrets_by_replicate(records: &[RunRecord], method: Method) -> BTreeMap<u64, f64> {
    records
        .iter()
        .filter(|r| r.method == method && r.ok())
        .filter_map(|r| r.regret.map(|v| (r.replicate, v)))
        .collect()
}

/// Paired win rate of `a` over `b` on the replicates where both succeeded.
pub fn method_win_rate(records: &[RunRecord], a: Method, b: Method) -> (Option<f64>, usize) {
    let ra = regrets_by_replicate(records, a);
    let rb = regrets_by_replicate(records, b);
    let (xs, ys): (Vec<f64>, Vec<f64>) = ra
        .iter()
        .filter_map(|(k, v)| rb.get(k).map(|w| (*v, *w)))
        .unzip();
    (paired_win_rate(&xs, &ys), xs.len())
}

/// Aggregates records without writing anything.
pub fn summarize_records(records: &[RunRecord]) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(Error::input("report needs at least one record"));
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let summaries = methods
        .iter()
        .map(|&m| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
            let regrets: Vec<f64> = mine.iter().filter(|r| r.ok()).filter_map(|r| r.regret).collect();
            let prefs: Vec<f64> = mine.iter().filter(|r| r.ok()).filter_map(|r| r.pref_prob).collect();
            let s = summarize(&regrets);
            MethodSummary {
                method: m,
                runs: mine.len(),
                failed: mine.len() - regrets.len(),
                mean: s.map(|s| s.mean),
                se: s.and_then(|s| s.se),
                min: s.map(|s| s.min),
                max: s.map(|s| s.max),
                mean_pref_prob: summarize(&prefs).map(|s| s.mean),
            }
        })
        .collect();
    let mut win_rates = Vec::new();
    for &a in &methods {
        for &b in &methods {
            let (rate, pairs) = method_win_rate(records, a, b);
            win_rates.push(WinRate {
                method: a,
                against: b,
                rate,
                pairs,
            });
        }
    }
    Ok(ReportSummary {
        schema_version: SCHEMA_VERSION,
        metric: METRIC.to_string(),
        methods: summaries,
        win_rates,
    })
}

/// Writes `summary.csv` and `summary.json` into `out_dir`. Identical records
/// give byte-identical files.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<ReportSummary> {
    let summary = summarize_records(records)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("summary.csv"), &csv_bytes(&summary.methods)?)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&out_dir.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}
