use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use prefalign::bench::{
    build_world, config_digest, read_records_csv, report, run_experiment, sample_replicate, sweep, write_records_csv,
    write_sweep_csv, ExperimentConfig, SweepAxis, SCHEMA_VERSION,
};
use prefalign::ddpo::{one_hot_policy, train_ddpo, write_trace, LabelField, TrainConfig};
use prefalign::dipo::{
    p_dipo, p_dipo_plus, p_dm, p_hum, sample_prompts, train_dipo, write_dipo_trace, ClipBounds, EstimatorReport,
    EstimatorSetup, JudgeBackend, Residual,
};
use prefalign::oracle::{exact_pref_prob, Oracle};
use prefalign::policy::{closed_form_dpo_opt, Policy, PolicyTable};
use prefalign::rng::{derive_seed, rng_from_seed};
use prefalign::semipar::{efficiency_compare, fit_pref, EfficiencyOptions, PrefNuisance};
use prefalign::world::{write_dataset, World};
use prefalign::{Error, Result};

#[derive(Parser)]
#[command(name = "prefalign", version, about = "Debiased preference alignment on finite synthetic worlds")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replications (overrides `replications`).
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Worker threads for replicated runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateMethod {
    Dm,
    Dipo,
    #[value(name = "dipo+")]
    DipoPlus,
    Hum,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeMode {
    /// Judge probabilities in both the direct and the bias term.
    Scores,
    /// Judge probabilities in the direct term, recorded labels as residuals.
    Labels,
    /// Monte Carlo judge labels (`judge.m` draws) and recorded labels.
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Dpo,
    Ipo,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world and sample one replicate's datasets.
    Simulate,
    /// Train DDPO on one replicate and write its trace.
    TrainDdpo,
    /// Train DIPO on one replicate and write its trace.
    TrainDipo,
    /// Estimate P(π ≻ π_ref) from one replicate.
    Estimate {
        #[arg(long, value_enum)]
        method: EstimateMethod,
        /// Policy table CSV; defaults to the KL-regularized reward optimum.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// β of the default policy.
        #[arg(long, default_value_t = 2.0)]
        policy_beta: f64,
    },
    /// Replicated MSE comparison of DIPO and the human-only estimator.
    CompareEfficiency {
        #[arg(long)]
        n: usize,
        #[arg(long = "N")]
        big_n: usize,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, value_enum, default_value = "scores")]
        judge: JudgeMode,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        policy_beta: f64,
    },
    /// Exact regret of a policy, printed as JSON.
    Oracle {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        policy_beta: f64,
        #[arg(long, value_enum, default_value = "dpo")]
        kind: OracleKind,
    },
    /// Run the experiment for each value of one axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Summarize run records (running the experiment when none are given).
    Report {
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(r) = g.reps {
        c.replications = r;
    }
    c.validate()?;
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn policy_or_default(world: &World<f64>, path: &Option<PathBuf>, beta: f64) -> Result<PolicyTable<f64>> {
    match path {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let t = PolicyTable::read_records(f)?;
            if t.shape() != world.shape() {
                return Err(Error::Input(format!("policy {} does not match the world shape", p.display())));
            }
            Ok(t)
        }
        None => closed_form_dpo_opt(world, world.gen_ai(), beta),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(j) = g.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = load_config(g)?;
    let out = &g.out;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let digest = config.digest();
    match cli.command {
        Command::Simulate => {
            let world = build_world(&config)?;
            let rep = sample_replicate(&config, &world, config.seed)?;
            write_dataset(&rep.data, create(&out.join("dataset.csv"))?)?;
            write_json(
                &out.join("world.json"),
                &json!({"schema_version": SCHEMA_VERSION, "config_digest": digest, "world": world}),
            )?;
            fs::write(out.join("config.toml"), config.to_toml_string()?).map_err(|e| Error::Io {
                path: out.join("config.toml"),
                source: e,
            })?;
        }
        Command::TrainDdpo => {
            let world = build_world(&config)?;
            let rep = sample_replicate(&config, &world, config.seed)?;
            let reference = one_hot_policy(world.gen_ai())?;
            let train = TrainConfig {
                seed: derive_seed(config.seed, 7),
                ..config.train.clone()
            };
            let (policy, trace) = train_ddpo(&rep.data, &rep.weights, &reference, &train)?;
            write_trace(&trace, create(&out.join("trace.csv"))?)?;
            policy.table().write_records(create(&out.join("policy.csv"))?)?;
            let r = Oracle::new(&world).regret_dpo(&policy.table(), world.gen_ai(), train.beta)?;
            write_json(
                &out.join("summary.json"),
                &json!({"schema_version": SCHEMA_VERSION, "config_digest": digest, "regret": r}),
            )?;
        }
        Command::TrainDipo => {
            let world = build_world(&config)?;
            let rep = sample_replicate(&config, &world, config.seed)?;
            let reference = one_hot_policy(world.gen_ai())?;
            let train = TrainConfig {
                seed: derive_seed(config.seed, 7),
                ..config.dipo_train.clone()
            };
            let gen_hum = rep.gen_hum(config.protocol.mode, &world);
            let (policy, trace) = train_dipo(&world, &reference, &rep.data.human, gen_hum, &train, &config.dipo)?;
            write_dipo_trace(&trace, create(&out.join("trace.csv"))?)?;
            policy.table().write_records(create(&out.join("policy.csv"))?)?;
            let r = Oracle::new(&world).regret_ipo_regularized(&policy.table(), world.gen_ai(), train.beta)?;
            write_json(
                &out.join("summary.json"),
                &json!({"schema_version": SCHEMA_VERSION, "config_digest": digest, "regret": r}),
            )?;
        }
        Command::Estimate {
            method,
            policy,
            policy_beta,
        } => {
            let world = build_world(&config)?;
            let pi = policy_or_default(&world, &policy, policy_beta)?;
            let rep = sample_replicate(&config, &world, config.seed)?;
            let mut rng = rng_from_seed(derive_seed(config.seed, 2));
            let prompts = sample_prompts(&world, config.protocol.N, &mut rng);
            let setup = EstimatorSetup {
                gen_hum: rep.gen_hum(config.protocol.mode, &world),
                clip: ClipBounds::new(config.dipo_train.clip.0, config.dipo_train.clip.1)?,
                backend: config.dipo.backend,
                residual: config.dipo.residual,
                ..EstimatorSetup::new(&world)
            };
            let human = &rep.data.human;
            let hum = || -> Result<f64> {
                let fitted = fit_pref(human, &world.shape(), LabelField::Z, config.protocol.folds)?;
                p_hum(&pi, world.gen_ai(), human, setup.gen_hum, PrefNuisance::CrossFit(&fitted))
            };
            let (name, report) = match method {
                EstimateMethod::Dm => {
                    ("dm", p_dm(&pi, world.gen_ai(), &world, &prompts, setup.backend, config.seed)?)
                }
                EstimateMethod::Dipo => ("dipo", p_dipo(&pi, world.gen_ai(), &setup, &prompts, human, config.seed)?),
                EstimateMethod::DipoPlus => {
                    let base = p_dipo(&pi, world.gen_ai(), &setup, &prompts, human, config.seed)?;
                    ("dipo+", p_dipo_plus(&base, hum()?, config.dipo_plus_lambda)?)
                }
                EstimateMethod::Hum => {
                    let v = hum()?;
                    ("hum", EstimatorReport {
                        estimate: v,
                        direct_term: v,
                        bias_term: 0.0,
                        n_used: human.len(),
                        N_used: 0,
                        clipped_fraction: 0.0,
                    })
                }
            };
            let truth = exact_pref_prob(&pi, world.gen_ai(), &world)?;
            let record = json!({
                "schema_version": SCHEMA_VERSION,
                "method": name,
                "estimate": report.estimate,
                "direct_term": report.direct_term,
                "bias_term": report.bias_term,
                "clipped_fraction": report.clipped_fraction,
                "n_used": report.n_used,
                "N_used": report.N_used,
                "truth": truth,
                "seed": config.seed,
                "config_digest": digest,
            });
            write_json(&out.join("estimate.json"), &record)?;
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::CompareEfficiency {
            n,
            big_n,
            reps,
            judge,
            policy,
            policy_beta,
        } => {
            let world = build_world(&config)?;
            let pi = policy_or_default(&world, &policy, policy_beta)?;
            let (backend, residual) = match judge {
                JudgeMode::Scores => (JudgeBackend::Scores, Residual::JudgeScores),
                JudgeMode::Labels => (JudgeBackend::Scores, Residual::Labels),
                JudgeMode::Mc => (JudgeBackend::MonteCarlo { m: config.judge.m }, Residual::Labels),
            };
            let options = EfficiencyOptions {
                backend,
                residual,
                ..EfficiencyOptions::default()
            };
            let r = efficiency_compare(&pi, world.gen_ai(), &world, n, big_n, reps, config.seed, &options)?;
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "config_digest": config_digest(&(&config, n, big_n, reps)),
                "truth": r.truth,
                "n": r.n,
                "N": r.N,
                "reps": r.reps,
                "mse_dipo": r.dipo.mse,
                "mse_human_only": r.human_only.mse,
                "bias_dipo": r.dipo.bias,
                "bias_human_only": r.human_only.bias,
                "mse_diff_ci": r.mse_diff_ci,
                "dipo_wins": r.dipo_wins,
                "regime": r.regime,
                "warnings": r.warnings,
            });
            write_json(&out.join("efficiency.json"), &doc)?;
            println!("{}", serde_json::to_string(&doc)?);
        }
        Command::Oracle {
            policy,
            policy_beta,
            kind,
        } => {
            let world = build_world(&config)?;
            let pi = policy_or_default(&world, &policy, policy_beta)?;
            let o = Oracle::new(&world);
            let r = match kind {
                OracleKind::Dpo => o.regret_dpo(&pi, world.gen_ai(), config.train.beta)?,
                OracleKind::Ipo => o.regret_ipo(&pi, world.gen_ai())?,
            };
            let doc = json!({"value_opt": r.value_opt, "value_hat": r.value_hat, "regret": r.regret});
            write_json(&out.join("oracle.json"), &doc)?;
            println!("{}", serde_json::to_string(&doc)?);
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let rows = sweep(&config, axis, &values)?;
            write_sweep_csv(&rows, &out.join("sweep.csv"))?;
        }
        Command::Report { records } => {
            let recs = match records {
                Some(p) => read_records_csv(&p)?,
                None => {
                    let recs = run_experiment(&config)?;
                    write_records_csv(&recs, &out.join("records.csv"))?;
                    recs
                }
            };
            report(&recs, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
