use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use invint::harness::artifacts::{self, write_json_with_config};
use invint::harness::audit::{invariance_audit, random_audit, AuditReport};
use invint::harness::checkpoint;
use invint::harness::data::write_idx;
use invint::harness::gradcheck;
use invint::harness::train::{evaluate, prepare_data, select_for_backbone, train_phase_one, train_repeats, train_two_phase};
use invint::harness::{Dataset, TrainConfig};
use invint::monomial::apply_shift;
use invint::{Network, Tensor};

#[derive(Parser)]
#[command(name = "invint", version, about = "Invariant integration on C_N-equivariant features")]
struct Cli {
    /// Log level when RUST_LOG is unset (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, base: Option<TrainConfig>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => TrainConfig::from_file(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(invint::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training; writes a timestamped run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parent directory of run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Monomial selection on the features of a trained (or freshly trained)
    /// baseline backbone.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pooled or invariant checkpoint whose backbone is used; without it
        /// phase 1 is trained first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Test error of one or more checkpoints (one per repeat).
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Data config; defaults to the config embedded in the first model.
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the result as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run only these suites.
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// Relative change of invariant-layer and max-pool outputs under
    /// rotations of the feature maps.
    InvarianceAudit {
        #[arg(long, default_value_t = 20)]
        maps: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [15.0, 30.0, 45.0, 60.0, 75.0, 90.0])]
        angles: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Audit this invariant model on test images instead of random
        /// backbones.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file (JSON); the CSV table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the configured synthetic splits as IDX files.
    MakeData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_dir(parent: &Path, cfg: &TrainConfig) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = parent.join(format!("{stamp}-seed{}", cfg.seed));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn train(cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let data = prepare_data(cfg)?;
    let dir = run_dir(out, cfg)?;
    log::info!("run directory {}", dir.display());
    if cfg.repeats <= 1 {
        let outcome = train_two_phase(&data, cfg, Some(&dir))?;
        artifacts::write_run(&dir, &outcome, cfg)?;
        if let (Some(t), Some(b)) = (&outcome.metrics.test, &outcome.metrics.baseline_test) {
            log::info!("test error: invariant {:.2}%, baseline {:.2}%", t.mean, b.mean);
        }
    } else {
        for r in 0..cfg.repeats {
            let run_cfg = TrainConfig { seed: cfg.seed.wrapping_add(r as u64), repeats: 1, ..cfg.clone() };
            let sub = dir.join(format!("repeat{r}"));
            fs::create_dir_all(&sub)?;
            let outcome = train_two_phase(&data, &run_cfg, Some(&sub))?;
            artifacts::write_run(&sub, &outcome, &run_cfg)?;
        }
        let summary = train_repeats(&data, cfg, None)?;
        fs::write(dir.join(artifacts::METRICS), serde_json::to_string_pretty(&summary)?)?;
        log::info!(
            "test error over {} repeats: invariant {:.2} +- {:.2}%, baseline {:.2} +- {:.2}%",
            cfg.repeats,
            summary.test.mean,
            summary.test.std,
            summary.baseline_test.mean,
            summary.baseline_test.std
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn select(cfg: &TrainConfig, ckpt: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let data = prepare_data(cfg)?;
    let dir = run_dir(out, cfg)?;
    let backbone = match ckpt {
        Some(p) => checkpoint::load(p)?.0.backbone,
        None => {
            let (net, _) = train_phase_one(&data, cfg, Some(&dir))?;
            checkpoint::save(&dir.join(artifacts::BASELINE), &net, Some(cfg))?;
            net.backbone
        }
    };
    let (state, trace) = select_for_backbone(&backbone, &data, cfg)?;
    fs::write(dir.join(artifacts::CONFIG), cfg.to_kv())?;
    write_json_with_config(&dir.join(artifacts::MONOMIALS), cfg, "monomials", &state.monomials)?;
    write_json_with_config(&dir.join(artifacts::SELECTION_TRACE), cfg, "trace", &trace)?;
    write_json_with_config(&dir.join("iil_state.json"), cfg, "state", &state)?;
    log::info!(
        "selected {} monomials (val acc {:.3}, stop {:?})",
        state.num_monomials(),
        trace.best_accuracy,
        trace.stop_reason
    );
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    config: &'a TrainConfig,
    models: Vec<String>,
    test_error: invint::harness::TestSummary,
}

fn eval(models: &[PathBuf], args: &ConfigArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let mut nets = Vec::with_capacity(models.len());
    let mut embedded = None;
    for p in models {
        let (net, cfg) = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        embedded = embedded.or(cfg);
        nets.push(net);
    }
    let cfg = args.load(embedded)?;
    let data = prepare_data(&cfg)?;
    let record = EvalRecord {
        config: &cfg,
        models: models.iter().map(|p| p.display().to_string()).collect(),
        test_error: evaluate(&nets, &data.test)?,
    };
    let text = serde_json::to_string_pretty(&record)?;
    match out {
        Some(path) => fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gradcheck_cmd(cases: usize, seed: u64, suites: &[String]) -> anyhow::Result<ExitCode> {
    let reports = if suites.is_empty() {
        gradcheck::run_all(cases, seed)?
    } else {
        let mut out = Vec::new();
        for s in suites {
            match gradcheck::run_suite(s, cases, seed)? {
                Some(r) => out.push(r),
                None => {
                    return Err(invint::Error::Config(format!(
                        "unknown suite {s:?}; known: {}",
                        gradcheck::suite_names().join(", ")
                    ))
                    .into())
                }
            }
        }
        out
    };
    println!("suite,cases,entries,skipped,max_rel_error,tolerance,passed");
    for r in &reports {
        println!(
            "{},{},{},{},{:.3e},{:.0e},{}",
            r.name, r.cases, r.entries, r.skipped, r.max_rel_error, r.tolerance, r.passed
        );
    }
    Ok(if reports.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Serialize)]
struct AuditConfig {
    seed: u64,
    maps: usize,
    angles_deg: Vec<f64>,
    model: Option<String>,
    train: Option<TrainConfig>,
}

fn model_maps(net: &Network, test: &Dataset, maps: usize) -> anyhow::Result<Vec<Tensor>> {
    let Some(iil) = net.iil() else { bail!("invariance audit needs a model with an invariant head") };
    (0..maps.min(test.len()))
        .map(|i| {
            let (img, _) = test.gather(&[i]);
            Ok(apply_shift(&net.backbone.features(&img)?, &iil.shift)?)
        })
        .collect()
}

fn audit(
    maps: usize,
    angles: &[f64],
    seed: u64,
    model: Option<&Path>,
    args: &ConfigArgs,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let (report, train_cfg): (AuditReport, Option<TrainConfig>) = match model {
        None => (random_audit(seed, maps, angles)?, None),
        Some(p) => {
            let (net, embedded) = checkpoint::load(p)?;
            let cfg = args.load(embedded)?;
            let data = prepare_data(&cfg)?;
            let feature_maps = model_maps(&net, &data.test, maps)?;
            (invariance_audit(&feature_maps, net.iil().expect("checked above"), angles)?, Some(cfg))
        }
    };
    print!("{}", report.to_csv());
    if let Some(path) = out {
        let config = AuditConfig {
            seed,
            maps,
            angles_deg: angles.to_vec(),
            model: model.map(|p| p.display().to_string()),
            train: train_cfg,
        };
        let mut obj = serde_json::Map::new();
        obj.insert("config".into(), serde_json::to_value(&config)?);
        obj.insert("report".into(), serde_json::to_value(&report)?);
        fs::write(path, serde_json::to_string_pretty(&obj)?)?;
    }
    Ok(())
}

fn make_data(cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let splits = prepare_data(&TrainConfig { subset_fraction: 1.0, ..cfg.clone() })?;
    fs::create_dir_all(out)?;
    // validation goes last in the training file, where IDX loading takes it from
    let (tr, va) = (&splits.train, &splits.val);
    let mut data = tr.images.data().to_vec();
    data.extend_from_slice(va.images.data());
    let mut shape = tr.images.shape().to_vec();
    shape[0] += va.len();
    let mut labels = tr.labels.clone();
    labels.extend_from_slice(&va.labels);
    let train = Dataset::new(Tensor::new(shape, data)?, labels, tr.num_classes)?;
    write_idx(&train, &out.join("train-images-idx3-ubyte"), &out.join("train-labels-idx1-ubyte"))?;
    write_idx(&splits.test, &out.join("test-images-idx3-ubyte"), &out.join("test-labels-idx1-ubyte"))?;
    fs::write(out.join(artifacts::CONFIG), cfg.to_kv())?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => train(&config.load(None)?, &out)?,
        Command::Select { config, checkpoint, out } => select(&config.load(None)?, checkpoint.as_deref(), &out)?,
        Command::Eval { models, config, out } => eval(&models, &config, out.as_deref())?,
        Command::Gradcheck { cases, seed, suites } => return gradcheck_cmd(cases, seed, &suites),
        Command::InvarianceAudit { maps, angles, seed, model, config, out } => {
            audit(maps, &angles, seed, model.as_deref(), &config, out.as_deref())?
        }
        Command::MakeData { config, out } => make_data(&config.load(None)?, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<invint::Error>() {
                Some(invint::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
