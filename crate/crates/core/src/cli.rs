//! Command-line surface: train, eval, ablate, ood, dump-embeddings.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::{AblationFlags, ConfigError, ExperimentConfig, StrategyName};
use crate::data::corrupt_gaussian;
use crate::eval::{self, DecisionRule};
use crate::federation::{self, Strategy};
use crate::model::Model;
use crate::specfun::{RngStream, StreamPurpose};

#[derive(Parser)]
#[command(
    name = "trfeddis",
    about = "Federated feature-disentangling simulator with evidential decision fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpointed models on the config's test splits.
    Eval {
        /// A client checkpoint file, or a directory of client*.ckpt files.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset index to pair with a single checkpoint file.
        #[arg(long, default_value_t = 0)]
        client: usize,
    },
    /// Run the ablation variants and print a summary table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: backbone,dis,dis+un,full (also fedavg,singleset).
        #[arg(long, default_value = "backbone,dis,dis+un,full")]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean-vs-corrupted uncertainty separation (AUROC).
    Ood {
        /// A client checkpoint file, or a directory of client*.ckpt files.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Gaussian corruption level.
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
        /// Seed for the corruption streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the uncertainty CSV.
        #[arg(long, default_value = "ood_uncertainty.csv")]
        out: PathBuf,
        /// Dataset index to pair with a single checkpoint file.
        #[arg(long, default_value_t = 0)]
        client: usize,
    },
    /// Dump encoder and head features for external projection.
    DumpEmbeddings {
        /// A client checkpoint file, or a directory of client*.ckpt files.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
        /// Dataset index to pair with a single checkpoint file.
        #[arg(long, default_value_t = 0)]
        client: usize,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    federation::FedError,
    crate::checkpoint::CheckpointError,
    crate::eval::EvalError,
    crate::model::ModelError,
    std::io::Error
);

/// Entry point used by the binary and by integration tests.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Eval {
            checkpoint,
            config,
            client,
        } => eval_cmd(&checkpoint, &config, client),
        Command::Ablate {
            config,
            variants,
            out,
        } => ablate(&config, &variants, out),
        Command::Ood {
            checkpoint,
            config,
            sigma,
            seed,
            out,
            client,
        } => ood(&checkpoint, &config, sigma, seed, &out, client),
        Command::DumpEmbeddings {
            checkpoint,
            config,
            out,
            client,
        } => dump_embeddings(&checkpoint, &config, &out, client),
    }
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = out {
        cfg.out_dir = Some(out);
    }
    let output = federation::run_experiment(&cfg)?;
    for run in &output.seeds {
        for report in &run.reports {
            let n = report.clients.len() as f64;
            let acc: f64 = report.clients.iter().map(|c| c.eval.acc_fused).sum::<f64>() / n;
            let loss: f64 = report.clients.iter().map(|c| c.train.l_total).sum::<f64>() / n;
            println!(
                "seed {} round {} acc {:.4} loss {:.4}",
                run.seed, report.round, acc, loss
            );
        }
    }
    print!("{}", federation::summary_csv(&output));
    if let Some(dir) = &cfg.out_dir {
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

/// Load (client index, model) pairs from a checkpoint file or directory.
fn load_checkpoints(
    path: &Path,
    cfg: &ExperimentConfig,
    single_client: usize,
) -> Result<Vec<(usize, Model<f32>)>, CliError> {
    if path.is_dir() {
        let mut found: Vec<(usize, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(path).map_err(|e| CliError::Runtime(e.to_string()))? {
            let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(idx) = name
                .strip_prefix("client")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                found.push((idx, entry.path()));
            }
        }
        if found.is_empty() {
            return Err(CliError::Runtime(format!(
                "no client*.ckpt files in {}",
                path.display()
            )));
        }
        found.sort_by_key(|(i, _)| *i);
        let mut out = Vec::with_capacity(found.len());
        for (i, p) in found {
            out.push((i, checkpoint::checkpoint_read(cfg.model.clone(), &p)?));
        }
        Ok(out)
    } else {
        Ok(vec![(
            single_client,
            checkpoint::checkpoint_read(cfg.model.clone(), path)?,
        )])
    }
}

fn decision_rule(cfg: &ExperimentConfig) -> DecisionRule {
    Strategy::from_config(cfg.strategy, cfg.ablation).decision_rule()
}

fn eval_cmd(checkpoint: &Path, config: &Path, client: usize) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let datasets = federation::build_datasets(&cfg)?;
    let models = load_checkpoints(checkpoint, &cfg, client)?;
    let rule = decision_rule(&cfg);
    println!("client,acc_fused,acc_global,acc_local,mean_u");
    let mut mean = 0.0;
    for (i, mut model) in models.iter().map(|(i, m)| (*i, m.clone())) {
        let ds = datasets
            .get(i)
            .ok_or_else(|| CliError::Runtime(format!("no dataset for client {i}")))?;
        let r = eval::evaluate(&mut model, ds.test(), rule, cfg.batch_size)?;
        println!(
            "{i},{},{},{},{}",
            r.acc_fused, r.acc_global, r.acc_local, r.mean_uncertainty
        );
        mean += r.acc_fused;
    }
    println!("mean acc_fused: {}", mean / models.len() as f64);
    Ok(())
}

/// Named ablation variants mapped onto strategy plus flags.
pub fn variant_config(base: &ExperimentConfig, name: &str) -> Option<ExperimentConfig> {
    let mut cfg = base.clone();
    match name {
        "backbone" => {
            cfg.strategy = StrategyName::FedBn;
        }
        "dis" => {
            cfg.strategy = StrategyName::TrFedDis;
            cfg.ablation = AblationFlags {
                dis: true,
                un: false,
                ce: false,
            };
        }
        "dis+un" => {
            cfg.strategy = StrategyName::TrFedDis;
            cfg.ablation = AblationFlags {
                dis: true,
                un: true,
                ce: false,
            };
        }
        "full" => {
            cfg.strategy = StrategyName::TrFedDis;
            cfg.ablation = AblationFlags {
                dis: true,
                un: true,
                ce: true,
            };
        }
        "fedavg" => {
            cfg.strategy = StrategyName::FedAvg;
        }
        "singleset" => {
            cfg.strategy = StrategyName::SingleSet;
        }
        _ => return None,
    }
    Some(cfg)
}

fn ablate(config: &Path, variants: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    let base = ExperimentConfig::load(config)?;
    let names: Vec<&str> = variants.split(',').map(str::trim).collect();
    for name in &names {
        if variant_config(&base, name).is_none() {
            return Err(CliError::Config(format!(
                "unknown ablation variant {name:?} (expected backbone, dis, dis+un, full, fedavg or singleset)"
            )));
        }
    }
    let mut table = Vec::new();
    for name in &names {
        let mut cfg = variant_config(&base, name).expect("validated above");
        cfg.out_dir = match (&out, &base.out_dir) {
            (Some(dir), _) => Some(dir.join(sanitize(name))),
            (None, Some(dir)) => Some(dir.join(sanitize(name))),
            (None, None) => None,
        };
        let output = federation::run_experiment(&cfg)?;
        let accs = output.final_accuracies();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / accs.len() as f64)
            .sqrt();
        println!("variant {name}: acc {mean:.4} (std {std:.4})");
        table.push(format!("{name},{mean},{std}"));
    }
    let summary = format!("variant,mean_acc,std_acc\n{}\n", table.join("\n"));
    print!("{summary}");
    let dir = out.or(base.out_dir);
    if let Some(dir) = dir {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        let p = dir.join("ablation_summary.csv");
        std::fs::write(&p, summary).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("summary written to {}", p.display());
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.replace('+', "_")
}

fn ood(
    checkpoint: &Path,
    config: &Path,
    sigma: f64,
    seed: u64,
    out: &Path,
    client: usize,
) -> Result<(), CliError> {
    if sigma < 0.0 {
        return Err(CliError::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let cfg = ExperimentConfig::load(config)?;
    let datasets = federation::build_datasets(&cfg)?;
    let models = load_checkpoints(checkpoint, &cfg, client)?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    let mut rows: Vec<(usize, &str, f64)> = Vec::new();
    for (i, mut model) in models.iter().map(|(i, m)| (*i, m.clone())) {
        let ds = datasets
            .get(i)
            .ok_or_else(|| CliError::Runtime(format!("no dataset for client {i}")))?;
        let r = eval::evaluate(&mut model, ds.test(), DecisionRule::FusedOpinion, cfg.batch_size)?;
        let mut rng = RngStream::derive(seed, StreamPurpose::Corrupt, i as u64);
        let (test_x, _) = ds.test().gather(&(0..ds.test().len()).collect::<Vec<_>>());
        let corrupted = corrupt_gaussian(&test_x, sigma, &mut rng);
        let noisy_u = eval::fused_uncertainties(&mut model, &corrupted, cfg.batch_size)?;
        for &u in &r.per_sample_u {
            rows.push((i, "clean", u));
        }
        for &u in &noisy_u {
            rows.push((i, "noisy", u));
        }
        clean.extend(r.per_sample_u);
        noisy.extend(noisy_u);
    }
    let auroc = eval::ood_separation(&clean, &noisy)?;
    let mut file = std::fs::File::create(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    eval::write_uncertainty_csv(&mut file, &rows)?;
    println!("AUROC: {auroc}");
    println!("uncertainties written to {}", out.display());
    Ok(())
}

fn dump_embeddings(
    checkpoint: &Path,
    config: &Path,
    out: &Path,
    client: usize,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let datasets = federation::build_datasets(&cfg)?;
    let models = load_checkpoints(checkpoint, &cfg, client)?;
    let mut file = std::fs::File::create(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut first = true;
    for (i, mut model) in models.iter().map(|(i, m)| (*i, m.clone())) {
        let ds = datasets
            .get(i)
            .ok_or_else(|| CliError::Runtime(format!("no dataset for client {i}")))?;
        if first {
            eval::dump_embeddings(&mut model, ds.test(), i, &mut file)?;
            first = false;
        } else {
            // append without repeating the header
            let mut buf = Vec::new();
            eval::dump_embeddings(&mut model, ds.test(), i, &mut buf)?;
            let text = String::from_utf8_lossy(&buf);
            for line in text.lines().skip(1) {
                use std::io::Write;
                writeln!(file, "{line}").map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
    }
    println!("embeddings written to {}", out.display());
    Ok(())
}
