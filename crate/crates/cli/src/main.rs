//! `ood`: train desk models, run latent-matching attacks, fit and apply OOD
//! detectors, and run or regenerate whole experiments.
//!
//! Exit status: 0 on success, 2 for configuration or input errors, 3 when
//! the numerics fail (divergence, non-finite values, failed attacks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_bigint::BigUint;
use num_traits::One;

use ood_core::attack::{ood_attack, AttackConfig, Latent, Logits, Norm};
use ood_core::combinatorics::{coverage_probability, SpaceSizes};
use ood_core::data::make_initial_ood;
use ood_core::detectors::{
    fit_gram, fit_mahalanobis, score_energy, score_gram, score_mahalanobis, score_max_softmax, score_odin,
    score_oe, DetectorScore, EnergyVariant, GramReference, MahalanobisStats,
};
use ood_core::harness::{load_named_dataset, regenerate_report, run_experiment, text_table, ExperimentConfig};
use ood_core::nn::{load_network, save_network, train_classifier, zoo, Container, Network, TrainConfig, TrainingMetadata};
use ood_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "ood", version, about = "Latent-matching OOD attacks and detector evaluation")]
struct Cli {
    /// Root directory for relative output paths.
    #[arg(long, env = "OOD_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// `digits` or `synthetic:<blobs|bars>`.
    #[arg(long, default_value = "digits")]
    dataset: String,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Seed for synthetic datasets.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and save a checkpoint.
    Train {
        #[arg(long, default_value = "cnn")]
        model: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack one test sample and save x_in, x_out and the loss trace.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Test-set index of the in-distribution sample.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// uniform_noise | checker | spiral | foreign:<blobs|bars|noise>
        #[arg(long, default_value = "uniform_noise")]
        init: String,
        /// latent | logits
        #[arg(long, default_value = "latent")]
        target: String,
        #[arg(long, default_value_t = 10.0)]
        epsilon: f64,
        #[arg(long, default_value = "l2")]
        norm: Norm,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        target_mape: Option<f64>,
        #[arg(long, default_value = "attack")]
        out: PathBuf,
    },
    /// Fit Mahalanobis statistics or Gram bounds on the training set.
    FitDetector {
        #[arg(long)]
        checkpoint: PathBuf,
        /// mahalanobis | gram
        #[arg(long)]
        detector: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        orders: usize,
        /// Test samples used to normalize Gram deviations.
        #[arg(long, default_value_t = 500)]
        held_out: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tensor files with one detector; prints `file,detector,score`.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// max_softmax | odin | oe | energy_logsumexp | energy_max_softmax |
        /// energy_grad_norm | mahalanobis | gram
        #[arg(long)]
        detector: String,
        /// Fitted statistics for mahalanobis / gram.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.0)]
        magnitude: f64,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run a full experiment from a TOML config.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate AUROC tables and figures from a run's persisted scores.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Probability that random throws cover every latent spot.
    CoverageProb {
        /// Number of latent spots |F| (decimal or `2^k`).
        #[arg(long)]
        spots: String,
        /// Number of thrown samples |Ω_out| (decimal or `2^k`).
        #[arg(long)]
        throws: String,
    },
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn parse_big(s: &str) -> Result<BigUint> {
    let bad = || Error::Config(format!("not a non-negative integer: {s:?}"));
    if let Some(exp) = s.strip_prefix("2^") {
        let e: u32 = exp.parse().map_err(|_| bad())?;
        return Ok(BigUint::one() << e);
    }
    s.parse().map_err(|_| bad())
}

fn load_classifier(path: &Path) -> Result<Network> {
    Ok(load_network(path)?.0)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&std::fs::read(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Train {
            model,
            data,
            epochs,
            batch_size,
            learning_rate,
            seed,
            out,
        } => {
            let spec = zoo::by_id(&model, seed)
                .filter(|_| model != "linear")
                .ok_or_else(|| Error::Config(format!("unknown classifier {model:?}")))?;
            let (train, test) = load_named_dataset(&data.dataset, &data.data_dir, data.data_seed)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                seed,
            };
            let mut net = Network::new(spec)?;
            let report = train_classifier(&mut net, &train, Some(&test), &cfg)?;
            let out = resolve(root, &out);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let meta = TrainingMetadata {
                dataset: data.dataset,
                seed,
                epochs,
                train_accuracy: Some(report.train_accuracy),
                test_accuracy: report.test_accuracy,
                notes: String::new(),
            };
            save_network(&out, &net, &meta)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {l:.4}", i + 1);
            }
            println!(
                "train accuracy {:.4}, test accuracy {:.4}",
                report.train_accuracy,
                report.test_accuracy.unwrap_or(f64::NAN)
            );
            println!("saved {}", out.display());
        }
        Command::Attack {
            checkpoint,
            data,
            sample,
            init,
            target,
            epsilon,
            norm,
            iterations,
            alpha,
            restarts,
            seed,
            target_mape,
            out,
        } => {
            let net = load_classifier(&checkpoint)?;
            let (_, test) = load_named_dataset(&data.dataset, &data.data_dir, data.data_seed)?;
            if sample >= test.len() {
                return Err(Error::Config(format!("sample {sample} beyond the {} test images", test.len())));
            }
            let x_in = test.image(sample);
            let kind = init.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let x_init = make_initial_ood(&kind, net.input_shape(), seed, None)?;
            let cfg = AttackConfig {
                alpha,
                restarts,
                seed,
                target_mape,
                ..AttackConfig::new(epsilon, norm, iterations)
            };
            let result = match target.as_str() {
                "latent" => ood_attack(&Latent(&net), x_in, &x_init, &cfg)?,
                "logits" => ood_attack(&Logits(&net), x_in, &x_init, &cfg)?,
                other => return Err(Error::Config(format!("unknown attack target {other:?}"))),
            };
            let dir = resolve(root, &out);
            let stem = format!("sample{sample}");
            result.save_artifacts(&dir, &stem, x_in)?;
            println!("loss {}", result.loss);
            match result.mape {
                Some(m) => println!("mape {:.6}%", 100.0 * m),
                None => println!("mape undefined (z_in is all zeros)"),
            }
            println!("slack {}", result.slack);
            println!("evaluations {}", result.trace.len());
            println!("saved {}/{stem}.{{in,out}}.otnsr and {stem}.trace.csv", dir.display());
        }
        Command::FitDetector {
            checkpoint,
            detector,
            data,
            orders,
            held_out,
            out,
        } => {
            let net = load_classifier(&checkpoint)?;
            let (train, test) = load_named_dataset(&data.dataset, &data.data_dir, data.data_seed)?;
            let container = match detector.as_str() {
                "mahalanobis" => {
                    let stats = fit_mahalanobis(&net, &train)?;
                    for (i, t) in stats.taps.iter().enumerate() {
                        println!("tap {i}: dim {}, ridge λ = {}", t.dim, t.lambda);
                    }
                    stats.to_container()
                }
                "gram" => {
                    let held = test.take(held_out);
                    let reference = fit_gram(&net, &train, &held, orders)?;
                    for (i, t) in reference.taps.iter().enumerate() {
                        println!("tap {i}: {} channels, normalizer {}", t.channels, t.normalizer);
                    }
                    reference.to_container()
                }
                other => return Err(Error::Config(format!("cannot fit detector {other:?}"))),
            };
            let out = resolve(root, &out);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            container.save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Score {
            checkpoint,
            detector,
            stats,
            temperature,
            magnitude,
            inputs,
        } => {
            let net = load_classifier(&checkpoint)?;
            let stats_container = || -> Result<Container> {
                let p = stats.as_ref().ok_or_else(|| Error::Config(format!("{detector} needs --stats")))?;
                Container::load(p)
            };
            enum Fitted {
                None,
                Mahalanobis(MahalanobisStats),
                Gram(GramReference),
            }
            let fitted = match detector.as_str() {
                "mahalanobis" => Fitted::Mahalanobis(MahalanobisStats::from_container(&stats_container()?)?),
                "gram" => Fitted::Gram(GramReference::from_container(&stats_container()?)?),
                _ => Fitted::None,
            };
            println!("file,detector,score");
            for path in &inputs {
                let x = read_tensor(path)?;
                let s: DetectorScore = match (detector.as_str(), &fitted) {
                    ("max_softmax", _) => score_max_softmax(&net.logits(&x)?)?,
                    ("oe", _) => score_oe(&net.logits(&x)?)?,
                    ("odin", _) => score_odin(&net, &x, temperature, magnitude)?,
                    ("energy_logsumexp", _) => score_energy(&net, &x, EnergyVariant::Logsumexp)?,
                    ("energy_max_softmax", _) => score_energy(&net, &x, EnergyVariant::MaxSoftmax)?,
                    ("energy_grad_norm", _) => score_energy(&net, &x, EnergyVariant::GradNorm)?,
                    (_, Fitted::Mahalanobis(st)) => score_mahalanobis(&net, st, &x, magnitude)?,
                    (_, Fitted::Gram(g)) => score_gram(&net, g, &x)?,
                    (other, Fitted::None) => return Err(Error::Config(format!("unknown detector {other:?}"))),
                };
                println!("{},{},{}", path.display(), s.detector, s.score);
            }
        }
        Command::Eval { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.output_dir = resolve(root, &cfg.output_dir);
            if let Some(m) = cfg.models_dir.take() {
                cfg.models_dir = Some(resolve(root, &m));
            }
            let run = run_experiment(&cfg)?;
            print!("{}", text_table(&run.report));
            println!("wall clock {:.1}s; artifacts in {}", run.report.wall_clock_seconds, cfg.output_dir.display());
        }
        Command::Report { dir } => {
            let dir = resolve(root, &dir);
            let report = regenerate_report(&dir)?;
            print!("{}", text_table(&report));
        }
        Command::CoverageProb { spots, throws } => {
            let sizes = SpaceSizes::new(parse_big(&spots)?, parse_big(&throws)?)
                .map_err(|e| Error::Config(e.to_string()))?;
            let c = coverage_probability(&sizes);
            match &c.exact {
                Some(r) => println!("exact {r}"),
                None => println!("exact (too large; asymptotic estimate below)"),
            }
            println!("probability {}", c.value);
            println!("ln probability {}", c.ln_value);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
