//! One experiment: prepare models, attack every in-distribution sample,
//! score both populations and assemble the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::attack::{ood_attack_many, AttackResult, FeatureMap, Latent, Logits};
use crate::data::{load_idx, make_initial_ood, make_synthetic, Dataset, DistanceGuard, SyntheticSpec};
use crate::detectors::{
    self, fit_gram, fit_mahalanobis, score_energy, score_ensemble_entropy, score_gram, score_mahalanobis,
    score_max_softmax, score_odin, score_oe, score_reconstruction, DetectorScore, EnergyVariant,
    EnsembleLogits, GramReference, GramScore, MahalanobisStats, OdinLogits,
};
use crate::error::{Error, Result};
use crate::metrics::{ScoreRow, Side};
use crate::nn::{
    load_network, save_network, train_autoencoder, train_classifier, zoo, Network, NetworkSpec, TrainConfig,
    TrainingMetadata,
};
use crate::tensor::Tensor;

use super::config::{AttackTarget, ExperimentConfig};
use super::report::{assemble_report, persist_report, ExperimentReport, PairRow};

/// Synthetic sets: samples per class before the 80/20 train/test split.
const SYNTHETIC_PER_CLASS: usize = 200;

/// `(train, test)` for a dataset id: `digits` (IDX files in `data_dir`) or
/// `synthetic:<kind>` (generated from `seed`, split 80/20).
pub fn load_named_dataset(id: &str, data_dir: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    if id == "digits" {
        let f = |name: &str| data_dir.join(format!("digits-{name}.idx.gz"));
        let train = load_idx(&f("train-images"), &f("train-labels"))?;
        let test = load_idx(&f("test-images"), &f("test-labels"))?;
        return Ok((train, test));
    }
    let kind = id
        .strip_prefix("synthetic:")
        .ok_or_else(|| Error::Config(format!("unknown dataset {id:?}")))?
        .parse()?;
    let all = make_synthetic(&SyntheticSpec::new(kind, zoo::DIGIT_CLASSES, SYNTHETIC_PER_CLASS, seed))?;
    let n_train = all.len() * 4 / 5;
    Ok(all.split(n_train, seed))
}

/// `(train, test)` for the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    load_named_dataset(&cfg.dataset, &cfg.data_dir, cfg.seed)
}

/// Everything trained or fitted for an experiment.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub classifier: Option<Network>,
    pub ensemble: Vec<Network>,
    pub autoencoder: Option<(Network, Network)>,
    pub mahalanobis: Option<MahalanobisStats>,
    pub gram: Option<GramReference>,
    /// Test accuracies and reconstruction errors, keyed by model.
    pub quality: BTreeMap<String, f64>,
}

fn dataset_tag(cfg: &ExperimentConfig) -> String {
    cfg.dataset.replace(':', "-")
}

fn cache_path(dir: Option<&Path>, stem: &str, t: &TrainConfig) -> Option<PathBuf> {
    dir.map(|d| {
        d.join(format!(
            "{stem}-e{}-b{}-lr{}-s{}.ckpt",
            t.epochs, t.batch_size, t.learning_rate, t.seed
        ))
    })
}

/// Loads `spec`'s trained weights from the cache, or trains and caches them.
fn obtain_classifier(
    spec: NetworkSpec,
    stem: &str,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    models_dir: Option<&Path>,
) -> Result<(Network, f64)> {
    let path = cache_path(models_dir, stem, tcfg);
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let (net, meta) = load_network(p)?;
        if net.spec() == &spec {
            let acc = match meta.test_accuracy {
                Some(a) => a,
                None => crate::nn::accuracy(&net, test)?,
            };
            return Ok((net, acc));
        }
    }
    let mut net = Network::new(spec)?;
    let report = train_classifier(&mut net, train, Some(test), tcfg)?;
    let acc = report.test_accuracy.expect("test set supplied");
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().expect("joined path"))?;
        let meta = TrainingMetadata {
            dataset: stem.to_string(),
            seed: tcfg.seed,
            epochs: tcfg.epochs,
            train_accuracy: Some(report.train_accuracy),
            test_accuracy: Some(acc),
            notes: String::new(),
        };
        save_network(&p, &net, &meta)?;
    }
    Ok((net, acc))
}

fn obtain_autoencoder(
    latent: usize,
    stem: &str,
    train: &Dataset,
    test: &Dataset,
    tcfg: &TrainConfig,
    models_dir: Option<&Path>,
) -> Result<((Network, Network), f64)> {
    let (enc_spec, dec_spec) = zoo::autoencoder(latent, tcfg.seed);
    let enc_path = cache_path(models_dir, &format!("{stem}-enc"), tcfg);
    let dec_path = cache_path(models_dir, &format!("{stem}-dec"), tcfg);
    if let (Some(e), Some(d)) = (&enc_path, &dec_path) {
        if e.exists() && d.exists() {
            let (enc, _) = load_network(e)?;
            let (dec, meta) = load_network(d)?;
            if enc.spec() == &enc_spec && dec.spec() == &dec_spec {
                let err = match meta.test_accuracy {
                    Some(v) => v,
                    None => crate::nn::mean_reconstruction_error(&enc, &dec, test)?,
                };
                return Ok(((enc, dec), err));
            }
        }
    }
    let mut enc = Network::new(enc_spec)?;
    let mut dec = Network::new(dec_spec)?;
    let report = train_autoencoder(&mut enc, &mut dec, train, test, tcfg)?;
    if let (Some(e), Some(d)) = (enc_path, dec_path) {
        std::fs::create_dir_all(e.parent().expect("joined path"))?;
        // The reconstruction error rides in the accuracy slot of the metadata.
        let meta = TrainingMetadata {
            dataset: stem.to_string(),
            seed: tcfg.seed,
            epochs: tcfg.epochs,
            train_accuracy: None,
            test_accuracy: Some(report.mean_reconstruction_error),
            notes: "test_accuracy holds the mean held-out reconstruction error".into(),
        };
        save_network(&e, &enc, &meta)?;
        save_network(&d, &dec, &meta)?;
    }
    Ok(((enc, dec), report.mean_reconstruction_error))
}

/// Trains (or loads) every model and fits every detector the config needs.
pub fn prepare_models(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Models> {
    let mut models = Models::default();
    let dir = cfg.models_dir.as_deref();
    let tag = dataset_tag(cfg);
    let d = &cfg.detectors;

    if cfg.target != AttackTarget::Ensemble {
        let spec = zoo::by_id(&cfg.model, cfg.training.seed).expect("validated model id");
        let stem = format!("{}-{tag}", cfg.model);
        let (net, acc) = obtain_classifier(spec, &stem, train, test, &cfg.training, dir)?;
        models.quality.insert(format!("{}_test_accuracy", cfg.model), acc);
        if d.mahalanobis.is_some() {
            models.mahalanobis = Some(fit_mahalanobis(&net, train)?);
        }
        if let Some(g) = &d.gram {
            let fit_set = g.fit_samples.map_or_else(|| train.clone(), |n| train.take(n));
            let held_idx: Vec<usize> = (cfg.pairs..(cfg.pairs + g.held_out).min(test.len())).collect();
            models.gram = Some(fit_gram(&net, &fit_set, &test.subset(&held_idx), g.orders)?);
        }
        models.classifier = Some(net);
    }
    if let Some(e) = &cfg.ensemble {
        for i in 0..e.members {
            let seed = cfg.training.seed.wrapping_add(1 + i as u64);
            let mut spec = zoo::by_id(&e.model, seed).expect("validated model id");
            spec.name = format!("{}-member{i}", spec.name);
            let tcfg = TrainConfig {
                seed,
                ..cfg.training.clone()
            };
            let stem = format!("{}-member{i}-{tag}", e.model);
            let (net, acc) = obtain_classifier(spec, &stem, train, test, &tcfg, dir)?;
            models.quality.insert(format!("{}_member{i}_test_accuracy", e.model), acc);
            models.ensemble.push(net);
        }
    }
    if let Some(r) = &d.reconstruction {
        let tcfg = r.training.clone().unwrap_or_else(|| cfg.training.clone());
        let stem = format!("ae{}-{tag}", r.latent);
        let (pair, err) = obtain_autoencoder(r.latent, &stem, train, test, &tcfg, dir)?;
        models.quality.insert(format!("ae{}_mean_reconstruction_l2", r.latent), err);
        models.autoencoder = Some(pair);
    }
    Ok(models)
}

/// One attack configuration: which `f(x)` and the hyperparameters behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSetSpec {
    pub id: String,
    pub target: AttackTarget,
    pub hyperparameters: BTreeMap<String, f64>,
}

pub(crate) fn with_params(name: &str, hyper: &BTreeMap<String, f64>) -> String {
    if hyper.is_empty() {
        return name.to_string();
    }
    let inner: Vec<String> = hyper.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{name}[{}]", inner.join(","))
}

pub fn attack_sets(cfg: &ExperimentConfig) -> Vec<AttackSetSpec> {
    match cfg.target {
        AttackTarget::Odin => {
            let grid = cfg.detectors.odin.clone().expect("validated");
            let mut sets = Vec::new();
            for &t in &grid.temperatures {
                for &pm in &grid.magnitudes {
                    let hyper = BTreeMap::from([("PM".to_string(), pm), ("T".to_string(), t)]);
                    sets.push(AttackSetSpec {
                        id: with_params("odin", &hyper),
                        target: AttackTarget::Odin,
                        hyperparameters: hyper,
                    });
                }
            }
            sets
        }
        t => vec![AttackSetSpec {
            id: t.id().to_string(),
            target: t,
            hyperparameters: BTreeMap::new(),
        }],
    }
}

/// The attacked and fitted artifacts of one attack set, kept in memory.
#[derive(Debug)]
pub struct AttackSetRun {
    pub spec: AttackSetSpec,
    /// Attacked test-sample ids, aligned with `results`.
    pub sample_ids: Vec<usize>,
    pub results: Vec<Result<AttackResult>>,
}

#[derive(Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub x_init: Tensor,
    pub x_in: Vec<Tensor>,
    pub sets: Vec<AttackSetRun>,
    pub models: Models,
}

fn attack_set<F: FeatureMap + ?Sized>(f: &F, pairs: &[(Tensor, Tensor)], cfg: &ExperimentConfig) -> Vec<Result<AttackResult>> {
    ood_attack_many(f, pairs, &cfg.attack)
}

fn run_attack_set(
    spec: &AttackSetSpec,
    models: &Models,
    pairs: &[(Tensor, Tensor)],
    cfg: &ExperimentConfig,
) -> Result<Vec<Result<AttackResult>>> {
    let net = || models.classifier.as_ref().ok_or_else(|| Error::Config("no classifier".into()));
    Ok(match spec.target {
        AttackTarget::Latent => attack_set(&Latent(net()?), pairs, cfg),
        AttackTarget::Logits => attack_set(&Logits(net()?), pairs, cfg),
        AttackTarget::Odin => {
            let f = OdinLogits {
                net: net()?,
                temperature: spec.hyperparameters["T"],
                magnitude: spec.hyperparameters["PM"],
            };
            attack_set(&f, pairs, cfg)
        }
        AttackTarget::Gram => {
            let reference = models.gram.as_ref().ok_or_else(|| Error::Config("no Gram reference".into()))?;
            attack_set(&GramScore { net: net()?, reference }, pairs, cfg)
        }
        AttackTarget::Ensemble => attack_set(&EnsembleLogits(&models.ensemble), pairs, cfg),
    })
}

/// Scores `x` with every detector that applies to `set`.
fn score_sample(cfg: &ExperimentConfig, models: &Models, set: &AttackSetSpec, x: &Tensor) -> Result<Vec<DetectorScore>> {
    let d = &cfg.detectors;
    let mut out = Vec::new();
    let subject_logits = || -> Result<Tensor> {
        match &models.classifier {
            Some(net) if set.target != AttackTarget::Ensemble => net.logits(x),
            _ => detectors::ensemble_mean_logits(&models.ensemble, x),
        }
    };
    if set.target == AttackTarget::Odin {
        let net = models.classifier.as_ref().expect("odin target has a classifier");
        let (t, pm) = (set.hyperparameters["T"], set.hyperparameters["PM"]);
        out.push(score_odin(net, x, t, pm)?);
        return Ok(out);
    }
    if d.max_softmax {
        out.push(score_max_softmax(&subject_logits()?)?);
    }
    if d.oe {
        out.push(score_oe(&subject_logits()?)?);
    }
    if let Some(net) = models.classifier.as_ref() {
        if let Some(grid) = &d.odin {
            for &t in &grid.temperatures {
                for &pm in &grid.magnitudes {
                    out.push(score_odin(net, x, t, pm)?);
                }
            }
        }
        if let (Some(m), Some(stats)) = (&d.mahalanobis, &models.mahalanobis) {
            for &pm in &m.magnitudes {
                out.push(score_mahalanobis(net, stats, x, pm)?);
            }
        }
        if let Some(reference) = &models.gram {
            out.push(score_gram(net, reference, x)?);
        }
        if d.energy {
            for v in [EnergyVariant::Logsumexp, EnergyVariant::MaxSoftmax, EnergyVariant::GradNorm] {
                out.push(score_energy(net, x, v)?);
            }
        }
    }
    if d.ensemble_entropy {
        out.push(score_ensemble_entropy(&models.ensemble, x)?);
    }
    if let (Some(r), Some((enc, dec))) = (&d.reconstruction, &models.autoencoder) {
        out.push(score_reconstruction(enc, dec, x, r.p)?);
    }
    Ok(out)
}

fn score_rows(
    cfg: &ExperimentConfig,
    models: &Models,
    set: &AttackSetSpec,
    sample_id: usize,
    side: Side,
    x: &Tensor,
) -> Result<Vec<ScoreRow>> {
    Ok(score_sample(cfg, models, set, x)?
        .into_iter()
        .map(|s| ScoreRow {
            sample_id,
            detector_id: format!("{}/{}", set.id, with_params(&s.detector, &s.hyperparameters)),
            side,
            score: s.score,
        })
        .collect())
}

/// Runs the full protocol and persists every artifact under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        Error::Config(format!("output directory {} is not writable: {e}", cfg.output_dir.display()))
    })?;
    let (train, test) = load_dataset(cfg)?;
    if test.len() < cfg.pairs {
        return Err(Error::Config(format!(
            "{} pairs requested but the test set has {} samples",
            cfg.pairs,
            test.len()
        )));
    }
    let models = prepare_models(cfg, &train, &test)?;

    let guard = DistanceGuard {
        reference: &train,
        floor: cfg.init_distance_floor,
    };
    let guard = (cfg.init_distance_floor > 0.0).then_some(&guard);
    let x_init = make_initial_ood(&cfg.init_kind()?, train.image_shape(), cfg.seed, guard)?;
    let sample_ids: Vec<usize> = (0..cfg.pairs).collect();
    let x_in: Vec<Tensor> = sample_ids.iter().map(|&i| test.image(i).clone()).collect();
    let pairs: Vec<(Tensor, Tensor)> = x_in.iter().map(|x| (x.clone(), x_init.clone())).collect();

    let mut sets = Vec::new();
    let mut scores = Vec::new();
    let mut pair_rows = Vec::new();
    for spec in attack_sets(cfg) {
        let results = run_attack_set(&spec, &models, &pairs, cfg)?;
        let per_sample: Vec<Result<Vec<ScoreRow>>> = results
            .par_iter()
            .zip(sample_ids.par_iter())
            .zip(x_in.par_iter())
            .map(|((r, &id), x)| match r {
                Ok(res) => {
                    let mut rows = score_rows(cfg, &models, &spec, id, Side::In, x)?;
                    rows.extend(score_rows(cfg, &models, &spec, id, Side::Out, &res.x_out)?);
                    Ok(rows)
                }
                Err(_) => Ok(Vec::new()),
            })
            .collect();
        for rows in per_sample {
            scores.extend(rows?);
        }
        for (r, &id) in results.iter().zip(&sample_ids) {
            pair_rows.push(match r {
                Ok(res) => PairRow {
                    attack_set: spec.id.clone(),
                    sample_id: id,
                    mape: res.mape,
                    loss: res.loss,
                    slack: res.slack,
                    evaluations: res.trace.len(),
                    excluded: None,
                },
                Err(e) => PairRow {
                    attack_set: spec.id.clone(),
                    sample_id: id,
                    mape: None,
                    loss: f64::NAN,
                    slack: f64::NAN,
                    evaluations: 0,
                    excluded: Some(e.to_string()),
                },
            });
        }
        sets.push(AttackSetRun {
            spec,
            sample_ids: sample_ids.clone(),
            results,
        });
    }

    let mut report = assemble_report(cfg, models.quality.clone(), scores, pair_rows)?;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    persist_report(&report, &cfg.output_dir)?;
    persist_attacks(cfg, &sets)?;

    let attempted = report.attempted;
    if attempted > 0 && report.exclusions as f64 > cfg.max_exclusion_rate * attempted as f64 {
        return Err(Error::AttackFailed(format!(
            "{} of {attempted} attacks excluded (limit {:.1}%); see {}",
            report.exclusions,
            100.0 * cfg.max_exclusion_rate,
            cfg.output_dir.join("attacks.csv").display()
        )));
    }
    Ok(ExperimentRun {
        report,
        x_init,
        x_in,
        sets,
        models,
    })
}

/// Writes each set's `x_out` stack and, when requested, its loss traces.
fn persist_attacks(cfg: &ExperimentConfig, sets: &[AttackSetRun]) -> Result<()> {
    let dir = cfg.output_dir.join("attacks");
    std::fs::create_dir_all(&dir)?;
    for set in sets {
        let stem = super::report::file_stem(&set.spec.id);
        let kept: Vec<(usize, &AttackResult)> = set
            .sample_ids
            .iter()
            .zip(&set.results)
            .filter_map(|(&id, r)| r.as_ref().ok().map(|r| (id, r)))
            .collect();
        let header = serde_json::json!({
            "kind": "attack_outputs",
            "attack_set": set.spec.id,
            "sample_ids": kept.iter().map(|(id, _)| *id).collect::<Vec<_>>(),
        });
        let tensors = kept.iter().map(|(_, r)| r.x_out.clone()).collect();
        crate::nn::Container::new(header, tensors).save(&dir.join(format!("{stem}.otnsr")))?;
        if cfg.save_traces {
            let mut w = csv::Writer::from_path(dir.join(format!("{stem}.trace.csv")))
                .map_err(|e| Error::Format(format!("csv: {e}")))?;
            let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
            w.write_record(["sample_id", "iteration", "loss", "best_loss"]).map_err(err)?;
            for (id, r) in &kept {
                for p in &r.trace {
                    w.write_record([
                        id.to_string(),
                        p.iteration.to_string(),
                        p.loss.to_string(),
                        p.best_loss.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}
