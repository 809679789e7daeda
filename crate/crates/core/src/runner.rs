//! Experiment orchestration: executes a validated config over all of its
//! seeds and writes report.json, losses.csv, ledger.csv, accuracy.svg, and
//! model checkpoints into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, Mode, RunConfig};
use crate::data::{dirichlet_partition, load_idx, make_blobs, Dataset};
use crate::distill::{DistillHp, LossBundle};
use crate::error::{Error, Result};
use crate::federation::{
    run_centralized, CommLedger, FedSetup, FederationState, LocalHp,
};
use crate::metrics::adapted_inception_score;
use crate::nets::{sample_noise, Network, NoiseSpec};
use crate::privacy::DpConfig;
use crate::svg::{emit_svg, Series};

fn verbosity() -> u8 {
    match std::env::var("FEDIOD_LOG").as_deref() {
        Ok("quiet") | Ok("0") => 0,
        Ok("debug") | Ok("2") => 2,
        _ => 1,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbosity() >= 1 {
            eprintln!($($arg)*);
        }
    };
}

/// Everything recorded for one seed of the experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Accuracy checkpoints, x = distill step / round / epoch by mode.
    pub series: Vec<(u64, f64)>,
    /// The value entering the cross-seed mean: final central-model accuracy,
    /// or the across-node mean for standalone runs.
    pub final_accuracy: f64,
    /// Per-node final test accuracies (standalone mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_accuracies: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_std: Option<f64>,
    /// Generation quality of the final generator scored by the frozen
    /// teachers (distillation mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapted_inception_score: Option<f64>,
    pub ledger_totals: BTreeMap<String, u64>,
    pub sanitize_calls: u64,
    pub sanitized_records: u64,
}

/// Aggregated result of one experiment over all its seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub per_seed: Vec<SeedReport>,
    pub final_mean: f64,
    pub final_std: f64,
    pub ledger_totals: BTreeMap<String, u64>,
    pub losses_csv: String,
    pub ledger_csv: String,
    pub accuracy_svg: String,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct SeedOutcome {
    report: SeedReport,
    ledger: CommLedger,
    losses: Vec<LossBundle>,
    checkpoints: Vec<(String, Network)>,
}

fn build_dataset(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread, test_fraction } => {
            let ds = make_blobs(*classes, *per_class, *dim, *spread, seed)?;
            ds.split_test(*test_fraction, seed)
        }
        DatasetSpec::Idx { images, labels, downsample_to, test_fraction } => {
            let ds = load_idx(Path::new(images), Path::new(labels), *downsample_to)?;
            ds.split_test(*test_fraction, seed)
        }
    }
}

fn full_arch(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut a = Vec::with_capacity(hidden.len() + 2);
    a.push(input);
    a.extend_from_slice(hidden);
    a.push(output);
    a
}

fn setup_for(cfg: &RunConfig, d: usize, classes: usize, seed: u64) -> FedSetup {
    let teacher_archs: Vec<Vec<usize>> = match &cfg.arch.teacher_hidden_per_node {
        Some(per_node) => per_node.iter().map(|h| full_arch(d, h, classes)).collect(),
        None => vec![full_arch(d, &cfg.arch.teacher_hidden, classes); cfg.nodes],
    };
    FedSetup {
        teacher_archs,
        student_arch: full_arch(d, &cfg.arch.student_hidden, classes),
        generator_arch: full_arch(cfg.arch.noise_dim, &cfg.arch.generator_hidden, d),
        disc_arch: full_arch(d, &cfg.arch.disc_hidden, cfg.arch.patch_grid * cfg.arch.patch_grid),
        activation: cfg.arch.activation,
        noise_dim: cfg.arch.noise_dim,
        seed,
    }
}

fn local_hp(cfg: &RunConfig) -> LocalHp {
    LocalHp {
        epochs: cfg.hp.local_epochs,
        batch: cfg.hp.local_batch,
        lr: cfg.hp.local_lr,
        ..LocalHp::default()
    }
}

fn distill_hp(cfg: &RunConfig) -> DistillHp {
    DistillHp {
        batch: cfg.hp.distill_batch,
        tau: cfg.hp.tau,
        lr_generator: cfg.hp.generator_lr,
        lr_student: cfg.hp.student_lr,
        lr_discriminator: cfg.hp.disc_lr,
        lambda_conf: cfg.hp.lambda_conf,
        lambda_unique: cfg.hp.lambda_unique,
        lambda_mimic: cfg.hp.lambda_mimic,
        lambda_gan: cfg.hp.lambda_gan,
        anneal_steps: cfg.hp.cosine_anneal.then_some(cfg.hp.distill_steps),
        ..DistillHp::default()
    }
}

fn ledger_totals_map(ledger: &CommLedger) -> BTreeMap<String, u64> {
    ledger
        .totals_by_kind()
        .into_iter()
        .map(|(k, v)| (k.as_str().to_string(), v))
        .collect()
}

fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    let (train, test) = build_dataset(cfg, seed)?;
    let classes = train.classes;
    let d = train.dim();

    if cfg.mode == Mode::Centralized {
        let (series, final_accuracy, model) = run_centralized(
            &train,
            &test,
            &full_arch(d, &cfg.arch.student_hidden, classes),
            cfg.arch.activation,
            &local_hp(cfg),
            cfg.hp.eval_interval as usize,
            seed,
        )?;
        return Ok(SeedOutcome {
            report: SeedReport {
                seed,
                series,
                final_accuracy,
                node_accuracies: None,
                node_std: None,
                adapted_inception_score: None,
                ledger_totals: BTreeMap::new(),
                sanitize_calls: 0,
                sanitized_records: 0,
            },
            ledger: CommLedger::default(),
            losses: Vec::new(),
            checkpoints: vec![(format!("centralized_seed{seed}.json"), model)],
        });
    }

    let partition = dirichlet_partition(&train, cfg.nodes, cfg.alpha, seed)?;
    let setup = setup_for(cfg, d, classes, seed);
    let mut state = FederationState::build(train, test, partition, &setup)?;
    let mut dp = DpConfig::new(cfg.dp.clip_norm, cfg.dp.noise_multiplier, cfg.dp.enabled, seed)?;

    let (report, checkpoints, losses) = match cfg.mode {
        Mode::Fediod => {
            state.run_local_training(&local_hp(cfg))?;
            let run = state.run_fediod(cfg.hp.distill_steps, &distill_hp(cfg), cfg.hp.eval_interval, &mut dp)?;

            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x15c0);
            let noise = sample_noise(&NoiseSpec { dim: cfg.arch.noise_dim }, cfg.hp.distill_batch.max(2), &mut rng)?;
            let batch = state.generator.forward_values(&noise)?;
            let teachers: Vec<&Network> = state.nodes.iter().map(|n| &n.teacher).collect();
            let weights: Vec<f64> =
                (0..cfg.nodes).map(|k| crate::data::local_weight(&state.partition, k)).collect();
            let adapted_is = adapted_inception_score(&batch, &teachers, &weights)?;

            let report = SeedReport {
                seed,
                series: run.accuracy.clone(),
                final_accuracy: run.final_accuracy,
                node_accuracies: None,
                node_std: None,
                adapted_inception_score: Some(adapted_is),
                ledger_totals: ledger_totals_map(&state.ledger),
                sanitize_calls: dp.calls(),
                sanitized_records: state.ledger.sanitized_count(),
            };
            let ckpts = vec![
                (format!("student_seed{seed}.json"), state.student.clone()),
                (format!("generator_seed{seed}.json"), state.generator.clone()),
            ];
            (report, ckpts, run.losses)
        }
        Mode::Fedavg => {
            let run = state.run_fedavg(
                cfg.hp.fedavg_rounds,
                cfg.hp.fedavg_local_epochs,
                cfg.hp.fedavg_batch,
                cfg.hp.fedavg_lr,
            )?;
            let report = SeedReport {
                seed,
                series: run.accuracy.clone(),
                final_accuracy: run.final_accuracy,
                node_accuracies: None,
                node_std: None,
                adapted_inception_score: None,
                ledger_totals: ledger_totals_map(&state.ledger),
                sanitize_calls: 0,
                sanitized_records: state.ledger.sanitized_count(),
            };
            (report, vec![(format!("student_seed{seed}.json"), state.student.clone())], Vec::new())
        }
        Mode::Standalone => {
            let run = state.run_standalone(&local_hp(cfg))?;
            let report = SeedReport {
                seed,
                series: vec![(cfg.hp.local_epochs as u64, run.mean)],
                final_accuracy: run.mean,
                node_accuracies: Some(run.test_accuracies.clone()),
                node_std: Some(run.std),
                adapted_inception_score: None,
                ledger_totals: ledger_totals_map(&state.ledger),
                sanitize_calls: 0,
                sanitized_records: 0,
            };
            (report, Vec::new(), Vec::new())
        }
        Mode::Centralized => unreachable!("handled above"),
    };

    Ok(SeedOutcome { report, ledger: state.ledger, losses, checkpoints })
}

/// Executes the config over all seeds and writes every artifact into the
/// output directory. Deterministic apart from `wall_clock_seconds`.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        info!("[{} seed {seed}] running...", cfg.mode);
        let outcome = run_seed(cfg, seed)?;
        info!(
            "[{} seed {seed}] final accuracy {:.4}",
            cfg.mode, outcome.report.final_accuracy
        );
        outcomes.push(outcome);
    }

    let finals: Vec<f64> = outcomes.iter().map(|o| o.report.final_accuracy).collect();
    let n = finals.len() as f64;
    let final_mean = finals.iter().sum::<f64>() / n;
    let final_std = (finals.iter().map(|a| (a - final_mean).powi(2)).sum::<f64>() / n).sqrt();

    // losses.csv: per-step bundles across seeds
    let mut losses_csv = format!("seed,{}\n", LossBundle::csv_header(cfg.nodes));
    for o in &outcomes {
        for bundle in &o.losses {
            losses_csv.push_str(&format!("{},{}\n", o.report.seed, bundle.csv_row()));
        }
    }
    let losses_path = out_dir.join("losses.csv");
    std::fs::write(&losses_path, &losses_csv)?;

    // ledger.csv: every simulated message across seeds
    let mut ledger_csv = String::from("seed,sender,receiver,payload_kind,bytes,round,sanitized\n");
    for o in &outcomes {
        for r in o.ledger.records() {
            ledger_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                o.report.seed,
                r.sender,
                r.receiver,
                r.payload.as_str(),
                r.bytes,
                r.round,
                r.sanitized
            ));
        }
    }
    let ledger_path = out_dir.join("ledger.csv");
    std::fs::write(&ledger_path, &ledger_csv)?;

    // accuracy.svg: one line per seed
    let series: Vec<Series> = outcomes
        .iter()
        .map(|o| Series {
            label: format!("seed{}", o.report.seed),
            points: o.report.series.iter().map(|&(x, y)| (x as f64, y)).collect(),
        })
        .collect();
    let svg_path = out_dir.join("accuracy.svg");
    let x_label = match cfg.mode {
        Mode::Fediod => "distillation step",
        Mode::Fedavg => "round",
        Mode::Standalone | Mode::Centralized => "epoch",
    };
    emit_svg(&series, x_label, "test accuracy", &svg_path)?;

    for o in &outcomes {
        for (name, net) in &o.checkpoints {
            let json = serde_json::to_string(&net.to_checkpoint())?;
            std::fs::write(out_dir.join(name), json)?;
        }
    }

    let mut ledger_totals: BTreeMap<String, u64> = BTreeMap::new();
    for o in &outcomes {
        for (k, v) in &o.report.ledger_totals {
            *ledger_totals.entry(k.clone()).or_insert(0) += v;
        }
    }

    let report = RunReport {
        config: cfg.clone(),
        per_seed: outcomes.into_iter().map(|o| o.report).collect(),
        final_mean,
        final_std,
        ledger_totals,
        losses_csv: losses_path.display().to_string(),
        ledger_csv: ledger_path.display().to_string(),
        accuracy_svg: svg_path.display().to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
    info!(
        "[{}] mean {:.4} +/- {:.4} over {} seeds -> {}",
        cfg.mode,
        final_mean,
        final_std,
        cfg.seeds.len(),
        out_dir.display()
    );
    Ok(report)
}

/// Convenience wrapper: parse, apply CLI overrides, run.
pub fn run_from_path(
    config_path: &Path,
    output_dir: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunReport> {
    let mut cfg = crate::config::parse_config(config_path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir
            .to_str()
            .ok_or_else(|| Error::Config("output dir is not valid UTF-8".into()))?
            .to_string();
    }
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    run(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use std::io::Write;

    fn tiny_cfg(dir: &Path, mode: &str, extra: &str) -> RunConfig {
        let body = format!(
            r#"{{
              "mode": "{mode}",
              "dataset": {{"kind": "blobs", "classes": 2, "per_class": 30, "spread": 0.1}},
              "nodes": 2,
              "alpha": 1.0,
              "seeds": [0],
              "hp": {{"local_epochs": 8, "distill_steps": 6, "distill_batch": 4,
                      "eval_interval": 3, "fedavg_rounds": 2, "local_batch": 16{extra}}},
              "arch": {{"teacher_hidden": [8], "student_hidden": [8],
                        "generator_hidden": [8], "disc_hidden": [8], "noise_dim": 4}},
              "output_dir": "{}"
            }}"#,
            dir.join("out").display()
        );
        let p = dir.join("cfg.json");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        parse_config(&p).unwrap()
    }

    #[test]
    fn fediod_mode_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), "fediod", "");
        let report = run(&cfg).unwrap();
        assert_eq!(report.per_seed.len(), 1);
        assert_eq!(report.ledger_totals["model_params"], 0);
        assert!(report.per_seed[0].adapted_inception_score.is_some());

        let out = dir.path().join("out");
        for f in ["report.json", "losses.csv", "ledger.csv", "accuracy.svg", "student_seed0.json", "generator_seed0.json"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
        assert_eq!(losses.lines().count(), 1 + 6);
        assert!(losses.starts_with("seed,step,l_gan_0,l_gan_1,l_conf,l_unique,l_mimic"));
    }

    #[test]
    fn seed_mean_std_match_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), "standalone", "");
        cfg.seeds = vec![0, 1, 2];
        let report = run(&cfg).unwrap();
        assert_eq!(report.per_seed.len(), 3);
        let finals: Vec<f64> = report.per_seed.iter().map(|s| s.final_accuracy).collect();
        let mean = finals.iter().sum::<f64>() / 3.0;
        assert!((report.final_mean - mean).abs() < 1e-12);
        let std = (finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((report.final_std - std).abs() < 1e-12);
        // standalone: node stats over exactly K values
        assert_eq!(report.per_seed[0].node_accuracies.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn deterministic_report_modulo_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), "fedavg", "");
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        let strip = |r: &RunReport| {
            let mut v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
            v["wall_clock_seconds"] = 0.into();
            serde_json::to_string(&v).unwrap()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn run_from_path_applies_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), "centralized", "");
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
        let alt = dir.path().join("alt");
        let report = run_from_path(&cfg_path, Some(&alt), Some(9)).unwrap();
        assert_eq!(report.config.seeds, vec![9]);
        assert!(alt.join("report.json").exists());
        assert!(alt.join("centralized_seed9.json").exists());
    }
}
