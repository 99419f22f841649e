use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use log::info;
use serde::Serialize;
use serde_json::json;

use riskadj_core::baselines::{fit_linear, linear_grid_search, LinearCheckpoint, LinearKind};
use riskadj_core::data::{
    read_dataset, standardize, stratified_split, validate, write_dataset, SplitPart, StandardizationStats,
};
use riskadj_core::evaluation::{compare_effects, evaluate, histogram_csv, roc_auc};
use riskadj_core::experiment::{run_experiment, ExperimentConfig, HGLM, PROPOSED};
use riskadj_core::nn::ModelKind;
use riskadj_core::synthgen::{generate, GeneratorConfig};
use riskadj_core::training::{desk_grid, grad_check_fixture, grad_check_on, grid_search, train};
use riskadj_core::util::{json_hash, pearson};

use crate::bundle::{ModelBundle, ModelFlag, Weights, BUNDLE_FORMAT};
use crate::config::{apply_overrides, load, GradCheckConfig, TrainConfig};
use crate::error::CliError;
use crate::manifest::{dataset_hash, Run};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl From<Part> for SplitPart {
    fn from(p: Part) -> Self {
        match p {
            Part::Train => SplitPart::Train,
            Part::Validation => SplitPart::Validation,
            Part::Test => SplitPart::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Linear,
    Nonlinear,
    FullScale,
}

/// Config file, then `--seed`, then `--set` overrides.
pub struct ConfigArgs<'a> {
    pub path: Option<&'a Path>,
    pub sets: &'a [String],
    pub seed: u64,
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(path: &Path) -> Result<riskadj_core::data::Dataset> {
    let dataset = read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let violations = validate(&dataset);
    if let Some(first) = violations.first() {
        return Err(CliError::Usage(format!("dataset has {} invalid records; first: {first}", violations.len())).into());
    }
    Ok(dataset)
}

pub fn cmd_generate(cfg: ConfigArgs, out: &Path) -> Result<()> {
    let mut config: GeneratorConfig = load(cfg.path)?;
    config.seed = cfg.seed;
    let config = apply_overrides(&config, cfg.sets)?;
    let mut run = Run::start("generate", cfg.seed);
    run.config_hash = Some(json_hash(&config));
    let (dataset, _) = generate(&config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_dataset(&dataset, out)?;
    run.record(out);
    run.record(&riskadj_core::data::meta_path(out));
    run.dataset_hash = Some(dataset_hash(out)?);
    run.finish(&out.with_extension("manifest.json"))?;
    println!("{}", json!({"records": dataset.len(), "hospitals": dataset.hospitals, "path": out.display().to_string()}));
    Ok(())
}

pub fn cmd_train(cfg: ConfigArgs, model: ModelFlag, dataset_path: &Path, out_dir: &Path, grid: bool) -> Result<()> {
    let mut config: TrainConfig = load(cfg.path)?;
    config.split_seed = cfg.seed;
    config.training.seed = cfg.seed;
    let config = apply_overrides(&config, cfg.sets)?;
    let raw = load_dataset(dataset_path)?;
    let mut run = Run::start("train", cfg.seed);
    let config_hash = json_hash(&config);
    run.config_hash = Some(config_hash.clone());
    run.dataset_hash = Some(dataset_hash(dataset_path)?);
    create_dir(out_dir)?;

    let split = stratified_split(&raw, config.split, config.split_seed)?;
    let train_idx = split.indices(SplitPart::Train);
    let stats = StandardizationStats::fit(train_idx.iter().map(|&i| &raw.records[i]), raw.sociodem_dim);
    let (data, stats) = standardize(&raw, Some(&stats))?;

    let (weights, summary) = if let Some(kind) = model.network_kind() {
        let pretrained = if config.use_pretrained { data.pretrained_embeddings.as_ref() } else { None };
        let outcome = if grid {
            let archs = config.nn_grid.clone().unwrap_or_else(|| desk_grid(&config.arch));
            info!("grid search over {} architectures", archs.len());
            let g = grid_search(kind, &data, &split, &archs, &config.training, pretrained)?;
            run.write(&out_dir.join("grid.csv"), g.to_csv())?;
            g.best
        } else {
            train(kind, &data, &split, &config.arch, &config.training, pretrained)?
        };
        run.write(&out_dir.join("log.jsonl"), outcome.log.to_jsonl())?;
        let summary = json!({
            "best_epoch": outcome.log.best_epoch,
            "epochs": outcome.log.epochs.len().saturating_sub(1),
            "stop_reason": outcome.log.stop_reason,
            "n_params": outcome.params.n_params(),
        });
        (Weights::Network(outcome.params.to_checkpoint(&config_hash)), summary)
    } else {
        let kind = model.linear_kind().expect("linear flag");
        let fit = if grid {
            let penalties = if kind == LinearKind::ElasticNet { &config.enet_grid } else { &config.hglm_grid };
            let g = linear_grid_search(kind, &data, &split, penalties, &config.solver)?;
            run.write(&out_dir.join("grid.csv"), g.to_csv())?;
            g.best
        } else {
            fit_linear(kind, &data, &split, config.penalty, &config.solver, None)?
        };
        run.write(&out_dir.join("log.jsonl"), serde_json::to_string(&fit.report)? + "\n")?;
        let summary = json!({
            "penalty": fit.penalty,
            "iterations": fit.report.iterations,
            "converged": fit.report.converged,
            "nonzero_beta": fit.params.nonzero_beta(),
        });
        (Weights::Linear(LinearCheckpoint::new(&fit, &data)), summary)
    };

    let bundle = ModelBundle {
        format: BUNDLE_FORMAT.into(),
        model,
        feature_map_hash: raw.feature_map_hash(),
        dataset_hash: run.dataset_hash.clone().unwrap_or_default(),
        split: config.split,
        split_seed: config.split_seed,
        standardization: stats,
        weights,
    };
    let val_idx = split.indices(SplitPart::Validation);
    let val_pred = bundle.model(&data)?.predict(&data, &val_idx)?;
    let val_auc = roc_auc(&val_pred, &data.outcomes(&val_idx))?;

    let mut split_csv = String::from("admission_id,part\n");
    for (r, part) in data.records.iter().zip(&split.labels) {
        split_csv.push_str(&format!("{},{}\n", r.admission_id, part.as_str()));
    }
    run.write(&out_dir.join("split.csv"), split_csv)?;
    run.write(&out_dir.join("best.ckpt"), bundle.to_json())?;
    let summary = json!({"model": model, "val_roc_auc": val_auc, "fit": summary});
    run.write(&out_dir.join("summary.json"), pretty(&summary))?;
    run.finish(&out_dir.join("manifest.json"))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn cmd_evaluate(checkpoint: &Path, dataset_path: &Path, part: Part, per_cohort: bool, out_dir: &Path) -> Result<()> {
    let bundle = ModelBundle::load(checkpoint)?;
    let raw = load_dataset(dataset_path)?;
    let (data, split) = bundle.prepare(&raw)?;
    let mut run = Run::start("evaluate", bundle.split_seed);
    run.dataset_hash = Some(dataset_hash(dataset_path)?);
    let part = SplitPart::from(part);
    let idx = split.indices(part);
    let preds = bundle.model(&data)?.predict(&data, &idx)?;
    let report = evaluate(&preds, &data, &idx, per_cohort)?;
    let text = pretty(&report);
    create_dir(out_dir)?;
    run.write(&out_dir.join(format!("evaluation_{}.json", part.as_str())), &text)?;
    run.finish(&out_dir.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary {
    checkpoint: String,
    model: ModelFlag,
    tau_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_rho: Option<f64>,
}

pub fn cmd_compare(a: &Path, b: &Path, dataset_path: &Path, out_dir: &Path, bins: usize) -> Result<()> {
    let raw = load_dataset(dataset_path)?;
    let truth = raw.ground_truth.as_ref().map(|g| &g.omega_star).filter(|w| w.len() == raw.hospitals);
    let mut effects = Vec::new();
    let mut summaries = Vec::new();
    for path in [a, b] {
        let bundle = ModelBundle::load(path)?;
        let (data, _) = bundle.prepare(&raw)?;
        let e = bundle.model(&data)?.effects().with_context(|| format!("extracting effects from {}", path.display()))?;
        summaries.push(ModelSummary {
            checkpoint: path.display().to_string(),
            model: bundle.model,
            tau_hat: e.tau_hat,
            truth_rho: truth.map(|t| pearson(&e.omega, t)),
        });
        effects.push(e);
    }
    let cmp = compare_effects(&effects[0], &effects[1])?;
    let mut run = Run::start("compare", 0);
    run.dataset_hash = Some(dataset_hash(dataset_path)?);
    create_dir(out_dir)?;
    let ids: Vec<usize> = (0..raw.hospitals).collect();
    run.write(&out_dir.join("omega_scatter.csv"), cmp.to_csv(&ids))?;
    run.write(&out_dir.join("omega_hist_a.csv"), histogram_csv(&effects[0].omega, bins))?;
    run.write(&out_dir.join("omega_hist_b.csv"), histogram_csv(&effects[1].omega, bins))?;
    let summary = json!({"rho": cmp.rho, "hospitals": raw.hospitals, "a": summaries[0], "b": summaries[1]});
    run.write(&out_dir.join("comparison.json"), pretty(&summary))?;
    run.finish(&out_dir.join("manifest.json"))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn cmd_experiment(cfg: ConfigArgs, preset: Preset, out_dir: &Path) -> Result<()> {
    let mut config: ExperimentConfig = match cfg.path {
        Some(_) => load(cfg.path)?,
        None => match preset {
            Preset::Linear => ExperimentConfig::linear(),
            Preset::Nonlinear => ExperimentConfig::nonlinear(),
            Preset::FullScale => ExperimentConfig::full_scale(),
        },
    };
    config.generator.seed = cfg.seed;
    config.split_seed = cfg.seed;
    config.training.seed = cfg.seed;
    let config = apply_overrides(&config, cfg.sets)?;
    let mut run = Run::start("experiment", cfg.seed);
    run.config_hash = Some(json_hash(&config));
    let out = run_experiment(&config)?;
    create_dir(out_dir)?;
    let r = &out.report;
    run.write(&out_dir.join("report.json"), r.to_json() + "\n")?;
    run.write(&out_dir.join("config.json"), pretty(&config))?;
    run.write(&out_dir.join("log.jsonl"), out.nn.log.to_jsonl())?;
    run.write(&out_dir.join("omega_scatter.csv"), r.nn_vs_hglm.to_csv(&out.remap.new_to_old))?;
    for name in [PROPOSED, HGLM] {
        let omega = &r.model(name).effects.as_ref().expect("interpretable model").omega;
        run.write(&out_dir.join(format!("omega_hist_{name}.csv")), histogram_csv(omega, HISTOGRAM_BINS))?;
    }
    run.finish(&out_dir.join("manifest.json"))?;
    println!("{:<22} {:>8} {:>8} {:>8}", "model", "test_auc", "pr_auc", "rho");
    for (name, m) in &r.models {
        let rho = m.recovery.as_ref().map(|x| format!("{:.4}", x.rho)).unwrap_or_else(|| "-".into());
        let ap = m.test.overall.pr_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{name:<22} {:>8.4} {ap:>8} {rho:>8}", m.test_auc());
    }
    println!("oracle test auc {:.4}, nn vs hglm rho {:.4}", r.oracle_test_roc_auc, r.nn_vs_hglm.rho);
    Ok(())
}

pub fn cmd_grad_check(cfg: ConfigArgs, model: ModelFlag) -> Result<()> {
    let config: GradCheckConfig = apply_overrides(&load::<GradCheckConfig>(cfg.path)?, cfg.sets)?;
    let kind = match model.network_kind() {
        Some(k) => k,
        None => return Err(CliError::Usage("grad-check applies to nn and fully-nonlinear".into()).into()),
    };
    let mut worst = 0.0f64;
    let mut per_seed = Vec::new();
    for s in 0..config.seeds {
        let seed = cfg.seed.wrapping_add(s);
        let (params, batch) = grad_check_fixture(kind, &config.arch, seed)?;
        let report = grad_check_on(&params, &batch)?;
        worst = worst.max(report.max_rel_error);
        per_seed.push(json!({"seed": seed, "max_rel_error": report.max_rel_error, "passed": report.passed}));
    }
    let passed = per_seed.iter().all(|r| r["passed"] == true);
    let kind_name = if kind == ModelKind::Proposed { "proposed" } else { "fully_nonlinear" };
    println!("{}", pretty(&json!({"model": kind_name, "max_rel_error": worst, "passed": passed, "seeds": per_seed})).trim_end());
    if !passed {
        return Err(CliError::Numerical(format!("gradient check failed, max relative error {worst:.3e}")).into());
    }
    Ok(())
}

/// `eval/` next to the checkpoint, so the training manifest is kept.
pub fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default().join("eval")
}
