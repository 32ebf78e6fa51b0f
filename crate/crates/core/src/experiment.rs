//! Experiment runner: single runs, the adaptation matrix, accounting
//! tables and analysis dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::accounting::{self, AccountRow};
use crate::analysis::{self, GroupKey, ProbeConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::{build_suite_with, PrefixPolicy, Split, SuiteOptions, TaskSuite};
use crate::trainer::{evaluate, mean, train, TrainConfig};
use crate::transformer::{AdaptationMode, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite_seed: u64,
    pub prefix_policy: PrefixPolicy,
    pub out_dir: PathBuf,
    pub mode_label: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            suite_seed: 0,
            prefix_policy: PrefixPolicy::Named,
            out_dir: PathBuf::from("runs"),
            mode_label: "manual-generated".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::Config { field, reason: msg }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Overrides the adaptation setup with a named preset.
    pub fn with_mode(mut self, label: &str) -> Result<Self> {
        self.model = apply_mode(&self.model, label)?;
        self.mode_label = label.to_string();
        Ok(self)
    }

    pub fn suite(&self) -> TaskSuite {
        build_suite_with(
            self.suite_seed,
            &SuiteOptions {
                prefix_policy: self.prefix_policy,
                ..SuiteOptions::default()
            },
        )
    }
}

/// Mode presets: `full-finetune`, `none`, `<enc>-<dec>` with each side one
/// of `none`, `manual`, `task`, `generated`, and the ablations
/// `manual-generated-no-mlp` and `manual-generated-post-ln`.
pub fn apply_mode(base: &ModelConfig, label: &str) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.full_finetune = false;
    cfg.use_mlp = true;
    cfg.adapter_input_post_layernorm = false;
    let bad = || Error::config("mode", format!("unknown mode `{label}`"));
    let pair = match label {
        "full-finetune" => {
            cfg.full_finetune = true;
            "none-none"
        }
        "none" => "none-none",
        "manual-generated-no-mlp" => {
            cfg.use_mlp = false;
            "manual-generated"
        }
        "manual-generated-post-ln" => {
            cfg.adapter_input_post_layernorm = true;
            "manual-generated"
        }
        other => other,
    };
    let (e, d) = pair.split_once('-').ok_or_else(bad)?;
    cfg.enc_mode = AdaptationMode::parse(e).ok_or_else(bad)?;
    cfg.dec_mode = AdaptationMode::parse(d).ok_or_else(bad)?;
    Ok(cfg)
}

/// Row labels of the adaptation matrix.
pub fn matrix_labels() -> Vec<String> {
    let sides = [AdaptationMode::Manual, AdaptationMode::Task, AdaptationMode::Generated];
    let mut v = vec!["full-finetune".to_string()];
    for e in sides {
        for d in sides {
            v.push(format!("{}-{}", e.label(), d.label()));
        }
    }
    v.push("manual-generated-no-mlp".into());
    v.push("manual-generated-post-ln".into());
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub dir: PathBuf,
    pub best_step: usize,
    pub best_dev: f32,
    pub test: Vec<f32>,
    pub test_mean: f32,
    pub ood: Vec<f32>,
    pub ood_mean: f32,
    pub trainable: u64,
    pub formula_trainable: u64,
    pub trainable_fraction_pct: f64,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Optional work done after training.
#[derive(Debug, Clone, Default)]
pub struct RunExtras {
    pub export_embeddings: bool,
    pub probe: Option<ProbeConfig>,
}

/// Trains one configuration and writes its artifacts into
/// `out_dir/mode_label`: the resolved config, metrics JSONL, loss CSV,
/// the best checkpoint and a test summary. A failed run leaves a `FAILED`
/// marker.
pub fn run(cfg: &ExperimentConfig, extras: &RunExtras) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.out_dir.join(&cfg.mode_label);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _ = std::fs::remove_file(dir.join("FAILED"));
    let result = run_in(cfg, extras, &dir);
    if let Err(e) = &result {
        let _ = std::fs::write(dir.join("FAILED"), e.to_string());
    }
    result
}

fn run_in(cfg: &ExperimentConfig, extras: &RunExtras, dir: &Path) -> Result<RunSummary> {
    write(&dir.join("config.json"), cfg.to_json()?)?;
    let suite = cfg.suite();
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train(&mut model, &suite, &cfg.train)?;
    report.write_logs(dir)?;
    checkpoint::save(&dir.join("best.hdck"), &report.best_checkpoint)?;

    let test = evaluate(&model, &suite, Split::Test)?;
    let ood = evaluate(&model, &suite, Split::Ood)?;
    let base = model.base_count() as u64;
    let formula = accounting::formula_count(&cfg.model, base);
    let summary = RunSummary {
        mode: cfg.mode_label.clone(),
        dir: dir.to_path_buf(),
        best_step: report.best_step,
        best_dev: report.best_metric,
        test_mean: mean(&test),
        test,
        ood_mean: mean(&ood),
        ood,
        trainable: model.trainable_count() as u64,
        formula_trainable: formula,
        trainable_fraction_pct: accounting::trainable_fraction(formula, base)?,
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    if extras.export_embeddings {
        export_analysis(&model, &suite, dir)?;
    }
    if let Some(p) = &extras.probe {
        let tasks = suite.classification_tasks();
        let probe = analysis::encoder_probe(&model, &suite, &tasks, p)?;
        let full: Vec<f32> = evaluate(&model, &suite, Split::Dev)?
            .into_iter()
            .enumerate()
            .filter(|(i, _)| tasks.contains(i))
            .map(|(_, v)| v)
            .collect();
        let out = serde_json::json!({
            "tasks": tasks.iter().map(|&t| suite.tasks[t].spec.name.clone()).collect::<Vec<_>>(),
            "probe_dev": probe,
            "full_dev": full,
            "probe_mean": mean(&probe),
            "full_mean": mean(&full),
        });
        write(&dir.join("probe.json"), serde_json::to_string_pretty(&out)?)?;
    }
    Ok(summary)
}

/// Embedding dumps with 2-D PCA coordinates for the train and dev splits,
/// plus silhouette scores.
pub fn export_analysis(model: &Model, suite: &TaskSuite, dir: &Path) -> Result<()> {
    let mut scores = serde_json::Map::new();
    for split in [Split::Dev, Split::Train] {
        let records = analysis::export_embeddings(model, suite, split)?;
        let points: Vec<Vec<f32>> = records.iter().map(|r| r.e.clone()).collect();
        let pca = analysis::pca_project(&points, 2)?;
        write(
            &dir.join(format!("embeddings_{}.csv", split.label())),
            analysis::embeddings_csv(&records, Some(&pca))?,
        )?;
        let by_pred = analysis::label_separation(&records, GroupKey::Prediction).ok();
        let by_task = analysis::label_separation(&records, GroupKey::Task).ok();
        scores.insert(
            split.label().into(),
            serde_json::json!({
                "silhouette_prediction": by_pred,
                "silhouette_task": by_task,
                "explained_variance": pca.ratios,
            }),
        );
    }
    write(&dir.join("analysis.json"), serde_json::to_string_pretty(&scores)?)
}

/// Runs every matrix row, sequentially or on `parallel` worker threads.
/// All rows share the base seed, so each adapts the same frozen model.
pub fn run_matrix(base: &ExperimentConfig, parallel: usize) -> Result<(Vec<RunSummary>, String, String)> {
    base.validate()?;
    let labels = matrix_labels();
    let configs = labels
        .iter()
        .map(|l| base.clone().with_mode(l))
        .collect::<Result<Vec<_>>>()?;
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallel.max(1).min(configs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run(&configs[i], &RunExtras::default());
                let failed = r.is_err();
                results.lock().unwrap()[i] = Some(r);
                if failed && workers == 1 {
                    next.store(configs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut rows = Vec::with_capacity(configs.len());
    for (label, r) in labels.iter().zip(results.into_inner().unwrap()) {
        match r {
            Some(Ok(s)) => rows.push(s),
            Some(Err(e)) => return Err(with_mode_context(e, label)),
            None => return Err(Error::Invariant(format!("matrix row `{label}` never ran"))),
        }
    }
    let (text, csv) = matrix_table(&rows);
    write(&base.out_dir.join("matrix.txt"), &text)?;
    write(&base.out_dir.join("matrix.csv"), &csv)?;
    Ok((rows, text, csv))
}

fn with_mode_context(e: Error, mode: &str) -> Error {
    match e {
        Error::Diverged { step, loss } => Error::Diverged { step, loss },
        Error::Config { field, reason } => Error::Config {
            field,
            reason: format!("{reason} (mode `{mode}`)"),
        },
        other => Error::Invariant(format!("mode `{mode}` failed: {other}")),
    }
}

pub fn matrix_table(rows: &[RunSummary]) -> (String, String) {
    let w = rows.iter().map(|r| r.mode.len()).max().unwrap_or(4).max(4);
    let mut text = format!("{:<w$}  {:>9}  {:>9}  {:>12}\n", "mode", "test", "ood", "% trainable");
    let mut csv = String::from("mode,test_mean,ood_mean,trainable_fraction_pct\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{:<w$}  {:>9.4}  {:>9.4}  {:>11.3}%",
            r.mode, r.test_mean, r.ood_mean, r.trainable_fraction_pct
        );
        let _ = writeln!(csv, "{},{},{},{}", r.mode, r.test_mean, r.ood_mean, r.trainable_fraction_pct);
    }
    (text, csv)
}

/// Accounting rows for every matrix mode at the dims of `model`.
pub fn account_table(model: &ModelConfig) -> Result<Vec<AccountRow>> {
    matrix_labels()
        .iter()
        .map(|l| accounting::account(l, &apply_mode(model, l)?))
        .collect()
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Invariant(_) => 4,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_has_distinct_labels() {
        let labels = matrix_labels();
        assert_eq!(labels.len(), 12);
        let set: std::collections::HashSet<_> = labels.iter().collect();
        assert_eq!(set.len(), labels.len());
        for l in &labels {
            apply_mode(&ModelConfig::default(), l).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn malformed_config_names_the_field() {
        let e = ExperimentConfig::from_json(r#"{"model": {"d_modle": 3}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "d_modle"), "{e}");
        assert_eq!(exit_code(&e), 2);
        let cfg = ExperimentConfig::from_json(r#"{"model": {"n_heads": 5}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "n_heads"));
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::default().with_mode("task-generated").unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::default().with_mode("manual-sideways").is_err());
    }
}
