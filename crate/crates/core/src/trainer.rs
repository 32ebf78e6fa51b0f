//! Multi-task training: proportional task sampling, AdamW with linear
//! warmup and decay, periodic dev evaluation and best-checkpoint selection.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::TaskCondition;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tasks::{metric, Example, Split, TaskData, TaskSuite};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            eval_every: 250,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "exceeds total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::config("peak_lr", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f32> {
    if step > cfg.total_steps {
        return Err(Error::Index(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    let (s, w, t) = (step as f64, cfg.warmup_steps as f64, cfg.total_steps as f64);
    let peak = cfg.peak_lr as f64;
    let lr = if step < cfg.warmup_steps {
        peak * s / w
    } else if cfg.total_steps == cfg.warmup_steps {
        peak
    } else {
        peak * (t - s) / (t - w)
    };
    Ok(lr as f32)
}

/// AdamW over the trainable tensors of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
    t: u32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update with learning rate `lr`. Every trainable tensor must
    /// carry a gradient; frozen tensors are never touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32, cfg: &TrainConfig) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for id in ids {
            let len = store.get(id).len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; len]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; len]);
            let t = store.get_mut(id);
            let g = t.grad().unwrap().to_vec();
            let w = t.data_mut();
            for i in 0..len {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

/// Draws a task index with probability proportional to its size.
pub fn proportional_sample<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(sizes).map_err(|_| Error::Degenerate("no task has any examples".into()))?;
    Ok(dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub task: String,
    pub metric_name: String,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: String,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_metric: f32,
    /// Mean dev metric at the last evaluation.
    pub final_metric: f32,
    pub best_checkpoint: Vec<(String, Tensor)>,
}

impl TrainReport {
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.evals {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,task,loss\n");
        for r in &self.losses {
            let _ = writeln!(s, "{},{},{}", r.step, r.task, r.loss);
        }
        s
    }

    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        let m = dir.join("metrics.jsonl");
        std::fs::write(&m, self.metrics_jsonl()?).map_err(|e| Error::io(&m, e))?;
        let l = dir.join("loss.csv");
        std::fs::write(&l, self.loss_csv()).map_err(|e| Error::io(&l, e))
    }
}

/// Conditioning used for a split: task ids in domain, the mean task
/// embedding out of domain.
pub fn condition_for(task: usize, split: Split) -> TaskCondition {
    match split {
        Split::Ood => TaskCondition::MeanEmbedding,
        _ => TaskCondition::Task(task),
    }
}

pub const EVAL_BATCH: usize = 100;

/// Greedy predictions for a list of examples sharing `cond`.
pub fn predict(model: &Model, examples: &[Example], cond: TaskCondition) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|e| e.input.clone()).collect();
        out.extend(model.greedy(&inputs, cond)?);
    }
    Ok(out)
}

pub fn evaluate_task(model: &Model, task: &TaskData, split: Split) -> Result<f32> {
    let examples = task.split(split);
    let preds = predict(model, examples, condition_for(task.spec.id, split))?;
    let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    metric(task.spec.kind(), &preds, &targets)
}

/// Metric per task on `split`, in task order.
pub fn evaluate(model: &Model, suite: &TaskSuite, split: Split) -> Result<Vec<f32>> {
    suite.tasks.iter().map(|t| evaluate_task(model, t, split)).collect()
}

pub fn mean(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f32>() / xs.len() as f32
    }
}

/// Trains `model` on `suite` and leaves it holding the best checkpoint.
pub fn train(model: &mut Model, suite: &TaskSuite, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if suite.num_tasks() > model.cfg.num_tasks {
        return Err(Error::config("num_tasks", format!("model has {} task slots, suite has {}", model.cfg.num_tasks, suite.num_tasks())));
    }
    let (max_in, max_out) = suite.max_lengths();
    if max_in > model.cfg.max_len || max_out > model.cfg.max_len {
        return Err(Error::config("max_len", format!("suite needs length {}", max_in.max(max_out))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes = suite.train_sizes();
    let mut opt = AdamW::new();
    let trainable = model.trainable_count() > 0;
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.total_steps),
        evals: Vec::new(),
        best_step: 0,
        best_metric: f32::NEG_INFINITY,
        final_metric: f32::NEG_INFINITY,
        best_checkpoint: Vec::new(),
    };

    let eval_steps = |step: usize| step % cfg.eval_every == 0 || step == cfg.total_steps;
    for step in 1..=cfg.total_steps {
        let t = proportional_sample(&sizes, &mut rng)?;
        let pool = &suite.tasks[t].train;
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|_| &pool[rng.gen_range(0..pool.len())]).collect();
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &batch, TaskCondition::Task(t))?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        report.losses.push(LossRecord {
            step,
            task: suite.tasks[t].spec.name.clone(),
            loss: value,
        });
        if trainable {
            tape.backward(loss)?;
            model.store.zero_grads();
            model.store.pull_grads(&tape);
            opt.step(&mut model.store, lr_at(step, cfg)?, cfg)?;
        }
        if eval_steps(step) {
            let scores = evaluate(model, suite, Split::Dev)?;
            for (task, &value) in suite.tasks.iter().zip(&scores) {
                report.evals.push(EvalRecord {
                    step,
                    task: task.spec.name.clone(),
                    metric_name: task.spec.metric_name().into(),
                    value,
                });
            }
            let m = mean(&scores);
            report.final_metric = m;
            if m > report.best_metric || report.best_checkpoint.is_empty() {
                report.best_metric = m;
                report.best_step = step;
                report.best_checkpoint = model.store.snapshot();
            }
        }
    }
    model.store.zero_grads();
    if !report.best_checkpoint.is_empty() {
        model.store.restore(&report.best_checkpoint)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn cfg(total: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_steps: warmup,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(2000, 500);
        assert!((lr_at(500, &c).unwrap() - 3e-4).abs() < 1e-12);
        assert!((lr_at(250, &c).unwrap() - 1.5e-4).abs() < 1e-10);
        assert_eq!(lr_at(2000, &c).unwrap(), 0.0);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert!(lr_at(2001, &c).is_err());
        let flat = cfg(10, 10);
        assert!((lr_at(10, &flat).unwrap() - 3e-4).abs() < 1e-12);
    }

    fn scalar_store(w: f32) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", ParamKind::Probe, Tensor::full(&[1], w).with_requires_grad(true))
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let (mut s, id) = scalar_store(1.5);
        s.get_mut(id).accumulate_grad(&[0.0]);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        AdamW::new().step(&mut s, 0.1, &c).unwrap();
        assert_eq!(s.get(id).data(), &[1.5]);
    }

    #[test]
    fn quadratic_converges() {
        let (mut s, id) = scalar_store(0.0);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new();
        for _ in 0..500 {
            let w = s.get(id).data()[0];
            s.zero_grads();
            s.get_mut(id).accumulate_grad(&[2.0 * (w - 3.0)]);
            opt.step(&mut s, 0.1, &c).unwrap();
        }
        assert!((s.get(id).data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn missing_grad_is_an_error_and_frozen_is_untouched() {
        let (mut s, _) = scalar_store(0.0);
        let frozen = s.insert("f", ParamKind::Base, Tensor::full(&[2], 4.0)).unwrap();
        assert!(matches!(
            AdamW::new().step(&mut s, 0.1, &TrainConfig::default()),
            Err(Error::MissingGrad(n)) if n == "w"
        ));
        s.get_mut(s.id("w").unwrap()).accumulate_grad(&[1.0]);
        AdamW::new().step(&mut s, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(s.get(frozen).data(), &[4.0, 4.0]);
    }

    #[test]
    fn proportional_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..100).all(|_| proportional_sample(&[5], &mut rng).unwrap() == 0));
        let hits = (0..10_000)
            .filter(|_| proportional_sample(&[300, 100], &mut rng).unwrap() == 0)
            .count();
        assert!((hits as f32 / 10_000.0 - 0.75).abs() < 0.02);

        let mut counts = [0f64; 4];
        for _ in 0..10_000 {
            counts[proportional_sample(&[1, 1, 1, 1], &mut rng).unwrap()] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 2500.0).powi(2) / 2500.0).sum();
        // chi-square critical value, 3 degrees of freedom, alpha 0.01
        assert!(chi2 < 11.345, "chi2 {chi2}");
        assert!(proportional_sample(&[], &mut rng).is_err());
        assert!(proportional_sample(&[0, 0], &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let c = cfg(10, 20);
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "warmup_steps"));
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "batch_size"));
    }
}
