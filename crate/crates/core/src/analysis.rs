//! Analysis of the generator's conditioning embeddings: export, PCA,
//! silhouette scores and a frozen-encoder probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::TaskCondition;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::params::{ParamKind, ParamStore};
use crate::tasks::{tokens_to_string, Split, TaskKind, TaskSuite, NUM_LABELS};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{lr_at, predict, AdamW, TrainConfig, EVAL_BATCH};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub task: String,
    pub example_id: usize,
    /// Gold class for classification examples.
    pub label: Option<usize>,
    pub prediction: String,
    pub e: Vec<f32>,
}

/// One record per example of `split`, holding the decoder generator's
/// conditioning embedding and the greedy prediction.
pub fn export_embeddings(model: &Model, suite: &TaskSuite, split: Split) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for task in &suite.tasks {
        let examples = task.split(split);
        let preds = predict(model, examples, crate::trainer::condition_for(task.spec.id, split))?;
        let mut id = 0;
        for (chunk, pchunk) in examples.chunks(EVAL_BATCH).zip(preds.chunks(EVAL_BATCH)) {
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|e| e.input.clone()).collect();
            let e = model.hyper_embedding(&inputs)?;
            let d = e.shape()[1];
            for (i, (ex, p)) in chunk.iter().zip(pchunk).enumerate() {
                out.push(EmbeddingRecord {
                    task: task.spec.name.clone(),
                    example_id: id,
                    label: ex.label,
                    prediction: tokens_to_string(p),
                    e: e.data()[i * d..(i + 1) * d].to_vec(),
                });
                id += 1;
            }
        }
    }
    Ok(out)
}

fn check_width(records: &[EmbeddingRecord]) -> Result<usize> {
    let d = records.first().map(|r| r.e.len()).unwrap_or(0);
    if records.iter().any(|r| r.e.len() != d) {
        return Err(Error::Shape("embedding widths differ within a dump".into()));
    }
    Ok(d)
}

/// CSV with header `task,example_id,label,prediction,e_0,...`, plus
/// `pc_0,...` columns when `projection` is given.
pub fn embeddings_csv(records: &[EmbeddingRecord], projection: Option<&Pca>) -> Result<String> {
    let d = check_width(records)?;
    let mut s = String::from("task,example_id,label,prediction");
    for i in 0..d {
        let _ = write!(s, ",e_{i}");
    }
    if let Some(p) = projection {
        if p.coords.len() != records.len() {
            return Err(Error::Shape("projection does not match the records".into()));
        }
        for i in 0..p.ratios.len() {
            let _ = write!(s, ",pc_{i}");
        }
    }
    s.push('\n');
    for (n, r) in records.iter().enumerate() {
        let label = r.label.map_or("-".to_string(), |l| l.to_string());
        let _ = write!(s, "{},{},{},{}", r.task, r.example_id, label, r.prediction);
        for x in &r.e {
            let _ = write!(s, ",{x}");
        }
        if let Some(p) = projection {
            for x in &p.coords[n] {
                let _ = write!(s, ",{x}");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// Parses the embedding columns of [`embeddings_csv`] output.
pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty embedding CSV".into()))?;
    let d = header.split(',').filter(|c| c.starts_with("e_")).count();
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 + d {
                return Err(Error::Parse(format!("row {}: expected at least {} fields", n + 1, 4 + d)));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| Error::Parse(format!("row {}: bad number `{s}`", n + 1)));
            Ok(EmbeddingRecord {
                task: f[0].to_string(),
                example_id: f[1].parse().map_err(|_| Error::Parse(format!("row {}: bad example id", n + 1)))?,
                label: if f[2] == "-" {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| Error::Parse(format!("row {}: bad label", n + 1)))?)
                },
                prediction: f[3].to_string(),
                e: f[4..4 + d].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Projected coordinates, one row per input point.
    pub coords: Vec<Vec<f32>>,
    /// Explained-variance ratios of the kept components, descending.
    pub ratios: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// Projects mean-centred `points` onto the top-`k` eigenvectors of their
/// covariance.
pub fn pca_project(points: &[Vec<f32>], k: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if k == 0 || k > d {
        return Err(Error::Shape(format!("cannot keep {k} components of {d}-dimensional data")));
    }
    if n < k + 1 {
        return Err(Error::Degenerate(format!("{n} points are too few for {k} components")));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points have differing widths".into()));
    }
    let mut mean = vec![0f64; d];
    for p in points {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x as f64 / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] as f64 - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("data has zero variance".into()));
    }
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect();
    let ratios = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0) / total).collect();
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| (0..d).map(|j| x[(i, j)] * v[j]).sum::<f64>() as f32)
                .collect()
        })
        .collect();
    Ok(Pca {
        coords,
        ratios,
        components,
    })
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette of `points` under the grouping `labels`, with
/// Euclidean distance.
pub fn silhouette(points: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point is required".into()));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 || sizes.values().any(|&c| c < 2) {
        return Err(Error::Degenerate("silhouette needs two or more groups of two or more points".into()));
    }
    let groups: Vec<usize> = sizes.keys().copied().collect();
    let slot = |l: usize| groups.binary_search(&l).unwrap();
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0f64; groups.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot(labels[j])] += dist(&points[i], &points[j]);
            }
        }
        let own = slot(labels[i]);
        let a = sums[own] / (sizes[&labels[i]] - 1) as f64;
        let b = groups
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != own)
            .map(|(g, l)| sums[g] / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Prediction,
    Task,
}

/// Integer group ids of records under `key`, numbered by first appearance.
pub fn group_ids(records: &[EmbeddingRecord], key: GroupKey) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let k = match key {
                GroupKey::Prediction => r.prediction.as_str(),
                GroupKey::Task => r.task.as_str(),
            };
            let next = ids.len();
            *ids.entry(k).or_insert(next)
        })
        .collect()
}

pub fn label_separation(records: &[EmbeddingRecord], key: GroupKey) -> Result<f64> {
    let points: Vec<Vec<f32>> = records.iter().map(|r| r.e.clone()).collect();
    silhouette(&points, &group_ids(records, key))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub observed: f64,
    pub null_mean: f64,
    pub null_std: f64,
}

impl PermutationTest {
    /// Standard deviations between the observed score and the null mean.
    pub fn z(&self) -> f64 {
        (self.observed - self.null_mean) / self.null_std.max(f64::MIN_POSITIVE)
    }
}

/// Silhouette under `labels` against `rounds` random relabelings.
pub fn permutation_test(points: &[Vec<f32>], labels: &[usize], rounds: usize, seed: u64) -> Result<PermutationTest> {
    let observed = silhouette(points, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut null = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        perm.shuffle(&mut rng);
        null.push(silhouette(points, &perm)?);
    }
    let mean = null.iter().sum::<f64>() / rounds as f64;
    let var = null.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (rounds.max(2) - 1) as f64;
    Ok(PermutationTest {
        observed,
        null_mean: mean,
        null_std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub peak_lr: f32,
    pub epochs: usize,
    /// Warmup as a fraction of all probe steps.
    pub warmup_fraction: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-5,
            epochs: 3,
            warmup_fraction: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Features and labels of one probed task.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub train_x: Vec<Vec<f32>>,
    pub train_y: Vec<usize>,
    pub dev_x: Vec<Vec<f32>>,
    pub dev_y: Vec<usize>,
}

/// Trains a fresh two-layer MLP shared across tasks with one linear
/// softmax head per task, and returns dev accuracy per task.
pub fn train_probe(tasks: &[ProbeData], classes: usize, cfg: &ProbeConfig) -> Result<Vec<f32>> {
    let d = tasks
        .iter()
        .flat_map(|t| t.train_x.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Degenerate("probe has no training data".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let bound = 1.0 / (d as f32).sqrt();
    let add = |store: &mut ParamStore, name: String, t: Tensor| store.insert(name, ParamKind::Probe, t.with_requires_grad(true));
    let w1 = add(&mut store, "mlp.w1".into(), Tensor::uniform(&[d, d], bound, &mut rng))?;
    let b1 = add(&mut store, "mlp.b1".into(), Tensor::zeros(&[d]))?;
    let w2 = add(&mut store, "mlp.w2".into(), Tensor::uniform(&[d, d], bound, &mut rng))?;
    let b2 = add(&mut store, "mlp.b2".into(), Tensor::zeros(&[d]))?;
    let heads: Vec<_> = (0..tasks.len())
        .map(|i| {
            Ok((
                add(&mut store, format!("head.{i}.w"), Tensor::uniform(&[d, classes], bound, &mut rng))?,
                add(&mut store, format!("head.{i}.b"), Tensor::zeros(&[classes]))?,
            ))
        })
        .collect::<Result<_>>()?;

    let forward = |store: &ParamStore, tape: &mut Tape, task: usize, x: &[&Vec<f32>]| -> Result<crate::tensor::Var> {
        let flat: Vec<f32> = x.iter().flat_map(|r| r.iter().copied()).collect();
        let xv = tape.constant(&[x.len(), d], flat)?;
        let (w1, b1, w2, b2) = (store.bind(tape, w1), store.bind(tape, b1), store.bind(tape, w2), store.bind(tape, b2));
        let h = tape.linear(xv, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.linear(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        let (hw, hb) = heads[task];
        let (hw, hb) = (store.bind(tape, hw), store.bind(tape, hb));
        let o = tape.linear(h, hw)?;
        tape.add_bias(o, hb)
    };

    let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
    let steps_per_epoch: usize = tasks.iter().map(|t| t.train_x.len().div_ceil(cfg.batch_size)).sum();
    let total = steps_per_epoch * cfg.epochs;
    let sched = TrainConfig {
        peak_lr: cfg.peak_lr,
        total_steps: total,
        warmup_steps: ((total as f32 * cfg.warmup_fraction) as usize).min(total),
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        batches.clear();
        for (ti, t) in tasks.iter().enumerate() {
            let mut idx: Vec<usize> = (0..t.train_x.len()).collect();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(cfg.batch_size).map(|c| (ti, c.to_vec())));
        }
        batches.shuffle(&mut rng);
        for (ti, idx) in &batches {
            step += 1;
            let x: Vec<&Vec<f32>> = idx.iter().map(|&i| &tasks[*ti].train_x[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| tasks[*ti].train_y[i]).collect();
            let mut tape = Tape::new();
            let logits = forward(&store, &mut tape, *ti, &x)?;
            let loss = tape.cross_entropy(logits, &y, usize::MAX)?;
            tape.backward(loss)?;
            store.zero_grads();
            store.pull_grads(&tape);
            // untouched heads of other tasks get a zero gradient
            for id in store.ids().collect::<Vec<_>>() {
                if store.get(id).grad().is_none() {
                    let n = store.get(id).len();
                    store.get_mut(id).accumulate_grad(&vec![0.0; n]);
                }
            }
            opt.step(&mut store, lr_at(step.min(total), &sched)?, &sched)?;
        }
    }

    tasks
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            if t.dev_x.is_empty() {
                return Ok(0.0);
            }
            let mut tape = Tape::inference();
            let x: Vec<&Vec<f32>> = t.dev_x.iter().collect();
            let logits = forward(&store, &mut tape, ti, &x)?;
            let vals = tape.value(logits);
            let right = t
                .dev_y
                .iter()
                .enumerate()
                .filter(|&(i, &y)| argmax(&vals[i * classes..(i + 1) * classes]) == y)
                .count();
            Ok(right as f32 / t.dev_y.len() as f32)
        })
        .collect()
}

fn pooled_features(model: &Model, inputs: &[Vec<usize>], cond: TaskCondition) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let t = model.pooled_encoder(chunk, cond)?;
        let d = t.shape()[1];
        out.extend(t.data().chunks(d).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Probes the frozen encoder (with its adapters) on classification tasks,
/// returning dev accuracy per task in the order given.
pub fn encoder_probe(model: &Model, suite: &TaskSuite, tasks: &[usize], cfg: &ProbeConfig) -> Result<Vec<f32>> {
    let mut data = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let task = suite.task(t)?;
        if task.spec.kind() != TaskKind::Classification {
            return Err(Error::UnsupportedMode(format!("task `{}` is not a classification task", task.spec.name)));
        }
        let feats = |split: Split| -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
            let ex = task.split(split);
            let inputs: Vec<Vec<usize>> = ex.iter().map(|e| e.input.clone()).collect();
            let x = pooled_features(model, &inputs, TaskCondition::Task(t))?;
            Ok((x, ex.iter().map(|e| e.label.unwrap()).collect()))
        };
        let (train_x, train_y) = feats(Split::Train)?;
        let (dev_x, dev_y) = feats(Split::Dev)?;
        data.push(ProbeData {
            train_x,
            train_y,
            dev_x,
            dev_y,
        });
    }
    train_probe(&data, NUM_LABELS, cfg)
}

/// Random points around `centres`, for tests and examples.
pub fn gaussian_clusters<R: Rng>(centres: &[Vec<f32>], per: usize, spread: f32, rng: &mut R) -> (Vec<Vec<f32>>, Vec<usize>) {
    let normal = rand_distr::Normal::new(0.0, spread as f64).unwrap();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (l, c) in centres.iter().enumerate() {
        for _ in 0..per {
            pts.push(c.iter().map(|&x| x + rng.sample(normal) as f32).collect());
            labels.push(l);
        }
    }
    (pts, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_one_component() {
        let pts: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 2.0 * i as f32, -(i as f32)]).collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.ratios[0] - 1.0).abs() < 1e-6);
        assert!(p.ratios.iter().sum::<f64>() <= 1.0 + 1e-6);
        assert!(pca_project(&pts, 4).is_err());
        assert!(pca_project(&pts[..2], 2).is_err());
    }

    #[test]
    fn projection_is_isometric_on_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // points in span{u, v} of R^5
        let u = [0.6f32, 0.0, 0.8, 0.0, 0.0];
        let v = [0.0f32, 1.0, 0.0, 0.0, 0.0];
        let pts: Vec<Vec<f32>> = (0..30)
            .map(|_| {
                let (a, b): (f32, f32) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                (0..5).map(|j| a * u[j] + b * v[j] + 1.0).collect()
            })
            .collect();
        let p = pca_project(&pts, 2).unwrap();
        for i in 0..pts.len() {
            for j in 0..i {
                let d0 = dist(&pts[i], &pts[j]);
                let d1 = dist(&p.coords[i], &p.coords[j]);
                assert!((d0 - d1).abs() / d0 < 1e-4, "{d0} {d1}");
            }
        }
    }

    #[test]
    fn pca_ignores_record_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f32>> = (0..40).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = pca_project(&pts, 3).unwrap();
        let b = pca_project(&rev, 3).unwrap();
        for (x, y) in a.ratios.iter().zip(&b.ratios) {
            assert!((x - y).abs() < 1e-9);
        }
        for (i, row) in a.coords.iter().enumerate() {
            for (k, &c) in row.iter().enumerate() {
                assert!((c.abs() - b.coords[39 - i][k].abs()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn silhouette_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (pts, labels) = gaussian_clusters(&[vec![0.0, 0.0], vec![100.0, 100.0]], 20, 1.0, &mut rng);
        assert!(silhouette(&pts, &labels).unwrap() > 0.9);

        let pts: Vec<Vec<f32>> = (0..1000).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..3)).collect();
        assert!(silhouette(&pts, &labels).unwrap().abs() < 0.1);

        assert!(silhouette(&pts[..5], &[0; 5]).is_err());
        assert!(silhouette(&pts[..3], &[0, 0, 1]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            EmbeddingRecord {
                task: "copy".into(),
                example_id: 0,
                label: None,
                prediction: "a b".into(),
                e: vec![1.234_567_8, -3.0e-7, 12345.678],
            },
            EmbeddingRecord {
                task: "parity".into(),
                example_id: 1,
                label: Some(1),
                prediction: "1".into(),
                e: vec![0.1, 0.2, 0.3],
            },
        ];
        let back = parse_embeddings_csv(&embeddings_csv(&recs, None).unwrap()).unwrap();
        assert_eq!(back, recs);
        assert!(embeddings_csv(&recs, None).unwrap().starts_with("task,example_id,label,prediction,e_0,e_1,e_2\n"));
    }

    #[test]
    fn separable_probe_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centres = vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 0.0]];
        let (train_x, train_y) = gaussian_clusters(&centres, 60, 0.1, &mut rng);
        let (dev_x, dev_y) = gaussian_clusters(&centres, 20, 0.1, &mut rng);
        let data = ProbeData {
            train_x,
            train_y,
            dev_x,
            dev_y,
        };
        let cfg = ProbeConfig {
            peak_lr: 1e-2,
            epochs: 20,
            ..ProbeConfig::default()
        };
        assert_eq!(train_probe(&[data], 3, &cfg).unwrap(), vec![1.0]);
    }
}
