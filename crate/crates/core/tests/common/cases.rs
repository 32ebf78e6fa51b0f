//! Gradient-check cases: every differentiable primitive, a few
//! composites and the end-to-end model loss, each a function of a seed.

use super::{away_from_zero, bounded, check, check_model, dim, rng, Report, SEEDS};
use hyperdecoder::adaptation::{adapter_forward, AdapterVars, TaskCondition};
use hyperdecoder::model::{seq2seq_batch, Model};
use hyperdecoder::params::ParamKind;
use hyperdecoder::tasks::{build_suite, Example, TaskSuite, PAD};
use hyperdecoder::transformer::{scaled_dot_attention, AdaptationMode, ModelConfig};
use hyperdecoder::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::OnceLock;

pub struct Case {
    pub name: &'static str,
    pub seeds: u64,
    pub run: fn(u64) -> Report,
}

#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Runs a case over its seeds, panicking on the first failure.
pub fn run_case(case: &Case) -> Summary {
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for seed in 0..case.seeds {
        let r = (case.run)(seed);
        r.assert_ok(&format!("{} (seed {seed})", case.name));
        worst = worst.max(r.rel_err);
        checked += r.checked;
        skipped += r.skipped;
    }
    assert!(skipped * 10 <= checked, "{}: too many coordinates at kinks", case.name);
    Summary { worst, checked, skipped }
}

pub fn find(name: &str) -> &'static Case {
    CASES.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no case {name}"))
}

fn side(r: &mut rand_chacha::ChaCha8Rng) -> usize {
    dim(r, 1, 8)
}

fn matmul(s: u64) -> Report {
    let mut r = rng(s);
    let (m, k, n) = (side(&mut r), side(&mut r), side(&mut r));
    let a = bounded(&[m, k], &mut r);
    let b = bounded(&[k, n], &mut r);
    check(&[a, b], s, |t, v| t.matmul(v[0], v[1]))
}

fn linear(s: u64) -> Report {
    let mut r = rng(s);
    let (b, m, k, n) = (dim(&mut r, 1, 3), side(&mut r), side(&mut r), side(&mut r));
    let x = bounded(&[b, m, k], &mut r);
    let w = bounded(&[k, n], &mut r);
    check(&[x, w], s, |t, v| t.linear(v[0], v[1]))
}

fn linear_t(s: u64) -> Report {
    let mut r = rng(s);
    let (m, k, n) = (side(&mut r), side(&mut r), side(&mut r));
    let x = bounded(&[m, k], &mut r);
    let w = bounded(&[n, k], &mut r);
    check(&[x, w], s, |t, v| t.linear_t(v[0], v[1]))
}

fn bmm_with(s: u64, trans: bool) -> Report {
    let mut r = rng(s);
    let (b, m, k, n) = (dim(&mut r, 1, 3), side(&mut r), side(&mut r), side(&mut r));
    let x = bounded(&[b, m, k], &mut r);
    let y = if trans { bounded(&[b, n, k], &mut r) } else { bounded(&[b, k, n], &mut r) };
    check(&[x, y], s, |t, v| t.bmm(v[0], v[1], trans))
}

fn bmm(s: u64) -> Report {
    bmm_with(s, false)
}

fn bmm_t(s: u64) -> Report {
    bmm_with(s, true)
}

fn add(s: u64) -> Report {
    let mut r = rng(s);
    let shape = [side(&mut r), side(&mut r)];
    check(&[bounded(&shape, &mut r), bounded(&shape, &mut r)], s, |t, v| t.add(v[0], v[1]))
}

fn mul(s: u64) -> Report {
    let mut r = rng(s);
    let shape = [side(&mut r), side(&mut r)];
    check(&[bounded(&shape, &mut r), bounded(&shape, &mut r)], s, |t, v| t.mul(v[0], v[1]))
}

fn scale(s: u64) -> Report {
    let mut r = rng(s);
    let c: f32 = r.gen_range(-2.0..2.0);
    let shape = [side(&mut r), side(&mut r)];
    check(&[bounded(&shape, &mut r)], s, |t, v| Ok(t.scale(v[0], c)))
}

fn relu(s: u64) -> Report {
    let mut r = rng(s);
    let shape = [side(&mut r), side(&mut r)];
    check(&[away_from_zero(&shape, 1e-2, &mut r)], s, |t, v| Ok(t.relu(v[0])))
}

fn add_bias(s: u64) -> Report {
    let mut r = rng(s);
    let (m, n) = (side(&mut r), side(&mut r));
    check(&[bounded(&[m, n], &mut r), bounded(&[n], &mut r)], s, |t, v| t.add_bias(v[0], v[1]))
}

fn add_batch_bias(s: u64) -> Report {
    let mut r = rng(s);
    let (b, m, n) = (dim(&mut r, 1, 3), side(&mut r), side(&mut r));
    check(&[bounded(&[b, m, n], &mut r), bounded(&[b, n], &mut r)], s, |t, v| {
        t.add_batch_bias(v[0], v[1])
    })
}

fn layer_norm(s: u64) -> Report {
    let mut r = rng(s);
    let (m, d) = (side(&mut r), dim(&mut r, 2, 8));
    let x = bounded(&[m, d], &mut r);
    let g = bounded(&[d], &mut r);
    let b = bounded(&[d], &mut r);
    check(&[x, g, b], s, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6))
}

fn softmax(s: u64) -> Report {
    let mut r = rng(s);
    let (m, n) = (side(&mut r), side(&mut r));
    check(&[bounded(&[m, n], &mut r)], s, |t, v| t.softmax(v[0], None))
}

fn masked_softmax(s: u64) -> Report {
    let mut r = rng(s);
    let (m, n) = (side(&mut r), dim(&mut r, 2, 8));
    let mut mask: Vec<bool> = (0..m * n).map(|_| r.gen_bool(0.6)).collect();
    for row in 0..m {
        mask[row * n + r.gen_range(0..n)] = true;
    }
    let x = bounded(&[m, n], &mut r);
    check(&[x], s, |t, v| t.softmax(v[0], Some(&mask)))
}

fn cross_entropy(s: u64) -> Report {
    let mut r = rng(s);
    let (m, n) = (side(&mut r), dim(&mut r, 2, 8));
    let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
    let ignore = targets[0];
    let logits = bounded(&[m, n], &mut r);
    check(&[logits], s, |t, v| t.cross_entropy(v[0], &targets, ignore))
}

fn mean_pool(s: u64) -> Report {
    let mut r = rng(s);
    let (b, n, d) = (dim(&mut r, 1, 3), side(&mut r), side(&mut r));
    let mut keep: Vec<bool> = (0..b * n).map(|_| r.gen_bool(0.7)).collect();
    for i in 0..b {
        keep[i * n] = true;
    }
    check(&[bounded(&[b, n, d], &mut r)], s, |t, v| t.mean_pool(v[0], &keep))
}

fn embedding(s: u64) -> Report {
    let mut r = rng(s);
    let (vocab, d, k) = (side(&mut r), side(&mut r), side(&mut r));
    let ids: Vec<usize> = (0..k).map(|_| r.gen_range(0..vocab)).collect();
    check(&[bounded(&[vocab, d], &mut r)], s, |t, v| t.embedding(v[0], &ids))
}

fn reshape(s: u64) -> Report {
    let mut r = rng(s);
    let (m, n) = (side(&mut r), side(&mut r));
    check(&[bounded(&[m, n], &mut r)], s, |t, v| t.reshape(v[0], &[n, m]))
}

fn swap_axes12(s: u64) -> Report {
    let mut r = rng(s);
    let dims = [dim(&mut r, 1, 2), dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    check(&[bounded(&dims, &mut r)], s, |t, v| t.swap_axes12(v[0]))
}

fn concat(s: u64) -> Report {
    let mut r = rng(s);
    let (m, p, q) = (side(&mut r), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    check(&[bounded(&[m, p], &mut r), bounded(&[m, q], &mut r)], s, |t, v| t.concat(v[0], v[1]))
}

fn broadcast_rows(s: u64) -> Report {
    let mut r = rng(s);
    let (rows, q) = (side(&mut r), side(&mut r));
    check(&[bounded(&[q], &mut r)], s, |t, v| t.broadcast_rows(v[0], rows))
}

fn sum(s: u64) -> Report {
    let mut r = rng(s);
    let shape = [side(&mut r), side(&mut r)];
    check(&[bounded(&shape, &mut r)], s, |t, v| Ok(t.sum(v[0])))
}

fn mean(s: u64) -> Report {
    let mut r = rng(s);
    let shape = [side(&mut r), side(&mut r)];
    check(&[bounded(&shape, &mut r)], s, |t, v| Ok(t.mean(v[0])))
}

fn adapter_with(s: u64, per_example: bool) -> Report {
    let mut r = rng(s);
    let (b, n, d, a) = (dim(&mut r, 1, 3), dim(&mut r, 1, 6), dim(&mut r, 2, 8), dim(&mut r, 1, 4));
    let lead: Vec<usize> = if per_example { vec![b] } else { vec![] };
    let with = |tail: &[usize]| [lead.as_slice(), tail].concat();
    let inputs = [
        bounded(&[b, n, d], &mut r),
        bounded(&with(&[d, a]), &mut r),
        bounded(&with(&[a]), &mut r),
        bounded(&with(&[a, d]), &mut r),
        bounded(&with(&[d]), &mut r),
    ];
    check(&inputs, s, |t, v| {
        let p = AdapterVars {
            w_down: v[1],
            b_down: v[2],
            w_up: v[3],
            b_up: v[4],
        };
        adapter_forward(t, v[0], &p)
    })
}

fn adapter(s: u64) -> Report {
    adapter_with(s, false)
}

fn adapter_per_example(s: u64) -> Report {
    adapter_with(s, true)
}

fn attention(s: u64) -> Report {
    let mut r = rng(s);
    let (bh, nq, nk, dh) = (dim(&mut r, 1, 3), dim(&mut r, 1, 6), dim(&mut r, 1, 6), side(&mut r));
    let mut mask: Vec<bool> = (0..bh * nq * nk).map(|_| r.gen_bool(0.7)).collect();
    for row in 0..bh * nq {
        mask[row * nk] = true;
    }
    let inputs = [bounded(&[bh, nq, dh], &mut r), bounded(&[bh, nk, dh], &mut r), bounded(&[bh, nk, dh], &mut r)];
    check(&inputs, s, |t, v| Ok(scaled_dot_attention(t, v[0], v[1], v[2], Some(&mask))?.0))
}

pub fn tiny(enc: AdaptationMode, dec: AdaptationMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_heads: 2,
        d_ff: 16,
        enc_adapter_dim: 2,
        dec_adapter_dim: 2,
        hypernet_bottleneck: 3,
        layer_embed_dim: 4,
        task_embed_dim: 4,
        enc_mode: enc,
        dec_mode: dec,
        ..ModelConfig::default()
    }
}

fn suite() -> &'static TaskSuite {
    static SUITE: OnceLock<TaskSuite> = OnceLock::new();
    SUITE.get_or_init(|| build_suite(0))
}

/// Re-draws every non-base parameter so that no gradient vanishes merely
/// because of initialization.
fn scramble(model: &mut Model, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.kind(id) != ParamKind::Base).collect();
    for id in ids {
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::randn(&shape, 0.2, &mut r)).unwrap();
    }
}

fn model_loss(cfg: ModelConfig, s: u64, coords_per_seed: usize) -> Report {
    let suite = suite();
    let mut model = Model::new(cfg, s).unwrap();
    scramble(&mut model, s);
    let mut r = rng(s);
    let task = r.gen_range(0..suite.num_tasks());
    let examples: Vec<Example> = suite.tasks[task].train.choose_multiple(&mut r, 3).cloned().collect();
    let trainable: Vec<_> = model.store.ids().filter(|&id| model.store.get(id).requires_grad()).collect();
    let coords: Vec<(String, usize)> = (0..coords_per_seed)
        .map(|_| {
            let id = *trainable.choose(&mut r).unwrap();
            let j = r.gen_range(0..model.store.get(id).len());
            (model.store.name(id).to_string(), j)
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let (enc, dec, targets) = seq2seq_batch(&refs).unwrap();
    let rows = targets.len();
    check_model(&mut model, &coords, &targets, PAD, |m, tape| {
        let z = m.logits(tape, &enc, &dec, TaskCondition::Task(task))?;
        tape.reshape(z, &[rows, m.cfg.vocab_size])
    })
}

fn hyperdecoder_loss(s: u64) -> Report {
    model_loss(tiny(AdaptationMode::Manual, AdaptationMode::Generated), s, 24)
}

fn hyperdecoder_ablation_loss(s: u64) -> Report {
    let mut cfg = tiny(AdaptationMode::Manual, AdaptationMode::Generated);
    cfg.use_mlp = false;
    cfg.adapter_input_post_layernorm = true;
    model_loss(cfg, s, 16)
}

fn task_task_loss(s: u64) -> Report {
    model_loss(tiny(AdaptationMode::Task, AdaptationMode::Task), s, 16)
}

fn generated_generated_loss(s: u64) -> Report {
    model_loss(tiny(AdaptationMode::Generated, AdaptationMode::Generated), s, 16)
}

fn manual_manual_loss(s: u64) -> Report {
    model_loss(tiny(AdaptationMode::Manual, AdaptationMode::Manual), s, 16)
}

fn full_finetune_loss(s: u64) -> Report {
    let mut cfg = tiny(AdaptationMode::None, AdaptationMode::None);
    cfg.full_finetune = true;
    model_loss(cfg, s, 24)
}

macro_rules! cases {
    ($($f:ident : $n:expr),* $(,)?) => {
        pub static CASES: &[Case] = &[$(Case { name: stringify!($f), seeds: $n, run: $f }),*];
    };
}

cases! {
    matmul: SEEDS,
    linear: SEEDS,
    linear_t: SEEDS,
    bmm: SEEDS,
    bmm_t: SEEDS,
    add: SEEDS,
    mul: SEEDS,
    scale: SEEDS,
    relu: SEEDS,
    add_bias: SEEDS,
    add_batch_bias: SEEDS,
    layer_norm: SEEDS,
    softmax: SEEDS,
    masked_softmax: SEEDS,
    cross_entropy: SEEDS,
    mean_pool: SEEDS,
    embedding: SEEDS,
    reshape: SEEDS,
    swap_axes12: SEEDS,
    concat: SEEDS,
    broadcast_rows: SEEDS,
    sum: SEEDS,
    mean: SEEDS,
    adapter: SEEDS,
    adapter_per_example: SEEDS,
    attention: SEEDS,
    hyperdecoder_loss: SEEDS,
    hyperdecoder_ablation_loss: 20,
    task_task_loss: 20,
    generated_generated_loss: 20,
    manual_manual_loss: 20,
    full_finetune_loss: 20,
}
