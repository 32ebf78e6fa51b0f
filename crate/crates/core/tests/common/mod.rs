//! Shared test oracles.
#![allow(dead_code)]

pub mod cases;

use hyperdecoder::model::Model;
use hyperdecoder::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in [-2, 2].
pub fn bounded(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 2.0, rng).with_requires_grad(true)
}

/// Like [`bounded`] but with every entry at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

pub fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

#[derive(Debug, Clone, Copy)]
pub struct Report {
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Report {
    pub fn assert_ok(&self, what: &str) {
        assert!(self.checked > 0, "{what}: every coordinate was skipped");
        assert!(self.rel_err < TOL, "{what}: relative error {:e}", self.rel_err);
    }
}

/// Compares analytic and central-difference gradients, norm-wise. The
/// denominator is floored at 1: an f32 forward pass rounds each output to
/// about 1e-7 relative, which at h = 1e-3 leaves roughly 1e-4 of absolute
/// noise in every difference quotient.
///
/// A coordinate whose one-sided differences disagree sits on a kink and
/// is left out of both vectors.
pub struct Comparison {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    skipped: usize,
}

impl Comparison {
    pub fn new() -> Self {
        Self {
            analytic: Vec::new(),
            numeric: Vec::new(),
            skipped: 0,
        }
    }

    pub fn push(&mut self, analytic: f32, plus: f64, centre: f64, minus: f64, h: f64) {
        let fwd = (plus - centre) / h;
        let bwd = (centre - minus) / h;
        let central = (plus - minus) / (2.0 * h);
        if (fwd - bwd).abs() > 5e-4 + 5e-3 * central.abs() {
            self.skipped += 1;
            return;
        }
        self.analytic.push(analytic as f64);
        self.numeric.push(central);
    }

    pub fn report(&self) -> Report {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric)).max(1.0);
        Report {
            rel_err: norm(&diff) / scale,
            checked: self.analytic.len(),
            skipped: self.skipped,
        }
    }
}

fn weighted(out: &[f32], w: &[f64]) -> f64 {
    out.iter().zip(w).map(|(&o, &w)| o as f64 * w).sum()
}

/// Gradient check of `f` with respect to every entry of `inputs`, through
/// the scalar `sum(w ⊙ f(inputs))` for fixed random weights `w`.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> Report
where
    F: Fn(&mut Tape, &[Var]) -> hyperdecoder::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let n = tape.value(out).len();
    let mut wr = rng(seed ^ 0x5eed);
    let w: Vec<f32> = (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect();
    let w64: Vec<f64> = w.iter().map(|&x| x as f64).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(&shape, w).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).expect("backward");
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        weighted(tape.value(out), &w64)
    };
    let centre = eval(inputs);
    let mut cmp = Comparison::new();
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for j in 0..t.len() {
            let x = t.data()[j];
            work[i].data_mut()[j] = x + H;
            let plus = eval(&work);
            work[i].data_mut()[j] = x - H;
            let minus = eval(&work);
            work[i].data_mut()[j] = x;
            let h = ((x + H) as f64 - (x - H) as f64) / 2.0;
            cmp.push(grads[i][j], plus, centre, minus, h);
        }
    }
    cmp.report()
}

/// Mean cross-entropy of `logits[n, V]` in f64, skipping `ignore`.
pub fn cross_entropy_f64(logits: &[f32], targets: &[usize], ignore: usize) -> f64 {
    let v = logits.len() / targets.len();
    let (mut total, mut count) = (0.0, 0);
    for (row, &t) in logits.chunks(v).zip(targets) {
        if t == ignore {
            continue;
        }
        let max = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        total += z.ln() - (row[t] as f64 - max);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Gradient check of a model's token cross-entropy at the listed
/// `(param name, flat index)` coordinates. `logits` returns `[n, V]`
/// scores; the analytic side differentiates the tape's cross-entropy and
/// the numeric side recomputes it in f64.
pub fn check_model<F>(model: &mut Model, coords: &[(String, usize)], targets: &[usize], ignore: usize, logits: F) -> Report
where
    F: Fn(&Model, &mut Tape) -> hyperdecoder::Result<Var>,
{
    let mut tape = Tape::new();
    let z = logits(model, &mut tape).expect("forward");
    let l = tape.cross_entropy(z, targets, ignore).expect("loss");
    tape.backward(l).expect("backward");
    model.store.zero_grads();
    model.store.pull_grads(&tape);
    let eval = |model: &Model| -> f64 {
        let mut tape = Tape::inference();
        let z = logits(model, &mut tape).expect("forward");
        cross_entropy_f64(tape.value(z), targets, ignore)
    };
    let centre = eval(model);
    let mut cmp = Comparison::new();
    for (name, j) in coords {
        let id = model.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let g = model.store.get(id).grad().map_or(0.0, |g| g[*j]);
        let x = model.store.get(id).data()[*j];
        model.store.get_mut(id).data_mut()[*j] = x + H;
        let plus = eval(model);
        model.store.get_mut(id).data_mut()[*j] = x - H;
        let minus = eval(model);
        model.store.get_mut(id).data_mut()[*j] = x;
        let h = ((x + H) as f64 - (x - H) as f64) / 2.0;
        cmp.push(g, plus, centre, minus, h);
    }
    cmp.report()
}
