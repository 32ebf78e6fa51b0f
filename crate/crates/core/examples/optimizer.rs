//! Warmup/decay schedule, AdamW on a quadratic, and proportional task
//! sampling.

use hyperdecoder::params::{ParamKind, ParamStore};
use hyperdecoder::trainer::{lr_at, proportional_sample, AdamW, TrainConfig};
use hyperdecoder::{Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = TrainConfig {
        peak_lr: 0.05,
        warmup_steps: 20,
        total_steps: 200,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    for s in [0, 10, 20, 110, 200] {
        println!("lr at step {s:>3}: {:.4}", lr_at(s, &cfg)?);
    }

    let mut store = ParamStore::new();
    let target = Tensor::new(&[3], vec![1.0, -2.0, 0.5])?;
    let x = store.insert("x", ParamKind::Base, Tensor::zeros(&[3]).with_requires_grad(true))?;
    let mut opt = AdamW::new();
    for step in 1..=cfg.total_steps {
        let mut tape = Tape::new();
        let xv = store.bind(&mut tape, x);
        let t = tape.leaf(&target);
        let neg = tape.scale(t, -1.0);
        let diff = tape.add(xv, neg)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum(sq);
        tape.backward(loss)?;
        store.zero_grads();
        store.pull_grads(&tape);
        opt.step(&mut store, lr_at(step, &cfg)?, &cfg)?;
    }
    println!("AdamW after {} steps: {:?}", opt.steps(), store.get(x).data());

    let sizes = [1500, 500, 0, 2000];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = [0usize; 4];
    for _ in 0..40_000 {
        hits[proportional_sample(&sizes, &mut rng)?] += 1;
    }
    let total: usize = sizes.iter().sum();
    for (s, h) in sizes.iter().zip(hits) {
        println!("size {s:>4}: sampled {:.3}, expected {:.3}", h as f64 / 40_000.0, *s as f64 / total as f64);
    }
    Ok(())
}
