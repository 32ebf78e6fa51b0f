//! Multi-task training of the hyperdecoder with dev-set checkpoint
//! selection, then test and out-of-domain evaluation.

use hyperdecoder::model::Model;
use hyperdecoder::tasks::{build_suite, Split};
use hyperdecoder::trainer::{evaluate, mean, train, TrainConfig};
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::Result;

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let suite = build_suite(0);
    let mut model = Model::new(ModelConfig::default(), 0)?;
    println!("{} trainable of {} parameters", model.trainable_count(), model.trainable_count() + model.frozen_count());
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        eval_every: (steps / 4).max(1),
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &suite, &cfg)?;
    for chunk in report.losses.chunks((steps / 6).max(1)) {
        let l: f32 = chunk.iter().map(|r| r.loss).sum::<f32>() / chunk.len() as f32;
        println!("steps {:>4}-{:<4} mean loss {l:.3}", chunk[0].step, chunk[chunk.len() - 1].step);
    }
    println!("best dev {:.3} at step {}", report.best_metric, report.best_step);
    let names: Vec<_> = suite.tasks.iter().map(|t| t.spec.name.as_str()).collect();
    for split in [Split::Test, Split::Ood] {
        let scores = evaluate(&model, &suite, split)?;
        let per: Vec<String> = names.iter().zip(&scores).map(|(n, s)| format!("{n} {s:.2}")).collect();
        println!("{:<5} mean {:.3}: {}", split.label(), mean(&scores), per.join(", "));
    }
    Ok(())
}
