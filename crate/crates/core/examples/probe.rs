//! Linear probing of a frozen encoder on the classification tasks,
//! before and after training.

use hyperdecoder::analysis::{encoder_probe, ProbeConfig};
use hyperdecoder::experiment::apply_mode;
use hyperdecoder::model::Model;
use hyperdecoder::tasks::build_suite;
use hyperdecoder::trainer::{train, TrainConfig};
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::Result;

fn main() -> Result<()> {
    let suite = build_suite(0);
    let tasks = suite.classification_tasks();
    let probe = ProbeConfig {
        peak_lr: 1e-3,
        ..ProbeConfig::default()
    };
    let cfg = apply_mode(&ModelConfig::default(), "full-finetune")?;
    let mut model = Model::new(cfg, 0)?;
    println!("random encoder: {:?}", encoder_probe(&model, &suite, &tasks, &probe)?);
    let tc = TrainConfig {
        peak_lr: 1e-3,
        total_steps: 600,
        ..TrainConfig::default()
    };
    train(&mut model, &suite, &tc)?;
    println!("trained encoder: {:?}", encoder_probe(&model, &suite, &tasks, &probe)?);
    Ok(())
}
