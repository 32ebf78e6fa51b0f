//! The experiment runner: one run with its artifacts on disk, then the
//! whole adaptation matrix at a tiny size.

use hyperdecoder::experiment::{run, run_matrix, ExperimentConfig, RunExtras};
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("hyperdecoder-example-runs");
    let mut cfg = ExperimentConfig {
        out_dir: out.clone(),
        model: ModelConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            ..ModelConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.train.total_steps = 100;
    cfg.train.warmup_steps = 10;
    cfg.train.eval_every = 50;
    cfg.train.peak_lr = 1e-3;

    let s = run(&cfg.clone().with_mode("manual-generated")?, &RunExtras { export_embeddings: true, probe: None })?;
    println!("{}: test {:.3}, ood {:.3}", s.mode, s.test_mean, s.ood_mean);
    let mut files: Vec<_> = std::fs::read_dir(&s.dir)
        .map_err(|e| hyperdecoder::Error::io(&s.dir, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("artifacts: {}", files.join(" "));

    cfg.train.total_steps = 20;
    cfg.train.eval_every = 20;
    cfg.train.warmup_steps = 2;
    let (_, table, _) = run_matrix(&cfg, 4)?;
    print!("{table}");
    let _ = std::fs::remove_dir_all(&out);
    Ok(())
}
