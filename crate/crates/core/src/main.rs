//! Command-line runner for single runs, the adaptation matrix, parameter
//! accounting and analysis dumps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hyperdecoder::accounting::{rows_csv, rows_text};
use hyperdecoder::analysis::ProbeConfig;
use hyperdecoder::experiment::{account_table, exit_code, run, run_matrix, ExperimentConfig, RunExtras};
use hyperdecoder::Result;

#[derive(Debug, Parser)]
#[command(name = "hyperdecoder", version, about)]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adaptation preset, e.g. `manual-generated`, `task-task`, `full-finetune`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every row of the adaptation matrix.
    #[arg(long)]
    matrix: bool,
    /// Print parameter counts for every matrix mode and exit.
    #[arg(long)]
    account: bool,
    /// Dump conditioning embeddings, PCA coordinates and silhouettes.
    #[arg(long)]
    export_embeddings: bool,
    /// Train linear probes on the frozen encoder.
    #[arg(long)]
    probe: bool,
    /// Matrix rows to run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mode = cli.mode.clone().unwrap_or_else(|| cfg.mode_label.clone());
    cfg = cfg.with_mode(&mode)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = cli.steps {
        cfg.train.total_steps = n;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(n);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if cli.account {
        let rows = account_table(&cfg.model)?;
        print!("{}", rows_text(&rows));
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| hyperdecoder::Error::io(&cfg.out_dir, e))?;
        let path = cfg.out_dir.join("accounting.csv");
        std::fs::write(&path, rows_csv(&rows)).map_err(|e| hyperdecoder::Error::io(&path, e))?;
        return Ok(());
    }
    if cli.matrix {
        let (_, text, _) = run_matrix(&cfg, cli.parallel)?;
        print!("{text}");
        return Ok(());
    }
    let extras = RunExtras {
        export_embeddings: cli.export_embeddings,
        probe: cli.probe.then(|| ProbeConfig {
            seed: cfg.train.seed,
            ..ProbeConfig::default()
        }),
    };
    let s = run(&cfg, &extras)?;
    println!(
        "{}: best dev {:.4} at step {}, test {:.4}, ood {:.4}, {} trainable ({:.3}% of base) -> {}",
        s.mode,
        s.best_dev,
        s.best_step,
        s.test_mean,
        s.ood_mean,
        s.trainable,
        s.trainable_fraction_pct,
        s.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
