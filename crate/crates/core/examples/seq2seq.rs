//! Teacher-forced loss and greedy decoding with the encoder-decoder.

use hyperdecoder::adaptation::TaskCondition;
use hyperdecoder::experiment::apply_mode;
use hyperdecoder::model::Model;
use hyperdecoder::tasks::{build_suite, tokens_to_string};
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::{Result, Tape};

fn main() -> Result<()> {
    let suite = build_suite(0);
    let cfg = apply_mode(&ModelConfig::default(), "none")?;
    let model = Model::new(cfg, 0)?;
    println!("{} base parameters", model.base_count());

    for task in &suite.tasks {
        let batch: Vec<_> = task.train[..4].iter().collect();
        let mut tape = Tape::inference();
        let loss = model.loss(&mut tape, &batch, TaskCondition::Task(task.spec.id))?;
        let inputs = vec![task.train[0].input.clone()];
        let out = model.greedy(&inputs, TaskCondition::Task(task.spec.id))?;
        println!(
            "{:<10} loss {:.3}  {} -> {}",
            task.spec.name,
            tape.value(loss)[0],
            tokens_to_string(&inputs[0]),
            tokens_to_string(&out[0])
        );
    }
    Ok(())
}
