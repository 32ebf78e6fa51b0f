//! Input-conditioned adapter generation: the decoder hypernetwork turns
//! the pooled encoder output of each example into its own adapters.

use hyperdecoder::adaptation::TaskCondition;
use hyperdecoder::model::{seq2seq_batch, Model};
use hyperdecoder::tasks::{build_suite, tokens_to_string};
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::{Result, Tape};

fn main() -> Result<()> {
    let suite = build_suite(0);
    let model = Model::new(ModelConfig::default(), 0)?;
    let examples: Vec<_> = suite.tasks.iter().map(|t| &t.train[0]).collect();
    let (enc, _, _) = seq2seq_batch(&examples)?;

    let mut tape = Tape::inference();
    let encoded = model.encode(&mut tape, &enc, TaskCondition::Task(0))?;
    let adapters = model
        .decoder_adapters(&mut tape, &encoded, TaskCondition::Task(0))?
        .expect("manual-generated has decoder adapters");
    println!("{} decoder layers, per-example: {}", adapters.len(), adapters[0].is_per_example(&tape));

    let w = adapters[0].to_params(&tape).w_down;
    let per = w.len() / examples.len();
    let rows: Vec<&[f32]> = w.data().chunks(per).collect();
    for (i, e) in examples.iter().enumerate() {
        let dist: f32 = rows[i].iter().zip(rows[0]).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        println!("{:<28} |W_d - W_d(example 0)| = {dist:.4}", tokens_to_string(&e.input));
    }

    let e = model.hyper_embedding(&[examples[0].input.clone(), examples[0].input.clone()])?;
    let (a, b) = e.data().split_at(e.len() / 2);
    println!("same input twice gives identical conditioning: {}", a == b);
    Ok(())
}
