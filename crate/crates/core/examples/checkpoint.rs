//! Saving and restoring model parameters with the binary checkpoint
//! container.

use hyperdecoder::adaptation::TaskCondition;
use hyperdecoder::checkpoint;
use hyperdecoder::model::Model;
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::Result;

fn main() -> Result<()> {
    let path = std::env::temp_dir().join("hyperdecoder-example.hdck");
    let a = Model::new(ModelConfig::default(), 1)?;
    checkpoint::save(&path, &a.store.snapshot())?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("wrote {} tensors, {bytes} bytes", a.store.len());

    let mut b = Model::new(ModelConfig::default(), 2)?;
    let input = vec![vec![6, 12, 13, 14]];
    let same = |m: &Model| -> Result<bool> { Ok(m.pooled_encoder(&input, TaskCondition::Task(0))? == a.pooled_encoder(&input, TaskCondition::Task(0))?) };
    println!("other seed, before restore: encoder output identical {}", same(&b)?);
    b.store.restore(&checkpoint::load(&path)?)?;
    println!("after restore: encoder output identical {}", same(&b)?);
    println!("after restore: parameters identical {}", b.store.snapshot() == a.store.snapshot());

    let mut bad = std::fs::read(&path).map_err(|e| hyperdecoder::Error::io(&path, e))?;
    bad.truncate(bad.len() - 3);
    println!("truncated file: {}", checkpoint::decode(&bad).unwrap_err());
    let _ = std::fs::remove_file(&path);
    Ok(())
}
