//! Trainable-parameter counts for every adaptation mode, closed form
//! against an instantiated model, plus the counts at a large model size.

use hyperdecoder::accounting::{count_adapters, count_hyperdecoder, rows_text, trainable_fraction, CountInputs};
use hyperdecoder::experiment::account_table;
use hyperdecoder::transformer::ModelConfig;
use hyperdecoder::Result;

fn main() -> Result<()> {
    print!("{}", rows_text(&account_table(&ModelConfig::default())?));

    // 24 layers per side, d = 1024, a = 64, hypernetwork bottleneck 128
    let c = CountInputs {
        l: 24,
        d: 1024,
        a: 64,
        t: 8,
        b: 128,
        e_t: 64,
        e_l: 64,
    };
    let base = 800_000_000;
    let hd = count_hyperdecoder(&c);
    println!(
        "\nlarge model: encoder adapters {}, hyperdecoder total {hd} ({:.2}% of {base})",
        count_adapters(c.l, c.a, c.d),
        trainable_fraction(hd, base)?
    );
    Ok(())
}
