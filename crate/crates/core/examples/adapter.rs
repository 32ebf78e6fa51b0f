//! A bottleneck adapter branch `relu(x W_d + b_d) W_u + b_u` on a batch
//! of hidden states, directly parameterized. Inside the model the branch
//! runs in parallel with each feed-forward block.

use hyperdecoder::adaptation::{adapter_forward, adapter_up_std, AdapterParams};
use hyperdecoder::{Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (d, a) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[3, d], 1.0, &mut rng);

    let mut p = AdapterParams::zeros(d, a);
    p.w_down = Tensor::randn(&[d, a], (1.0 / d as f32).sqrt(), &mut rng);
    p.w_up = Tensor::randn(&[a, d], adapter_up_std(a), &mut rng);
    println!("{} adapter parameters for d={d}, a={a}", p.numel());

    let mut tape = Tape::inference();
    let xv = tape.leaf(&x);
    let vars = p.leaf(&mut tape);
    let y = adapter_forward(&mut tape, xv, &vars)?;
    let branch = tape.to_tensor(y).l2_norm() / x.l2_norm();
    println!("small at init: |branch| / |x| = {branch:.2e}");

    // a zero up-projection leaves only the output bias
    p.w_up = Tensor::zeros(&[a, d]);
    p.b_up = Tensor::full(&[d], 0.5);
    let mut tape = Tape::inference();
    let xv = tape.leaf(&x);
    let vars = p.leaf(&mut tape);
    let y = adapter_forward(&mut tape, xv, &vars)?;
    println!("zero up-projection outputs the bias: {:?}", &tape.value(y)[..d]);
    Ok(())
}
