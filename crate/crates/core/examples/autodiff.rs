//! Reverse-mode autodiff on a tape, checked against central differences.

use hyperdecoder::{Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(tape: &mut Tape, x: &Tensor, w: &Tensor) -> Result<(hyperdecoder::Var, hyperdecoder::Var)> {
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let h = tape.matmul(xv, wv)?;
    let h = tape.relu(h);
    let p = tape.softmax(h, None)?;
    let p = tape.mul(p, p)?;
    Ok((tape.sum(p), wv))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng).with_requires_grad(true);

    let mut tape = Tape::new();
    let (l, wv) = loss(&mut tape, &x, &w)?;
    tape.backward(l)?;
    let analytic = tape.grad(wv).unwrap().to_vec();
    println!("loss {:.6}, {} nodes on the tape", tape.value(l)[0], tape.len());

    let h = 1e-3;
    let mut worst: f32 = 0.0;
    for i in 0..w.len() {
        let eval = |delta: f32| -> Result<f32> {
            let mut shifted = w.clone();
            shifted.data_mut()[i] += delta;
            let mut t = Tape::inference();
            let (l, _) = loss(&mut t, &x, &shifted)?;
            Ok(t.value(l)[0])
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((numeric - analytic[i]).abs());
    }
    println!("max |analytic - numeric| over {} weights: {worst:.2e}", w.len());
    Ok(())
}
