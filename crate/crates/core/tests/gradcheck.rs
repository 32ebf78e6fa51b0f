//! Central finite-difference checks of every differentiable primitive and
//! of the end-to-end model loss.

mod common;

use common::cases::{find, run_case};
use hyperdecoder::{Tape, Tensor};

macro_rules! grad_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let s = run_case(find(stringify!($name)));
                eprintln!(
                    "{}: worst relative error {:.2e} over {} coordinates ({} at kinks)",
                    stringify!($name), s.worst, s.checked, s.skipped
                );
            }
        )*
    };
}

grad_tests!(
    matmul,
    linear,
    linear_t,
    bmm,
    bmm_t,
    add,
    mul,
    scale,
    relu,
    add_bias,
    add_batch_bias,
    layer_norm,
    softmax,
    masked_softmax,
    cross_entropy,
    mean_pool,
    embedding,
    reshape,
    swap_axes12,
    concat,
    broadcast_rows,
    sum,
    mean,
    adapter,
    adapter_per_example,
    attention,
    hyperdecoder_loss,
    hyperdecoder_ablation_loss,
    task_task_loss,
    generated_generated_loss,
    manual_manual_loss,
    full_finetune_loss,
);

#[test]
fn oracle_detects_a_one_percent_error() {
    let mut cmp = common::Comparison::new();
    for i in 0..20 {
        let g = 1.0 + i as f64 * 0.1;
        let h = 1e-3;
        cmp.push((g * 1.01) as f32, g * h, 0.0, -g * h, h);
    }
    assert!(cmp.report().rel_err > common::TOL);
}

#[test]
fn inference_tape_records_no_gradient() {
    let mut tape = Tape::inference();
    let x = tape.leaf(&Tensor::full(&[2], 1.0).with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).is_none());
}
