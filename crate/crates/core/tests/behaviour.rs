use hyperdecoder::adaptation::{hypernet_generate, TaskCondition};
use hyperdecoder::analysis::{encoder_probe, ProbeConfig};
use hyperdecoder::experiment::apply_mode;
use hyperdecoder::model::{seq2seq_batch, Model, SideAdapters};
use hyperdecoder::tasks::{build_suite, Split, EOS};
use hyperdecoder::tensor::Tensor;
use hyperdecoder::trainer::{evaluate, mean, train, TrainConfig};
use hyperdecoder::transformer::{decode, ModelConfig};
use hyperdecoder::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variance(xs: &[f32]) -> f64 {
    let n = xs.len() as f64;
    let mu = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    xs.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / n
}

#[test]
fn generated_down_projection_has_direct_init_variance() {
    for seed in 0..5 {
        let m = Model::new(ModelConfig::default(), seed).unwrap();
        let SideAdapters::Generated(state) = &m.dec else { panic!("decoder is not generated") };
        let d = m.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let input = state.net.dims.input;
        let e = Tensor::randn(&[1000, input], (1.0 / d as f32).sqrt(), &mut rng);
        let mut tape = Tape::inference();
        let ev = tape.constant(&[1000, input], e.into_data()).unwrap();
        for layer in 0..m.cfg.n_dec_layers {
            let p = hypernet_generate(&mut tape, &m.store, ev, layer, &state.net).unwrap().to_params(&tape);
            let ratio = variance(p.w_down.data()) * d as f64;
            assert!((0.5..=2.0).contains(&ratio), "seed {seed} layer {layer}: var·d = {ratio}");
            assert!(p.b_down.data().iter().chain(p.b_up.data()).all(|&v| v == 0.0));
        }
    }
}

#[test]
fn generated_adapters_at_init_barely_move_the_decoder() {
    let suite = build_suite(0);
    let examples: Vec<_> = suite.tasks.iter().flat_map(|t| &t.dev[..8]).collect();
    let (enc_tok, dec_tok, _) = seq2seq_batch(&examples).unwrap();
    for seed in 0..8 {
        let m = Model::new(ModelConfig::default(), seed).unwrap();
        let mut tape = Tape::inference();
        let enc = m.encode(&mut tape, &enc_tok, TaskCondition::Task(0)).unwrap();
        let adapters = m.decoder_adapters(&mut tape, &enc, TaskCondition::Task(0)).unwrap();
        let with = decode(&mut tape, &m.store, &m.base, &m.cfg, enc.enc_h, &enc.keep, &dec_tok, adapters.as_deref()).unwrap();
        let bare = decode(&mut tape, &m.store, &m.base, &m.cfg, enc.enc_h, &enc.keep, &dec_tok, None).unwrap();
        let (a, b) = (tape.value(with), tape.value(bare));
        let diff: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        let norm: f32 = b.iter().map(|y| y * y).sum::<f32>().sqrt();
        assert!(diff / norm < 0.1, "seed {seed}: relative change {}", diff / norm);
    }
}

#[test]
fn tiny_model_learns_to_copy() {
    let mut copy = build_suite(1);
    copy.tasks.truncate(1);
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        ..apply_mode(&ModelConfig::default(), "full-finetune").unwrap()
    };
    let mut m = Model::new(cfg, 1).unwrap();
    let tc = TrainConfig {
        peak_lr: 1e-3,
        total_steps: 2000,
        eval_every: 250,
        ..TrainConfig::default()
    };
    train(&mut m, &copy, &tc).unwrap();
    let dev = evaluate(&m, &copy, Split::Dev).unwrap()[0];
    assert!(dev > 0.95, "dev exact match {dev}");

    let train_set = &copy.tasks[0].train[..200];
    let inputs: Vec<Vec<usize>> = train_set.iter().map(|e| e.input.clone()).collect();
    let out = m.greedy(&inputs, TaskCondition::Task(0)).unwrap();
    let copied = out
        .iter()
        .zip(train_set)
        .filter(|(p, e)| p.as_slice() == &e.input[1..] && e.target.last() == Some(&EOS))
        .count();
    assert!(copied >= 190, "{copied}/200 training inputs reproduced");
}

#[test]
fn trained_encoder_probes_better_than_random() {
    let suite = build_suite(2);
    let tasks = suite.classification_tasks();
    let probe = ProbeConfig {
        peak_lr: 1e-3,
        seed: 2,
        ..ProbeConfig::default()
    };
    let cfg = apply_mode(&ModelConfig::default(), "full-finetune").unwrap();
    let random = Model::new(cfg.clone(), 2).unwrap();
    let before = mean(&encoder_probe(&random, &suite, &tasks, &probe).unwrap());
    let mut trained = Model::new(cfg, 2).unwrap();
    let tc = TrainConfig {
        total_steps: 800,
        peak_lr: 1e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    train(&mut trained, &suite, &tc).unwrap();
    let after = mean(&encoder_probe(&trained, &suite, &tasks, &probe).unwrap());
    assert!(before < after, "random {before} vs trained {after}");
}
