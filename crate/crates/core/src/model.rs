//! A base transformer plus one adaptation scheme per side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{
    generate_decoder_adapters, pool_embed, task_hypernet_generate, AdapterIds, AdapterVars, HyperDims,
    HyperdecoderState, TaskCondition, TaskHypernetState,
};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tasks::{Example, BOS, EOS, PAD};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{decode, encode, AdaptationMode, BaseParams, ModelConfig, TokenBatch};

/// Adaptation wired into one side of the model.
#[derive(Debug, Clone)]
pub enum SideAdapters {
    None,
    Manual(Vec<AdapterIds>),
    Task(TaskHypernetState),
    Generated(HyperdecoderState),
}

impl SideAdapters {
    pub fn mode(&self) -> AdaptationMode {
        match self {
            Self::None => AdaptationMode::None,
            Self::Manual(_) => AdaptationMode::Manual,
            Self::Task(_) => AdaptationMode::Task,
            Self::Generated(_) => AdaptationMode::Generated,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub base: BaseParams,
    pub enc: SideAdapters,
    pub dec: SideAdapters,
}

/// Encoder output of one batch, ready for decoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub enc_h: Var,
    pub keep: Vec<bool>,
    pub batch: usize,
}

fn build_side(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    side: &str,
    mode: AdaptationMode,
    layers: usize,
    a: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SideAdapters> {
    let d = cfg.d_model;
    let dims = |input| HyperDims {
        input,
        d,
        a,
        bottleneck: cfg.hypernet_bottleneck,
        layer_embed: cfg.layer_embed_dim,
        layers,
    };
    Ok(match mode {
        AdaptationMode::None => SideAdapters::None,
        AdaptationMode::Manual => SideAdapters::Manual(
            (0..layers)
                .map(|i| AdapterIds::register(store, &format!("{side}.adapter.{i}"), d, a, rng))
                .collect::<Result<_>>()?,
        ),
        AdaptationMode::Task => SideAdapters::Task(TaskHypernetState::register(
            store,
            &format!("{side}.task"),
            cfg.num_tasks,
            dims(cfg.task_embed_dim),
            rng,
        )?),
        AdaptationMode::Generated => SideAdapters::Generated(HyperdecoderState::register(
            store,
            &format!("{side}.hyper"),
            dims(d),
            cfg.use_mlp,
            rng,
        )?),
    })
}

/// Encoder input, decoder prefix and decoder targets of a batch.
pub fn seq2seq_batch(examples: &[&Example]) -> Result<(TokenBatch, TokenBatch, Vec<usize>)> {
    let inputs: Vec<Vec<usize>> = examples.iter().map(|e| e.input.clone()).collect();
    let prefixes: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| {
            let mut p = vec![BOS];
            p.extend_from_slice(&e.target[..e.target.len().saturating_sub(1)]);
            p
        })
        .collect();
    let enc = TokenBatch::from_rows(&inputs, PAD)?;
    let dec = TokenBatch::from_rows(&prefixes, PAD)?;
    let mut targets = Vec::with_capacity(dec.batch * dec.len);
    for e in examples {
        targets.extend_from_slice(&e.target);
        targets.extend(std::iter::repeat(PAD).take(dec.len - e.target.len()));
    }
    Ok((enc, dec, targets))
}

impl Model {
    /// Builds and initializes a model. All randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let base = BaseParams::register(&mut store, &cfg, &mut rng)?;
        let enc = build_side(&mut store, &cfg, "enc", cfg.enc_mode, cfg.n_enc_layers, cfg.enc_adapter_dim, &mut rng)?;
        let dec = build_side(&mut store, &cfg, "dec", cfg.dec_mode, cfg.n_dec_layers, cfg.dec_adapter_dim, &mut rng)?;
        let full = cfg.full_finetune;
        store.set_requires_grad_where(|_, kind| full || kind != ParamKind::Base);
        Ok(Self {
            cfg,
            store,
            base,
            enc,
            dec,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.numel_where(|_, _| true) - self.frozen_count()
    }

    pub fn frozen_count(&self) -> usize {
        if self.cfg.full_finetune {
            0
        } else {
            self.base_count()
        }
    }

    pub fn base_count(&self) -> usize {
        self.store.numel_where(|_, k| k == ParamKind::Base)
    }

    /// Base weights as `(name, tensor)` pairs.
    pub fn base_snapshot(&self) -> Vec<(String, Tensor)> {
        self.store
            .snapshot()
            .into_iter()
            .filter(|(n, _)| n.starts_with("base."))
            .collect()
    }

    /// Zeroes every generator's output heads.
    pub fn zero_generator_heads(&mut self) -> Result<()> {
        for side in [&self.enc, &self.dec] {
            match side {
                SideAdapters::Task(s) => s.net.zero_heads(&mut self.store)?,
                SideAdapters::Generated(s) => s.net.zero_heads(&mut self.store)?,
                _ => {}
            }
        }
        Ok(())
    }

    fn side_adapters(
        &self,
        tape: &mut Tape,
        side: &SideAdapters,
        cond: TaskCondition,
        cond_h: Option<(Var, &[bool])>,
    ) -> Result<Option<Vec<AdapterVars>>> {
        Ok(match side {
            SideAdapters::None => None,
            SideAdapters::Manual(ids) => Some(ids.iter().map(|a| a.bind(tape, &self.store)).collect()),
            SideAdapters::Task(state) => Some(task_hypernet_generate(tape, &self.store, cond, state)?),
            SideAdapters::Generated(state) => {
                let (h, keep) = cond_h.ok_or_else(|| Error::Invariant("generated adapters need encoder states".into()))?;
                Some(generate_decoder_adapters(tape, &self.store, h, keep, state, self.cfg.use_mlp)?)
            }
        })
    }

    /// Runs the encoder. Generated encoder adapters use two passes: the
    /// unadapted encoder output conditions the adapters of the second pass.
    pub fn encode(&self, tape: &mut Tape, tokens: &TokenBatch, cond: TaskCondition) -> Result<Encoded> {
        let first = match self.enc {
            SideAdapters::Generated(_) => {
                Some(encode(tape, &self.store, &self.base, &self.cfg, tokens, None)?)
            }
            _ => None,
        };
        let adapters = self.side_adapters(tape, &self.enc, cond, first.map(|h| (h, tokens.keep.as_slice())))?;
        let enc_h = encode(tape, &self.store, &self.base, &self.cfg, tokens, adapters.as_deref())?;
        Ok(Encoded {
            enc_h,
            keep: tokens.keep.clone(),
            batch: tokens.batch,
        })
    }

    /// Decoder adapters for an encoded batch.
    pub fn decoder_adapters(&self, tape: &mut Tape, enc: &Encoded, cond: TaskCondition) -> Result<Option<Vec<AdapterVars>>> {
        self.side_adapters(tape, &self.dec, cond, Some((enc.enc_h, enc.keep.as_slice())))
    }

    /// Logits `[batch, len, vocab]` for a teacher-forced prefix.
    pub fn logits(&self, tape: &mut Tape, tokens: &TokenBatch, prefix: &TokenBatch, cond: TaskCondition) -> Result<Var> {
        let enc = self.encode(tape, tokens, cond)?;
        let adapters = self.decoder_adapters(tape, &enc, cond)?;
        decode(tape, &self.store, &self.base, &self.cfg, enc.enc_h, &enc.keep, prefix, adapters.as_deref())
    }

    /// Mean token cross-entropy of a batch whose examples share the
    /// conditioning `cond`.
    pub fn loss(&self, tape: &mut Tape, examples: &[&Example], cond: TaskCondition) -> Result<Var> {
        let (enc, dec, targets) = seq2seq_batch(examples)?;
        let logits = self.logits(tape, &enc, &dec, cond)?;
        let v = self.cfg.vocab_size;
        let flat = tape.reshape(logits, &[dec.batch * dec.len, v])?;
        tape.cross_entropy(flat, &targets, PAD)
    }

    /// Greedy decoding. Each prediction stops before `</s>` or after
    /// `max_len - 1` tokens.
    pub fn greedy(&self, inputs: &[Vec<usize>], cond: TaskCondition) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::inference();
        let tokens = TokenBatch::from_rows(inputs, PAD)?;
        let enc = self.encode(&mut tape, &tokens, cond)?;
        let adapters = self.decoder_adapters(&mut tape, &enc, cond)?;
        let b = inputs.len();
        let v = self.cfg.vocab_size;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mark = tape.len();
        for step in 0..self.cfg.max_len.saturating_sub(1) {
            let prefix = TokenBatch::from_rows(&prefixes, PAD)?;
            let logits = decode(
                &mut tape,
                &self.store,
                &self.base,
                &self.cfg,
                enc.enc_h,
                &enc.keep,
                &prefix,
                adapters.as_deref(),
            )?;
            let vals = tape.value(logits);
            for i in 0..b {
                if done[i] {
                    prefixes[i].push(PAD);
                    continue;
                }
                let row = &vals[(i * prefix.len + step) * v..(i * prefix.len + step + 1) * v];
                let tok = argmax(row);
                if tok == EOS {
                    done[i] = true;
                } else {
                    out[i].push(tok);
                }
                prefixes[i].push(tok);
            }
            tape.truncate(mark);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Mean-pooled final encoder states `[batch, d]`.
    pub fn pooled_encoder(&self, inputs: &[Vec<usize>], cond: TaskCondition) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let tokens = TokenBatch::from_rows(inputs, PAD)?;
        let enc = self.encode(&mut tape, &tokens, cond)?;
        let pooled = tape.mean_pool(enc.enc_h, &enc.keep)?;
        Ok(tape.to_tensor(pooled))
    }

    /// The decoder generator's conditioning embedding `e` for each input
    /// (`[batch, d]`).
    pub fn hyper_embedding(&self, inputs: &[Vec<usize>]) -> Result<Tensor> {
        let SideAdapters::Generated(state) = &self.dec else {
            return Err(Error::UnsupportedMode(format!(
                "decoder mode `{}` has no pooled embedding",
                self.dec.mode().label()
            )));
        };
        let mut tape = Tape::inference();
        let tokens = TokenBatch::from_rows(inputs, PAD)?;
        let enc = self.encode(&mut tape, &tokens, TaskCondition::MeanEmbedding)?;
        let e = pool_embed(&mut tape, &self.store, enc.enc_h, &enc.keep, state, self.cfg.use_mlp)?;
        Ok(tape.to_tensor(e))
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
