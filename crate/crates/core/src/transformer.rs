//! Small pre-layer-norm encoder-decoder transformer.
//!
//! Every feed-forward block has a hook for an adapter running in parallel
//! with it. The base weights are registered under the `base.` prefix and are
//! the frozen side of the parameter partition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapter_forward, AdapterVars};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f32 = 1e-6;

/// How one side (encoder or decoder) of the model is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationMode {
    None,
    /// Directly learnt adapters.
    Manual,
    /// Adapters generated from a learnt task embedding.
    Task,
    /// Adapters generated from the pooled encoder output.
    Generated,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 4] = [Self::None, Self::Manual, Self::Task, Self::Generated];

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Manual => "manual",
            Self::Task => "task",
            Self::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub enc_adapter_dim: usize,
    pub dec_adapter_dim: usize,
    pub hypernet_bottleneck: usize,
    pub layer_embed_dim: usize,
    pub task_embed_dim: usize,
    pub num_tasks: usize,
    pub enc_mode: AdaptationMode,
    pub dec_mode: AdaptationMode,
    pub use_mlp: bool,
    pub adapter_input_post_layernorm: bool,
    /// Train every parameter, base weights included.
    pub full_finetune: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tasks::VOCAB_SIZE,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 16,
            enc_adapter_dim: 8,
            dec_adapter_dim: 8,
            hypernet_bottleneck: 16,
            layer_embed_dim: 8,
            task_embed_dim: 8,
            num_tasks: 6,
            enc_mode: AdaptationMode::Manual,
            dec_mode: AdaptationMode::Generated,
            use_mlp: true,
            adapter_input_post_layernorm: false,
            full_finetune: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("enc_adapter_dim", self.enc_adapter_dim),
            ("dec_adapter_dim", self.dec_adapter_dim),
            ("hypernet_bottleneck", self.hypernet_bottleneck),
            ("layer_embed_dim", self.layer_embed_dim),
            ("task_embed_dim", self.task_embed_dim),
            ("num_tasks", self.num_tasks),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.full_finetune
            && (self.enc_mode != AdaptationMode::None || self.dec_mode != AdaptationMode::None)
        {
            return Err(Error::config("full_finetune", "full finetuning runs without adapters"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeedForwardIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerIds {
    pub ln_attn: NormIds,
    pub attn: AttentionIds,
    pub ln_ff: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerIds {
    pub ln_self: NormIds,
    pub self_attn: AttentionIds,
    pub ln_cross: NormIds,
    pub cross_attn: AttentionIds,
    pub ln_ff: NormIds,
    pub ff: FeedForwardIds,
}

/// Handles to the frozen base weights. The output projection is tied to
/// the token embedding.
#[derive(Debug, Clone)]
pub struct BaseParams {
    pub tok_emb: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub enc_layers: Vec<EncoderLayerIds>,
    pub enc_norm: NormIds,
    pub dec_layers: Vec<DecoderLayerIds>,
    pub dec_norm: NormIds,
}

struct Init<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId> {
        self.store.insert(name, ParamKind::Base, t)
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let std = (1.0 / fan_in as f32).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, self.rng);
        self.add(name, t)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: self.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionIds> {
        Ok(AttentionIds {
            wq: self.linear(format!("{prefix}.wq"), d, d)?,
            wk: self.linear(format!("{prefix}.wk"), d, d)?,
            wv: self.linear(format!("{prefix}.wv"), d, d)?,
            wo: self.linear(format!("{prefix}.wo"), d, d)?,
        })
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, f: usize) -> Result<FeedForwardIds> {
        Ok(FeedForwardIds {
            w_in: self.linear(format!("{prefix}.w_in"), d, f)?,
            b_in: self.add(format!("{prefix}.b_in"), Tensor::zeros(&[f]))?,
            w_out: self.linear(format!("{prefix}.w_out"), f, d)?,
            b_out: self.add(format!("{prefix}.b_out"), Tensor::zeros(&[d]))?,
        })
    }
}

impl BaseParams {
    /// Registers randomly initialized base weights under `base.`.
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut init = Init { store, rng };
        let t = Tensor::randn(&[cfg.vocab_size, d], 1.0, init.rng);
        let tok_emb = init.add("base.tok_emb".into(), t)?;
        let t = Tensor::randn(&[cfg.max_len, d], 0.5, init.rng);
        let enc_pos = init.add("base.enc_pos".into(), t)?;
        let t = Tensor::randn(&[cfg.max_len, d], 0.5, init.rng);
        let dec_pos = init.add("base.dec_pos".into(), t)?;
        let mut enc_layers = Vec::with_capacity(cfg.n_enc_layers);
        for i in 0..cfg.n_enc_layers {
            let p = format!("base.enc.{i}");
            enc_layers.push(EncoderLayerIds {
                ln_attn: init.norm(&format!("{p}.ln_attn"), d)?,
                attn: init.attention(&format!("{p}.attn"), d)?,
                ln_ff: init.norm(&format!("{p}.ln_ff"), d)?,
                ff: init.feed_forward(&format!("{p}.ff"), d, f)?,
            });
        }
        let enc_norm = init.norm("base.enc.ln_final", d)?;
        let mut dec_layers = Vec::with_capacity(cfg.n_dec_layers);
        for i in 0..cfg.n_dec_layers {
            let p = format!("base.dec.{i}");
            dec_layers.push(DecoderLayerIds {
                ln_self: init.norm(&format!("{p}.ln_self"), d)?,
                self_attn: init.attention(&format!("{p}.self_attn"), d)?,
                ln_cross: init.norm(&format!("{p}.ln_cross"), d)?,
                cross_attn: init.attention(&format!("{p}.cross_attn"), d)?,
                ln_ff: init.norm(&format!("{p}.ln_ff"), d)?,
                ff: init.feed_forward(&format!("{p}.ff"), d, f)?,
            });
        }
        let dec_norm = init.norm("base.dec.ln_final", d)?;
        Ok(Self {
            tok_emb,
            enc_pos,
            dec_pos,
            enc_layers,
            enc_norm,
            dec_layers,
            dec_norm,
        })
    }
}

/// Token ids of a padded batch, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Right-pads `rows` with `pad` to a common length.
    pub fn from_rows(rows: &[Vec<usize>], pad: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        if len == 0 || rows.iter().any(Vec::is_empty) {
            return Err(Error::Degenerate("batch contains an empty sequence".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut keep = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            keep.extend(std::iter::repeat(true).take(r.len()));
            ids.extend(std::iter::repeat(pad).take(len - r.len()));
            keep.extend(std::iter::repeat(false).take(len - r.len()));
        }
        Ok(Self {
            ids,
            keep,
            batch: rows.len(),
            len,
        })
    }
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, ids: &NormIds) -> Result<Var> {
    let g = store.bind(tape, ids.gain);
    let b = store.bind(tape, ids.bias);
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Scaled dot-product attention over `[BH, n, dh]` operands. Returns the
/// attended values and the attention weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    visible: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dh = *tape.shape(q).last().unwrap();
    let scores = tape.bmm(q, k, true)?;
    if let Some(m) = visible {
        if m.len() != tape.value(scores).len() {
            return Err(Error::Shape(format!(
                "attention mask of length {} for scores {:?}",
                m.len(),
                tape.shape(scores)
            )));
        }
    }
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
    let weights = tape.softmax(scores, visible)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Visibility mask `[batch * heads, nq, nk]` from key padding and an
/// optional causal constraint.
pub fn attention_mask(key_keep: &[bool], batch: usize, heads: usize, nq: usize, nk: usize, causal: bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(batch * heads * nq * nk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..nq {
                for j in 0..nk {
                    m.push(key_keep[b * nk + j] && (!causal || j <= i));
                }
            }
        }
    }
    m
}

/// Multi-head attention from `q_in[B, nq, d]` onto `kv_in[B, nk, d]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &AttentionIds,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    visible: &[bool],
) -> Result<Var> {
    let sq = tape.shape(q_in).to_vec();
    let sk = tape.shape(kv_in).to_vec();
    let (b, nq, d) = (sq[0], sq[1], sq[2]);
    let nk = sk[1];
    let dh = d / heads;
    let split = |tape: &mut Tape, x: Var, w: ParamId, n: usize| -> Result<Var> {
        let wv = store.bind(tape, w);
        let p = tape.linear(x, wv)?;
        let p = tape.reshape(p, &[b, n, heads, dh])?;
        let p = tape.swap_axes12(p)?;
        tape.reshape(p, &[b * heads, n, dh])
    };
    let q = split(tape, q_in, ids.wq, nq)?;
    let k = split(tape, kv_in, ids.wk, nk)?;
    let v = split(tape, kv_in, ids.wv, nk)?;
    let (ctx, _) = scaled_dot_attention(tape, q, k, v, Some(visible))?;
    let ctx = tape.reshape(ctx, &[b, heads, nq, dh])?;
    let ctx = tape.swap_axes12(ctx)?;
    let ctx = tape.reshape(ctx, &[b, nq, d])?;
    let wo = store.bind(tape, ids.wo);
    tape.linear(ctx, wo)
}

fn feed_forward(tape: &mut Tape, store: &ParamStore, ids: &FeedForwardIds, x: Var) -> Result<Var> {
    let w_in = store.bind(tape, ids.w_in);
    let b_in = store.bind(tape, ids.b_in);
    let w_out = store.bind(tape, ids.w_out);
    let b_out = store.bind(tape, ids.b_out);
    let h = tape.linear(x, w_in)?;
    let h = tape.add_bias(h, b_in)?;
    let h = tape.relu(h);
    let o = tape.linear(h, w_out)?;
    tape.add_bias(o, b_out)
}

/// `x + FF(LN(x)) + Adapter(z)` where `z` is `x`, or `LN(x)` when
/// `adapter_on_normed` is set.
pub fn ff_with_adapter(
    tape: &mut Tape,
    store: &ParamStore,
    ln: &NormIds,
    ff: &FeedForwardIds,
    x: Var,
    adapter: Option<&AdapterVars>,
    adapter_on_normed: bool,
) -> Result<Var> {
    let normed = norm(tape, store, x, ln)?;
    let f = feed_forward(tape, store, ff, normed)?;
    let mut out = tape.add(x, f)?;
    if let Some(a) = adapter {
        let z = if adapter_on_normed { normed } else { x };
        let ad = adapter_forward(tape, z, a)?;
        out = tape.add(out, ad)?;
    }
    Ok(out)
}

fn check_tokens(cfg: &ModelConfig, tokens: &TokenBatch) -> Result<()> {
    if tokens.len > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len, cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed(tape: &mut Tape, store: &ParamStore, tok: ParamId, pos: ParamId, tokens: &TokenBatch, d: usize) -> Result<Var> {
    let table = store.bind(tape, tok);
    let pos_table = store.bind(tape, pos);
    let x = tape.embedding(table, &tokens.ids)?;
    let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.len).collect();
    let p = tape.embedding(pos_table, &positions)?;
    let x = tape.add(x, p)?;
    tape.reshape(x, &[tokens.batch, tokens.len, d])
}

fn check_adapters(adapters: Option<&[AdapterVars]>, layers: usize, side: &str) -> Result<()> {
    match adapters {
        Some(a) if a.len() != layers => Err(Error::Shape(format!(
            "{side} has {layers} layers but {} adapters were supplied",
            a.len()
        ))),
        _ => Ok(()),
    }
}

/// Encoder hidden states `[batch, len, d]` after the final layer norm.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    base: &BaseParams,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    adapters: Option<&[AdapterVars]>,
) -> Result<Var> {
    check_tokens(cfg, tokens)?;
    check_adapters(adapters, base.enc_layers.len(), "encoder")?;
    let mut x = embed(tape, store, base.tok_emb, base.enc_pos, tokens, cfg.d_model)?;
    let mask = attention_mask(&tokens.keep, tokens.batch, cfg.n_heads, tokens.len, tokens.len, false);
    for (i, layer) in base.enc_layers.iter().enumerate() {
        let h = norm(tape, store, x, &layer.ln_attn)?;
        let a = multi_head_attention(tape, store, &layer.attn, h, h, cfg.n_heads, &mask)?;
        x = tape.add(x, a)?;
        let adapter = adapters.map(|a| &a[i]);
        x = ff_with_adapter(
            tape,
            store,
            &layer.ln_ff,
            &layer.ff,
            x,
            adapter,
            cfg.adapter_input_post_layernorm,
        )?;
    }
    norm(tape, store, x, &base.enc_norm)
}

/// Decoder logits `[batch, len, vocab]` for a teacher-forced `prefix`.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    base: &BaseParams,
    cfg: &ModelConfig,
    enc_h: Var,
    enc_keep: &[bool],
    prefix: &TokenBatch,
    adapters: Option<&[AdapterVars]>,
) -> Result<Var> {
    check_tokens(cfg, prefix)?;
    check_adapters(adapters, base.dec_layers.len(), "decoder")?;
    let se = tape.shape(enc_h).to_vec();
    if se.len() != 3 || se[0] != prefix.batch || se[2] != cfg.d_model || enc_keep.len() != se[0] * se[1] {
        return Err(Error::Shape(format!(
            "encoder states {se:?} (mask {}) do not match a decoder batch of {}",
            enc_keep.len(),
            prefix.batch
        )));
    }
    let (b, m, n) = (prefix.batch, prefix.len, se[1]);
    let mut y = embed(tape, store, base.tok_emb, base.dec_pos, prefix, cfg.d_model)?;
    let self_mask = attention_mask(&prefix.keep, b, cfg.n_heads, m, m, true);
    let cross_mask = attention_mask(enc_keep, b, cfg.n_heads, m, n, false);
    for (i, layer) in base.dec_layers.iter().enumerate() {
        let h = norm(tape, store, y, &layer.ln_self)?;
        let a = multi_head_attention(tape, store, &layer.self_attn, h, h, cfg.n_heads, &self_mask)?;
        y = tape.add(y, a)?;
        let h = norm(tape, store, y, &layer.ln_cross)?;
        let c = multi_head_attention(tape, store, &layer.cross_attn, h, enc_h, cfg.n_heads, &cross_mask)?;
        y = tape.add(y, c)?;
        let adapter = adapters.map(|a| &a[i]);
        y = ff_with_adapter(
            tape,
            store,
            &layer.ln_ff,
            &layer.ff,
            y,
            adapter,
            cfg.adapter_input_post_layernorm,
        )?;
    }
    let y = norm(tape, store, y, &base.dec_norm)?;
    let emb = store.bind(tape, base.tok_emb);
    let logits = tape.linear_t(y, emb)?;
    Ok(tape.scale(logits, 1.0 / (cfg.d_model as f32).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ModelConfig, ParamStore, BaseParams) {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 10,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = BaseParams::register(&mut store, &cfg, &mut rng).unwrap();
        (cfg, store, base)
    }

    fn rows(b: usize, n: usize, seed: usize) -> Vec<Vec<usize>> {
        (0..b)
            .map(|i| (0..n).map(|j| 3 + (i * 5 + j * 7 + seed) % 9).collect())
            .collect()
    }

    #[test]
    fn encode_shape_contract() {
        let (cfg, store, base) = tiny();
        let mut tape = Tape::inference();
        let toks = TokenBatch::from_rows(&rows(2, 7, 0), 0).unwrap();
        let h = encode(&mut tape, &store, &base, &cfg, &toks, None).unwrap();
        assert_eq!(tape.shape(h), &[2, 7, 8]);
    }

    #[test]
    fn encode_rejects_overlong_and_out_of_vocab() {
        let (cfg, store, base) = tiny();
        let mut tape = Tape::inference();
        let long = TokenBatch::from_rows(&rows(1, 11, 0), 0).unwrap();
        assert!(encode(&mut tape, &store, &base, &cfg, &long, None).is_err());
        let oov = TokenBatch::from_rows(&[vec![3, 40]], 0).unwrap();
        assert!(matches!(
            encode(&mut tape, &store, &base, &cfg, &oov, None),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (cfg, store, base) = tiny();
        let r = rows(3, 5, 1);
        let perm = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        let mut tape = Tape::inference();
        let a = TokenBatch::from_rows(&r, 0).unwrap();
        let b = TokenBatch::from_rows(&perm, 0).unwrap();
        let ha = encode(&mut tape, &store, &base, &cfg, &a, None).unwrap();
        let hb = encode(&mut tape, &store, &base, &cfg, &b, None).unwrap();
        let (va, vb) = (tape.value(ha), tape.value(hb));
        let row = 5 * 8;
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            assert_eq!(&vb[dst * row..(dst + 1) * row], &va[src * row..(src + 1) * row]);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (cfg, store, base) = tiny();
        let mut tape = Tape::inference();
        let src = TokenBatch::from_rows(&rows(1, 6, 2), 0).unwrap();
        let h = encode(&mut tape, &store, &base, &cfg, &src, None).unwrap();
        let p1 = TokenBatch::from_rows(&[vec![1, 4, 5, 6, 7]], 0).unwrap();
        let p2 = TokenBatch::from_rows(&[vec![1, 4, 5, 9, 3]], 0).unwrap();
        let l1 = decode(&mut tape, &store, &base, &cfg, h, &src.keep, &p1, None).unwrap();
        let l2 = decode(&mut tape, &store, &base, &cfg, h, &src.keep, &p2, None).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(&tape.value(l1)[..3 * v], &tape.value(l2)[..3 * v]);
        assert_ne!(&tape.value(l1)[3 * v..], &tape.value(l2)[3 * v..]);
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut tape = Tape::inference();
        let q = tape.leaf(&Tensor::new(&[1, 3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap());
        let k = tape.leaf(&Tensor::new(&[1, 1, 2], vec![1.5, -2.0]).unwrap());
        let v = tape.leaf(&Tensor::new(&[1, 1, 2], vec![4.0, -3.0]).unwrap());
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(w), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.value(out), &[4.0, -3.0, 4.0, -3.0, 4.0, -3.0]);
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::inference();
        let q = tape.leaf(&Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let k = tape.leaf(&Tensor::randn(&[2, 5, 3], 1.0, &mut rng));
        let v = tape.leaf(&Tensor::randn(&[2, 5, 3], 1.0, &mut rng));
        let keep = [true, true, false, true, false, true, true, true, true, false];
        let mask = attention_mask(&keep, 2, 1, 4, 5, false);
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        for row in tape.value(w).chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let bad = vec![true; 3];
        assert!(scaled_dot_attention(&mut tape, q, k, v, Some(&bad)).is_err());
    }

    #[test]
    fn config_validation_names_the_field() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("n_heads"), "{err}");
        let cfg = ModelConfig {
            max_len: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("max_len"));
    }
}
