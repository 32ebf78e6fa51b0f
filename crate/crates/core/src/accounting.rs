//! Closed-form trainable-parameter counts and an instantiate-and-count
//! oracle.
//!
//! The closed forms count adapter weights and biases, generator input and
//! head weights, task embeddings, task-generator layer embeddings and
//! pooling-MLP weights. They leave out biases internal to a generator
//! (`b_0` and the head biases), pooling-MLP biases and the layer
//! embeddings of an input-conditioned generator. [`counted_by_formula`]
//! applies the same rule to a live [`ParamStore`].

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamKind, ParamStore};
use crate::transformer::{AdaptationMode, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CountInputs {
    /// Layers per side.
    pub l: u64,
    pub d: u64,
    pub a: u64,
    pub t: u64,
    pub b: u64,
    pub e_t: u64,
    pub e_l: u64,
}

/// `l(2ad + a + d)`.
pub fn count_adapters(l: u64, a: u64, d: u64) -> u64 {
    l * (2 * a * d + a + d)
}

/// Heads producing one adapter: `b(2ad + a + d)`.
fn head_cost(b: u64, a: u64, d: u64) -> u64 {
    b * (2 * a * d + a + d)
}

/// One task-conditioned generator: `t·e_t + l·e_l + (e_t + e_l)b + b(2ad + a + d)`.
pub fn task_hypernet_side(c: &CountInputs) -> u64 {
    c.t * c.e_t + c.l * c.e_l + (c.e_t + c.e_l) * c.b + head_cost(c.b, c.a, c.d)
}

/// Both task-conditioned generators (encoder and decoder).
pub fn count_task_hypernet(c: &CountInputs) -> u64 {
    2 * task_hypernet_side(c)
}

/// One input-conditioned generator: `2d² + (d + e_l)b + b(2ad + a + d)`,
/// without the `2d²` term when the pooling MLP is bypassed.
pub fn generated_side(c: &CountInputs, use_mlp: bool) -> u64 {
    let mlp = if use_mlp { 2 * c.d * c.d } else { 0 };
    mlp + (c.d + c.e_l) * c.b + head_cost(c.b, c.a, c.d)
}

/// Encoder adapters plus the input-conditioned decoder generator.
pub fn count_hyperdecoder(c: &CountInputs) -> u64 {
    count_adapters(c.l, c.a, c.d) + generated_side(c, true)
}

fn side_inputs(cfg: &ModelConfig, layers: usize, a: usize) -> CountInputs {
    CountInputs {
        l: layers as u64,
        d: cfg.d_model as u64,
        a: a as u64,
        t: cfg.num_tasks as u64,
        b: cfg.hypernet_bottleneck as u64,
        e_t: cfg.task_embed_dim as u64,
        e_l: cfg.layer_embed_dim as u64,
    }
}

fn side_count(mode: AdaptationMode, c: &CountInputs, use_mlp: bool) -> u64 {
    match mode {
        AdaptationMode::None => 0,
        AdaptationMode::Manual => count_adapters(c.l, c.a, c.d),
        AdaptationMode::Task => task_hypernet_side(c),
        AdaptationMode::Generated => generated_side(c, use_mlp),
    }
}

/// Closed-form trainable count of a configuration; `base` is returned for
/// full finetuning.
pub fn formula_count(cfg: &ModelConfig, base: u64) -> u64 {
    if cfg.full_finetune {
        return base;
    }
    let enc = side_inputs(cfg, cfg.n_enc_layers, cfg.enc_adapter_dim);
    let dec = side_inputs(cfg, cfg.n_dec_layers, cfg.dec_adapter_dim);
    side_count(cfg.enc_mode, &enc, cfg.use_mlp) + side_count(cfg.dec_mode, &dec, cfg.use_mlp)
}

/// Whether a stored parameter is covered by the closed forms.
pub fn counted_by_formula(name: &str, kind: ParamKind) -> bool {
    match kind {
        ParamKind::AdapterWeight
        | ParamKind::AdapterBias
        | ParamKind::PoolWeight
        | ParamKind::HyperInput
        | ParamKind::HyperHead
        | ParamKind::TaskEmbedding => true,
        ParamKind::LayerEmbedding => name.split('.').any(|p| p == "task"),
        ParamKind::Base | ParamKind::PoolBias | ParamKind::HyperBias | ParamKind::Probe => false,
    }
}

/// Instantiate-and-count under [`counted_by_formula`].
pub fn oracle_count(store: &ParamStore) -> u64 {
    store.numel_where(counted_by_formula) as u64
}

/// Trainable share of the base model, in percent.
pub fn trainable_fraction(trainable: u64, base: u64) -> Result<f64> {
    if base == 0 {
        return Err(Error::Degenerate("base parameter count is zero".into()));
    }
    Ok(100.0 * trainable as f64 / base as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountRow {
    pub label: String,
    pub formula: u64,
    pub oracle: u64,
    /// Every trainable element, biases included.
    pub trainable: u64,
    pub fraction_pct: f64,
}

/// Counts for one configuration, building the model to obtain the oracle.
pub fn account(label: &str, cfg: &ModelConfig) -> Result<AccountRow> {
    let m = Model::new(cfg.clone(), 0)?;
    let base = m.base_count() as u64;
    let formula = formula_count(cfg, base);
    let oracle = if cfg.full_finetune { base } else { oracle_count(&m.store) };
    Ok(AccountRow {
        label: label.to_string(),
        formula,
        oracle,
        trainable: m.trainable_count() as u64,
        fraction_pct: trainable_fraction(formula, base)?,
    })
}

pub fn rows_text(rows: &[AccountRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<w$}  {:>10}  {:>10}  {:>10}  {:>9}\n", "mode", "formula", "oracle", "trainable", "% base");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>10}  {:>10}  {:>8.3}%",
            r.label, r.formula, r.oracle, r.trainable, r.fraction_pct
        );
    }
    s
}

pub fn rows_csv(rows: &[AccountRow]) -> String {
    let mut s = String::from("mode,formula,oracle,trainable,fraction_pct\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.label, r.formula, r.oracle, r.trainable, r.fraction_pct);
    }
    s
}
