//! Bottleneck adapters and the hypernetworks that generate them.
//!
//! An adapter maps `x` to `ReLU(x·W_d + b_d)·W_u + b_u` row-wise. Adapters
//! are either learnt directly, generated once per task from a task
//! embedding, or generated per input from the mean-pooled encoder output.
//! In the last case the generator sees `[e; l_i]`, the pooled embedding
//! concatenated with a learnt embedding of the target layer, so a single
//! hypernetwork serves every layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Adapter weights on a tape. Shared adapters have `W_d: [d, a]`,
/// `b_d: [a]`, `W_u: [a, d]`, `b_u: [d]`; per-example adapters carry a
/// leading batch axis on all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

impl AdapterVars {
    pub fn is_per_example(&self, tape: &Tape) -> bool {
        tape.shape(self.w_down).len() == 3
    }

    pub fn to_params(&self, tape: &Tape) -> AdapterParams {
        AdapterParams {
            w_down: tape.to_tensor(self.w_down),
            b_down: tape.to_tensor(self.b_down),
            w_up: tape.to_tensor(self.w_up),
            b_up: tape.to_tensor(self.b_up),
        }
    }
}

/// Owned adapter values.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl AdapterParams {
    pub fn zeros(d: usize, a: usize) -> Self {
        Self {
            w_down: Tensor::zeros(&[d, a]),
            b_down: Tensor::zeros(&[a]),
            w_up: Tensor::zeros(&[a, d]),
            b_up: Tensor::zeros(&[d]),
        }
    }

    pub fn leaf(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            w_down: tape.leaf(&self.w_down),
            b_down: tape.leaf(&self.b_down),
            w_up: tape.leaf(&self.w_up),
            b_up: tape.leaf(&self.b_up),
        }
    }

    /// L2 distance over all four arrays.
    pub fn distance(&self, other: &AdapterParams) -> f32 {
        let sq = |a: &Tensor, b: &Tensor| a.l2_distance(b).powi(2);
        (sq(&self.w_down, &other.w_down)
            + sq(&self.b_down, &other.b_down)
            + sq(&self.w_up, &other.w_up)
            + sq(&self.b_up, &other.b_up))
        .sqrt()
    }

    pub fn numel(&self) -> usize {
        self.w_down.len() + self.b_down.len() + self.w_up.len() + self.b_up.len()
    }
}

/// Applies an adapter to `x[..., d]` (shared) or `x[B, n, d]` (per-example).
pub fn adapter_forward(tape: &mut Tape, x: Var, p: &AdapterVars) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(p.w_down).to_vec();
    if p.is_per_example(tape) {
        if sx.len() != 3 || sx[0] != sw[0] || sx[2] != sw[1] {
            return Err(Error::Shape(format!(
                "per-example adapter with W_d {sw:?} applied to {sx:?}"
            )));
        }
        let h = tape.bmm(x, p.w_down, false)?;
        let h = tape.add_batch_bias(h, p.b_down)?;
        let h = tape.relu(h);
        let o = tape.bmm(h, p.w_up, false)?;
        tape.add_batch_bias(o, p.b_up)
    } else {
        let h = tape.linear(x, p.w_down)?;
        let h = tape.add_bias(h, p.b_down)?;
        let h = tape.relu(h);
        let o = tape.linear(h, p.w_up)?;
        tape.add_bias(o, p.b_up)
    }
}

/// Standard deviation of a directly initialized up-projection.
pub fn adapter_up_std(a: usize) -> f32 {
    0.01 / (a as f32).sqrt()
}

/// Stored ids of a directly learnt adapter.
#[derive(Debug, Clone)]
pub struct AdapterIds {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl AdapterIds {
    /// `W_d ~ N(0, 1/d)`, `W_u ~ N(0, 1e-4/a)`, zero biases.
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, a: usize, rng: &mut R) -> Result<Self> {
        let w_down = Tensor::randn(&[d, a], (1.0 / d as f32).sqrt(), rng);
        let w_up = Tensor::randn(&[a, d], adapter_up_std(a), rng);
        Ok(Self {
            w_down: store.insert(format!("{prefix}.w_down"), ParamKind::AdapterWeight, w_down)?,
            b_down: store.insert(format!("{prefix}.b_down"), ParamKind::AdapterBias, Tensor::zeros(&[a]))?,
            w_up: store.insert(format!("{prefix}.w_up"), ParamKind::AdapterWeight, w_up)?,
            b_up: store.insert(format!("{prefix}.b_up"), ParamKind::AdapterBias, Tensor::zeros(&[d]))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> AdapterVars {
        AdapterVars {
            w_down: store.bind(tape, self.w_down),
            b_down: store.bind(tape, self.b_down),
            w_up: store.bind(tape, self.w_up),
            b_up: store.bind(tape, self.b_up),
        }
    }
}

/// Sizes of one generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperDims {
    /// Width of the conditioning input (`d` for pooled input, `e_t` for
    /// task embeddings).
    pub input: usize,
    pub d: usize,
    pub a: usize,
    pub bottleneck: usize,
    pub layer_embed: usize,
    pub layers: usize,
}

/// The shared generator: `h = ReLU(W_0·[x; l_i] + b_0)` followed by four
/// linear heads producing `W_u`, `W_d`, `b_u` and `b_d`.
#[derive(Debug, Clone)]
pub struct HypernetIds {
    pub dims: HyperDims,
    pub w0: ParamId,
    pub b0: ParamId,
    /// `W_1, b_1` produce `W_u`.
    pub head_w_up: (ParamId, ParamId),
    /// `W_2, b_2` produce `W_d`.
    pub head_w_down: (ParamId, ParamId),
    /// `W_3, b_3` produce `b_u`.
    pub head_b_up: (ParamId, ParamId),
    /// `W_4, b_4` produce `b_d`.
    pub head_b_down: (ParamId, ParamId),
    pub layer_embeds: Vec<ParamId>,
}

/// Two linear layers `d → d → d` with a ReLU between them.
#[derive(Debug, Clone)]
pub struct PoolMlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Input-conditioned generator: optional pooling MLP plus the hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperdecoderState {
    pub pool: Option<PoolMlpIds>,
    pub net: HypernetIds,
}

/// Task-conditioned generator for one side of the model. Each side keeps
/// its own task table.
#[derive(Debug, Clone)]
pub struct TaskHypernetState {
    pub task_embeds: ParamId,
    pub num_tasks: usize,
    pub net: HypernetIds,
}

/// Which conditioning a task-hypernetwork uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskCondition {
    Task(usize),
    /// Arithmetic mean of all learnt task embeddings, for inputs from an
    /// unseen domain.
    MeanEmbedding,
}

impl HypernetIds {
    fn register(store: &mut ParamStore, prefix: &str, dims: HyperDims) -> Result<Self> {
        let HyperDims {
            input,
            d,
            a,
            bottleneck: b,
            layer_embed,
            layers,
        } = dims;
        let mut head = |name: &str, out: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.insert(format!("{prefix}.{name}.w"), ParamKind::HyperHead, Tensor::zeros(&[b, out]))?,
                store.insert(format!("{prefix}.{name}.b"), ParamKind::HyperBias, Tensor::zeros(&[out]))?,
            ))
        };
        let head_w_up = head("head_w_up", a * d)?;
        let head_w_down = head("head_w_down", d * a)?;
        let head_b_up = head("head_b_up", d)?;
        let head_b_down = head("head_b_down", a)?;
        let w0 = store.insert(
            format!("{prefix}.w0"),
            ParamKind::HyperInput,
            Tensor::zeros(&[input + layer_embed, b]),
        )?;
        let b0 = store.insert(format!("{prefix}.b0"), ParamKind::HyperBias, Tensor::zeros(&[b]))?;
        let layer_embeds = (0..layers)
            .map(|i| {
                store.insert(
                    format!("{prefix}.layer_embed.{i}"),
                    ParamKind::LayerEmbedding,
                    Tensor::zeros(&[layer_embed]),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            w0,
            b0,
            head_w_up,
            head_w_down,
            head_b_up,
            head_b_down,
            layer_embeds,
        })
    }

    pub fn heads(&self) -> [(ParamId, ParamId); 4] {
        [self.head_w_up, self.head_w_down, self.head_b_up, self.head_b_down]
    }

    /// Sets all four output heads (weights and biases) to zero.
    pub fn zero_heads(&self, store: &mut ParamStore) -> Result<()> {
        for (w, b) in self.heads() {
            let (sw, sb) = (store.get(w).shape().to_vec(), store.get(b).shape().to_vec());
            store.set(w, Tensor::zeros(&sw))?;
            store.set(b, Tensor::zeros(&sb))?;
        }
        Ok(())
    }
}

impl PoolMlpIds {
    fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            w1: store.insert(format!("{prefix}.w1"), ParamKind::PoolWeight, Tensor::zeros(&[d, d]))?,
            b1: store.insert(format!("{prefix}.b1"), ParamKind::PoolBias, Tensor::zeros(&[d]))?,
            w2: store.insert(format!("{prefix}.w2"), ParamKind::PoolWeight, Tensor::zeros(&[d, d]))?,
            b2: store.insert(format!("{prefix}.b2"), ParamKind::PoolBias, Tensor::zeros(&[d]))?,
        })
    }
}

impl HyperdecoderState {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: HyperDims,
        use_mlp: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let pool = if use_mlp {
            Some(PoolMlpIds::register(store, &format!("{prefix}.pool"), dims.d)?)
        } else {
            None
        };
        let net = HypernetIds::register(store, prefix, dims)?;
        let state = Self { pool, net };
        init_hyper(store, &state.net, state.pool.as_ref(), rng)?;
        Ok(state)
    }
}

impl TaskHypernetState {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        num_tasks: usize,
        dims: HyperDims,
        rng: &mut R,
    ) -> Result<Self> {
        let e_t = dims.input;
        let task_embeds = store.insert(
            format!("{prefix}.task_embed"),
            ParamKind::TaskEmbedding,
            Tensor::randn(&[num_tasks, e_t], (1.0 / e_t as f32).sqrt(), rng),
        )?;
        let net = HypernetIds::register(store, prefix, dims)?;
        init_hyper(store, &net, None, rng)?;
        Ok(Self {
            task_embeds,
            num_tasks,
            net,
        })
    }
}

/// Second moment of one hidden unit of the generator at initialization,
/// for an input with `E|x|^2 = 1` plus layer embeddings of scale 0.01 and
/// `W_0 ~ U(-1/√fan_in, 1/√fan_in)`, `b_0 = 0`.
pub fn hidden_second_moment(dims: &HyperDims) -> f32 {
    let fan_in = (dims.input + dims.layer_embed) as f32;
    let input_sq = 1.0 + dims.layer_embed as f32 * 1e-4;
    let pre_var = input_sq / (3.0 * fan_in);
    0.5 * pre_var
}

/// Initializes a generator.
///
/// The pooling MLP and `W_0` use fan-in uniform initialization. The heads
/// producing `W_d` and `W_u` are scaled so the generated matrices have the
/// variance of a directly initialized adapter (`1/d` and `1e-4/a`). The
/// bias heads and all head biases are zero, so generated adapter biases
/// start at exactly 0.
/// Layer embeddings are drawn from `N(0, 1)·0.01`.
pub fn init_hyper<R: Rng>(
    store: &mut ParamStore,
    net: &HypernetIds,
    pool: Option<&PoolMlpIds>,
    rng: &mut R,
) -> Result<()> {
    let dims = net.dims;
    let (d, a, b) = (dims.d, dims.a, dims.bottleneck);
    if let Some(p) = pool {
        let bound = 1.0 / (d as f32).sqrt();
        store.set(p.w1, Tensor::uniform(&[d, d], bound, rng))?;
        store.set(p.b1, Tensor::zeros(&[d]))?;
        store.set(p.w2, Tensor::uniform(&[d, d], bound, rng))?;
        store.set(p.b2, Tensor::zeros(&[d]))?;
    }
    let fan_in = dims.input + dims.layer_embed;
    store.set(net.w0, Tensor::uniform(&[fan_in, b], 1.0 / (fan_in as f32).sqrt(), rng))?;
    store.set(net.b0, Tensor::zeros(&[b]))?;

    let h2 = hidden_second_moment(&dims);
    let head_std = |target_var: f32| (target_var / (b as f32 * h2)).sqrt();
    let up_std = head_std(adapter_up_std(a).powi(2));
    let down_std = head_std(1.0 / d as f32);
    store.set(net.head_w_up.0, Tensor::randn(&[b, a * d], up_std, rng))?;
    store.set(net.head_w_down.0, Tensor::randn(&[b, d * a], down_std, rng))?;
    store.set(net.head_b_up.0, Tensor::zeros(&[b, d]))?;
    store.set(net.head_b_down.0, Tensor::zeros(&[b, a]))?;
    for (_, bias) in net.heads() {
        let shape = store.get(bias).shape().to_vec();
        store.set(bias, Tensor::zeros(&shape))?;
    }
    for &l in &net.layer_embeds {
        store.set(l, Tensor::randn(&[dims.layer_embed], 0.01, rng))?;
    }
    Ok(())
}

/// `e = MLP(mean(h))` over the kept rows of `enc_h` (`[n, d]` or
/// `[B, n, d]`); the MLP is skipped when `use_mlp` is false or the state
/// has none.
pub fn pool_embed(
    tape: &mut Tape,
    store: &ParamStore,
    enc_h: Var,
    keep: &[bool],
    state: &HyperdecoderState,
    use_mlp: bool,
) -> Result<Var> {
    let pooled = tape.mean_pool(enc_h, keep)?;
    match (&state.pool, use_mlp) {
        (Some(p), true) => {
            let w1 = store.bind(tape, p.w1);
            let b1 = store.bind(tape, p.b1);
            let w2 = store.bind(tape, p.w2);
            let b2 = store.bind(tape, p.b2);
            let h = tape.linear(pooled, w1)?;
            let h = tape.add_bias(h, b1)?;
            let h = tape.relu(h);
            let o = tape.linear(h, w2)?;
            tape.add_bias(o, b2)
        }
        (None, true) => Err(Error::UnsupportedMode(
            "pooling MLP requested but the generator was built without one".into(),
        )),
        (_, false) => Ok(pooled),
    }
}

/// Generates adapter parameters for layer `layer` from conditioning `e`
/// (`[input]` for a shared adapter or `[B, input]` for per-example ones).
pub fn hypernet_generate(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    layer: usize,
    net: &HypernetIds,
) -> Result<AdapterVars> {
    let l = *net
        .layer_embeds
        .get(layer)
        .ok_or_else(|| Error::Shape(format!("no layer embedding for layer {layer}")))?;
    let lv = store.bind(tape, l);
    hypernet_generate_with(tape, store, e, lv, net)
}

/// [`hypernet_generate`] with an explicit layer-embedding node.
pub fn hypernet_generate_with(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    layer_embed: Var,
    net: &HypernetIds,
) -> Result<AdapterVars> {
    let HyperDims { input, d, a, .. } = net.dims;
    let se = tape.shape(e).to_vec();
    let (rows, batched) = match se.as_slice() {
        &[w] if w == input => (1, false),
        &[b, w] if w == input => (b, true),
        _ => {
            return Err(Error::Shape(format!(
                "hypernetwork input {se:?} does not match width {input}"
            )))
        }
    };
    if tape.shape(layer_embed) != [net.dims.layer_embed] {
        return Err(Error::Shape(format!(
            "layer embedding {:?} does not match width {}",
            tape.shape(layer_embed),
            net.dims.layer_embed
        )));
    }
    let e2 = tape.reshape(e, &[rows, input])?;
    let l2 = tape.broadcast_rows(layer_embed, rows)?;
    let x = tape.concat(e2, l2)?;
    let w0 = store.bind(tape, net.w0);
    let b0 = store.bind(tape, net.b0);
    let h = tape.linear(x, w0)?;
    let h = tape.add_bias(h, b0)?;
    let h = tape.relu(h);

    let mut head = |(w, b): (ParamId, ParamId), shape: &[usize]| -> Result<Var> {
        let wv = store.bind(tape, w);
        let bv = store.bind(tape, b);
        let o = tape.linear(h, wv)?;
        let o = tape.add_bias(o, bv)?;
        let mut full = Vec::with_capacity(shape.len() + 1);
        if batched {
            full.push(rows);
        }
        full.extend_from_slice(shape);
        tape.reshape(o, &full)
    };
    let w_up = head(net.head_w_up, &[a, d])?;
    let w_down = head(net.head_w_down, &[d, a])?;
    let b_up = head(net.head_b_up, &[d])?;
    let b_down = head(net.head_b_down, &[a])?;
    Ok(AdapterVars {
        w_down,
        b_down,
        w_up,
        b_up,
    })
}

/// Per-example adapters for every layer served by `state`, conditioned on
/// the pooled `enc_h[B, n, d]`.
pub fn generate_decoder_adapters(
    tape: &mut Tape,
    store: &ParamStore,
    enc_h: Var,
    keep: &[bool],
    state: &HyperdecoderState,
    use_mlp: bool,
) -> Result<Vec<AdapterVars>> {
    if tape.shape(enc_h).len() != 3 {
        return Err(Error::Shape(format!(
            "expected batched encoder states, got {:?}",
            tape.shape(enc_h)
        )));
    }
    let e = pool_embed(tape, store, enc_h, keep, state, use_mlp)?;
    (0..state.net.layer_embeds.len())
        .map(|i| hypernet_generate(tape, store, e, i, &state.net))
        .collect()
}

/// Shared adapters for every layer, conditioned on a task embedding.
pub fn task_hypernet_generate(
    tape: &mut Tape,
    store: &ParamStore,
    cond: TaskCondition,
    state: &TaskHypernetState,
) -> Result<Vec<AdapterVars>> {
    let table = store.bind(tape, state.task_embeds);
    let e = match cond {
        TaskCondition::Task(t) => {
            if t >= state.num_tasks {
                return Err(Error::UnknownTask(t));
            }
            let row = tape.embedding(table, &[t])?;
            tape.reshape(row, &[state.net.dims.input])?
        }
        TaskCondition::MeanEmbedding => {
            let keep = vec![true; state.num_tasks];
            tape.mean_pool(table, &keep)?
        }
    };
    (0..state.net.layer_embeds.len())
        .map(|i| hypernet_generate(tape, store, e, i, &state.net))
        .collect()
}
