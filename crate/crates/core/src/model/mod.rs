//! Conformer mask estimator.
//!
//! Weights live in a [`ConformerWeights`] map keyed by name. A forward pass
//! binds them onto a [`Tape`], so the same code serves inference (weights as
//! constants) and training (weights as parameters with gradients).

mod cache;
mod config;
mod weights;

use std::collections::HashMap;
use std::rc::Rc;

use css_tensor::{BatchStats, Tape, Tensor, Var};

pub use cache::AttentionCache;
pub use config::{
    ConformerConfig, DEFAULT_CONV_KERNEL, DEFAULT_MAX_CHUNK_LEN, DEFAULT_NUM_BINS, DEFAULT_NUM_MASKS,
};
pub use weights::{
    count_parameters, decode_container, encode_container, init_weights, load_weights,
    load_weights_for, save_weights, tensor_specs, ConformerWeights, Init, TensorSpec,
};

use crate::dsp::{FeatureTensor, MaskSet};
use crate::error::{CssError, Result};
use crate::Float;

pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the previous running estimate in the batchnorm update.
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

/// Batchnorm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current chunk.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Model tensors placed on a tape, looked up by name.
///
/// Running batchnorm statistics are not bound; the relative-position table
/// is flattened to `[num_heads·(2M−1) × d_k]`.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl BoundWeights {
    pub fn bind<T: Float>(tape: &mut Tape<T>, weights: &ConformerWeights<T>, trainable: bool) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for spec in weights.specs().into_iter().filter(|s| s.trainable) {
            let mut t = weights.get(&spec.name).clone();
            if t.rank() == 3 {
                let s = t.shape().to_vec();
                t = t.reshape(&[s[0] * s[1], s[2]]).expect("same size");
            }
            let v = if trainable { tape.param(t) } else { tape.constant(t) };
            vars.insert(spec.name.clone(), v);
            order.push(spec.name);
        }
        Self { vars, order }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no bound tensor named `{name}`"))
    }

    /// Bound tensors in file order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|n| (n.as_str(), self.vars[n]))
    }
}

fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn bind(b: &BoundWeights, prefix: &str) -> Self {
        Self {
            w: b.var(&format!("{prefix}.weight")),
            b: b.var(&format!("{prefix}.bias")),
        }
    }

    fn apply<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        linear(tape, x, self.w, self.b)
    }
}

/// Projections and position table of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pos: Var,
}

impl AttentionParams {
    pub fn bind(b: &BoundWeights, layer: usize) -> Self {
        let p = format!("layers.{layer}.attn");
        Self {
            q: Linear::bind(b, &format!("{p}.q")),
            k: Linear::bind(b, &format!("{p}.k")),
            v: Linear::bind(b, &format!("{p}.v")),
            o: Linear::bind(b, &format!("{p}.o")),
            pos: b.var(&format!("{p}.pos")),
        }
    }
}

/// Previously computed keys and values, `[L × attn_dim]` each, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct History<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

pub struct AttentionOutput<T> {
    pub output: Var,
    /// Per-head attention weights, `[T × (L+T)]`.
    pub probs: Vec<Var>,
    /// Keys and values of the current chunk, for the cache.
    pub current: History<T>,
}

/// Index into one head's position table for each (query, key) pair of a
/// chunk of `query_len` frames preceded by `cached_len` cached frames.
///
/// Key `j` sits at position `j − cached_len`; the offset key − query is
/// clipped to `±(max_chunk_len − 1)`.
pub fn relative_position_index(query_len: usize, cached_len: usize, max_chunk_len: usize) -> Vec<usize> {
    let reach = max_chunk_len as isize - 1;
    let keys = cached_len + query_len;
    let mut out = Vec::with_capacity(query_len * keys);
    for m in 0..query_len as isize {
        for j in 0..keys as isize {
            let offset = (j - cached_len as isize - m).clamp(-reach, reach);
            out.push((offset + reach) as usize);
        }
    }
    out
}

/// Multi-head self-attention with a learned relative-position term:
/// `softmax(Q_i (K_i + pos)ᵀ / √d_k) V_i` per head, heads concatenated and
/// projected. Cached keys/values are prepended to the current ones;
/// queries come from `x` only.
pub fn relative_attention<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    config: &ConformerConfig,
    history: Option<&History<T>>,
) -> Result<AttentionOutput<T>> {
    let d = config.attn_dim;
    let dk = config.head_dim();
    let t_len = tape.shape(x)[0];
    let q = params.q.apply(tape, x)?;
    let k_cur = params.k.apply(tape, x)?;
    let v_cur = params.v.apply(tape, x)?;
    let current = History {
        keys: tape.value(k_cur).clone(),
        values: tape.value(v_cur).clone(),
    };
    let (k, v, cached_len) = match history {
        Some(h) if h.keys.rows() > 0 => {
            let l = h.keys.rows();
            if l > config.cache_capacity() {
                return Err(CssError::Cache(format!(
                    "{l} cached frames exceed the capacity of {}",
                    config.cache_capacity()
                )));
            }
            if h.keys.shape() != [l, d] || h.values.shape() != [l, d] {
                return Err(CssError::Cache(format!(
                    "cached keys {:?} / values {:?} do not match width {d}",
                    h.keys.shape(),
                    h.values.shape()
                )));
            }
            let kc = tape.constant(h.keys.clone());
            let vc = tape.constant(h.values.clone());
            (
                tape.concat_rows(&[kc, k_cur])?,
                tape.concat_rows(&[vc, v_cur])?,
                l,
            )
        }
        _ => (k_cur, v_cur, 0),
    };
    let keys = cached_len + t_len;
    let index: Rc<[usize]> = relative_position_index(t_len, cached_len, config.max_chunk_len).into();
    let p_len = config.pos_len();
    let inv_scale = T::one() / T::lit(dk as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    let mut probs = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let content = tape.matmul(qh, kt)?;
        let pos_h = tape.slice_rows(params.pos, h * p_len, p_len)?;
        let pt = tape.transpose(pos_h)?;
        let qp = tape.matmul(qh, pt)?;
        let position = tape.gather_cols(qp, index.clone(), keys)?;
        let sum = tape.add(content, position)?;
        let scores = tape.scale(sum, inv_scale);
        let p = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let output = params.o.apply(tape, cat)?;
    Ok(AttentionOutput {
        output,
        probs,
        current,
    })
}

/// Tensors of one Conformer block.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    ffn1: (Linear, Linear),
    ffn2: (Linear, Linear),
    pub attn: AttentionParams,
    pw_in: Linear,
    dw: Linear,
    bn_gain: Var,
    bn_bias: Var,
    pw_out: Linear,
    norm_gain: Var,
    norm_bias: Var,
}

impl LayerParams {
    pub fn bind(b: &BoundWeights, layer: usize) -> Self {
        let p = format!("layers.{layer}");
        let ffn = |name: &str| {
            (
                Linear::bind(b, &format!("{p}.{name}.in")),
                Linear::bind(b, &format!("{p}.{name}.out")),
            )
        };
        Self {
            ffn1: ffn("ffn1"),
            ffn2: ffn("ffn2"),
            attn: AttentionParams::bind(b, layer),
            pw_in: Linear::bind(b, &format!("{p}.conv.pw_in")),
            dw: Linear::bind(b, &format!("{p}.conv.dw")),
            bn_gain: b.var(&format!("{p}.conv.bn.gain")),
            bn_bias: b.var(&format!("{p}.conv.bn.bias")),
            pw_out: Linear::bind(b, &format!("{p}.conv.pw_out")),
            norm_gain: b.var(&format!("{p}.norm.gain")),
            norm_bias: b.var(&format!("{p}.norm.bias")),
        }
    }
}

/// Running batchnorm statistics of one layer.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

pub struct BlockOutput<T> {
    pub output: Var,
    pub attention: AttentionOutput<T>,
    /// Chunk statistics of the batchnorm, present in [`Mode::Train`].
    pub batch_stats: Option<BatchStats<T>>,
}

fn half_ffn<T: Float>(tape: &mut Tape<T>, x: Var, ffn: &(Linear, Linear)) -> Result<Var> {
    let h = ffn.0.apply(tape, x)?;
    let h = tape.swish(h);
    let y = ffn.1.apply(tape, h)?;
    Ok(tape.scale(y, T::lit(0.5)))
}

/// One Conformer block on a `[T × attn_dim]` input.
pub fn conformer_block<T: Float>(
    tape: &mut Tape<T>,
    z: Var,
    layer: &LayerParams,
    config: &ConformerConfig,
    running: RunningStats<'_, T>,
    history: Option<&History<T>>,
    mode: Mode,
) -> Result<BlockOutput<T>> {
    let t_len = tape.shape(z)[0];
    if t_len > config.max_chunk_len {
        return Err(CssError::ChunkLength {
            len: t_len,
            max: config.max_chunk_len,
        });
    }
    let f1 = half_ffn(tape, z, &layer.ffn1)?;
    let z_hat = tape.add(z, f1)?;
    let attention = relative_attention(tape, z_hat, &layer.attn, config, history)?;
    let z1 = tape.add(attention.output, z_hat)?;

    let c = layer.pw_in.apply(tape, z1)?;
    let c = tape.glu(c)?;
    let c = tape.conv1d_depthwise(c, layer.dw.w)?;
    let c = tape.add_row(c, layer.dw.b)?;
    let eps = T::lit(BATCHNORM_EPS);
    let (c, batch_stats) = match mode {
        Mode::Train => {
            let (c, s) = tape.batchnorm_train(c, layer.bn_gain, layer.bn_bias, eps)?;
            (c, Some(s))
        }
        Mode::Eval => (
            tape.batchnorm_eval(c, layer.bn_gain, layer.bn_bias, running.mean, running.var, eps)?,
            None,
        ),
    };
    let c = tape.swish(c);
    let c = layer.pw_out.apply(tape, c)?;
    let z2 = tape.add(c, z1)?;

    let f2 = half_ffn(tape, z2, &layer.ffn2)?;
    let pre = tape.add(z2, f2)?;
    let output = tape.layernorm(pre, layer.norm_gain, layer.norm_bias)?;
    Ok(BlockOutput {
        output,
        attention,
        batch_stats,
    })
}

pub struct ForwardOutput<T> {
    /// One `[T × num_bins]` sigmoid mask per output.
    pub masks: Vec<Var>,
    pub layers: Vec<BlockOutput<T>>,
}

impl<T: Float> ForwardOutput<T> {
    /// Keys/values of every layer for the current chunk.
    pub fn current_kv(&self) -> Vec<History<T>> {
        self.layers.iter().map(|l| l.attention.current.clone()).collect()
    }
}

/// Full forward pass from `[T × feature_dim]` features to masks.
pub fn forward<T: Float>(
    tape: &mut Tape<T>,
    weights: &ConformerWeights<T>,
    bound: &BoundWeights,
    features: Var,
    cache: Option<&AttentionCache<T>>,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let config = weights.config();
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != config.feature_dim {
        return Err(CssError::Dimension(format!(
            "features have shape {shape:?} but the model expects [T × {}]",
            config.feature_dim
        )));
    }
    if shape[0] > config.max_chunk_len {
        return Err(CssError::ChunkLength {
            len: shape[0],
            max: config.max_chunk_len,
        });
    }
    let mut z = Linear::bind(bound, "input").apply(tape, features)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let params = LayerParams::bind(bound, l);
        let running = RunningStats {
            mean: weights.get(&format!("layers.{l}.conv.bn.running_mean")).data(),
            var: weights.get(&format!("layers.{l}.conv.bn.running_var")).data(),
        };
        let history = cache.and_then(|c| c.history(l));
        let out = conformer_block(tape, z, &params, config, running, history.as_ref(), mode)?;
        z = out.output;
        layers.push(out);
    }
    let mut masks = Vec::with_capacity(config.num_output_masks);
    for s in 0..config.num_output_masks {
        let logits = Linear::bind(bound, &format!("head.{s}")).apply(tape, z)?;
        masks.push(tape.sigmoid(logits));
    }
    Ok(ForwardOutput { masks, layers })
}

/// Inference: masks `[num_output_masks × T × num_bins]` for one chunk of
/// features. With a cache, history keys/values are attended to and the
/// current chunk is pushed afterwards.
pub fn forward_masks<T: Float>(
    weights: &ConformerWeights<T>,
    features: &FeatureTensor<T>,
    cache: Option<&mut AttentionCache<T>>,
) -> Result<MaskSet<T>> {
    let config = weights.config();
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, false);
    let x = tape.constant(features.values.clone());
    let out = forward(&mut tape, weights, &bound, x, cache.as_deref(), Mode::Eval)?;
    let frames = features.frames();
    let mut values = Vec::with_capacity(config.num_output_masks * frames * config.num_bins);
    for &m in &out.masks {
        values.extend_from_slice(tape.value(m).data());
    }
    if let Some(c) = cache {
        c.push(out.current_kv())?;
    }
    MaskSet::new(values, config.num_output_masks, frames, config.num_bins)
}

/// Folds chunk statistics into the stored running estimates:
/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running_stats<T: Float>(
    weights: &mut ConformerWeights<T>,
    stats: &[Option<BatchStats<T>>],
    momentum: f64,
) {
    let mo = T::lit(momentum);
    let one_minus = T::one() - mo;
    for (l, s) in stats.iter().enumerate() {
        let Some(s) = s else { continue };
        for (name, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = weights.get_mut(&format!("layers.{l}.conv.bn.{name}")) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = mo * *r + one_minus * b;
                }
            }
        }
    }
}
