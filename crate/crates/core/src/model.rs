//! Decoder-only transformer used for both the verifier and the drafter.
//!
//! Pre-norm residual blocks with RMSNorm, rotary position embeddings and a
//! SwiGLU MLP `W_d((W_u a + b) ⊙ silu(W_g a))`, where the optional `b` is the
//! steering bias supplied through an [`MlpHook`]. The same tape-level forward
//! serves training (batched, gradients on) and inference (KV cache, no grad).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::tensor::{softmax, AttentionShape, Float, Tape, Tensor, Var};

/// Standard deviation of the scaled-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Residual-stream layers read by the verifier to build steering vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapLayers {
    pub low: usize,
    pub mid: usize,
    pub high: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Required when the default `(3, L/2, L-2)` is not three distinct layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_layers: Option<TapLayers>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_mlp,
            vocab_size,
            max_seq_len,
            tap_layers: None,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn with_taps(mut self, low: usize, mid: usize, high: usize) -> Self {
        self.tap_layers = Some(TapLayers { low, mid, high });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config("head dimension must be even for rotary embeddings".into()));
        }
        Ok(())
    }

    /// Tap layers, falling back to `(3, L/2, L-2)` clamped into `[0, L-1]`.
    pub fn taps(&self) -> Result<TapLayers> {
        let last = self.n_layers.saturating_sub(1);
        if let Some(t) = self.tap_layers {
            if [t.low, t.mid, t.high].iter().any(|&l| l > last) {
                return Err(Error::Config(format!("tap layers {t:?} outside 0..={last}")));
            }
            return Ok(t);
        }
        if self.n_layers < 5 {
            return Err(Error::Config(format!(
                "a {}-layer model needs explicit tap_layers",
                self.n_layers
            )));
        }
        let clamp = |l: usize| l.min(last);
        let t = TapLayers {
            low: clamp(3),
            mid: clamp(self.n_layers / 2),
            high: clamp(self.n_layers.saturating_sub(2)),
        };
        if t.low == t.mid || t.mid == t.high || t.low == t.high {
            return Err(Error::Config(format!(
                "default tap layers {t:?} for {} layers collide; set tap_layers",
                self.n_layers
            )));
        }
        Ok(t)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Verifier,
    Drafter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S = f32> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub mlp_norm: Tensor<S>,
    /// `[d_mlp × d_model]`
    pub w_up: Tensor<S>,
    /// `[d_mlp × d_model]`
    pub w_gate: Tensor<S>,
    /// `[d_model × d_mlp]`
    pub w_down: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<S = f32> {
    pub config: ModelConfig,
    pub role: Role,
    trainable: bool,
    pub embedding: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Tensor<S>,
    pub unembedding: Tensor<S>,
}

const LAYER_PARAMS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_gate", "w_down",
];

impl<S: Float> LayerWeights<S> {
    fn init<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> Self {
        let (d, f) = (c.d_model, c.d_mlp);
        Self {
            attn_norm: Tensor::ones(&[d]),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            mlp_norm: Tensor::ones(&[d]),
            w_up: Tensor::randn(&[f, d], INIT_STD, rng),
            w_gate: Tensor::randn(&[f, d], INIT_STD, rng),
            w_down: Tensor::randn(&[d, f], INIT_STD, rng),
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_gate,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
        ]
    }
}

/// Expected shape of every named parameter for a config.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (c.d_model, c.d_mlp, c.vocab_size);
    let mut out = vec![("embedding".to_string(), vec![v, d])];
    for l in 0..c.n_layers {
        let shapes = [vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![f, d], vec![f, d], vec![d, f]];
        for (name, shape) in LAYER_PARAMS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("unembedding".into(), vec![v, d]));
    out
}

/// Per-layer keys (post-rotary) and values for positions `[0, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<S = f32> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
    d_model: usize,
    capacity: usize,
}

impl<S: Float> KvCache<S> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            d_model: config.d_model,
            capacity: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.d_model);
            v.truncate(len * self.d_model);
        }
        self.len = len;
    }

    pub fn layer_keys(&self, layer: usize) -> &[S] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[S] {
        &self.values[layer]
    }
}

/// Residual-stream activations of one position at the three tap layers.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTaps<S = f32> {
    pub h: Vec<S>,
    pub m: Vec<S>,
    pub l: Vec<S>,
}

/// Tap activations for every row of a forward call, each `[rows × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TapRows<S = f32> {
    pub high: Tensor<S>,
    pub mid: Tensor<S>,
    pub low: Tensor<S>,
}

impl<S: Float> TapRows<S> {
    pub fn at(&self, row: usize) -> HiddenTaps<S> {
        HiddenTaps {
            h: self.high.row(row).to_vec(),
            m: self.mid.row(row).to_vec(),
            l: self.low.row(row).to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.high.rows()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S = f32> {
    /// `[n × vocab]`
    pub logits: Tensor<S>,
    pub taps: Option<TapRows<S>>,
}

/// Injection points inside each MLP block.
///
/// `up_bias` is added to `W_u a` before the gate (shape `[d_mlp]` or
/// `[rows × d_mlp]`); `out_bias` is added to the block output (`[d_model]` or
/// `[rows × d_model]`). `residual` is the residual stream entering the layer.
pub trait MlpHook<S: Float> {
    fn up_bias<'a>(&'a self, _tape: &mut Tape<'a, S>, _layer: usize, _residual: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn out_bias<'a>(&'a self, _tape: &mut Tape<'a, S>, _layer: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Plain per-layer bias vectors, constant across positions.
#[derive(Clone, Debug, PartialEq)]
pub enum BiasSet<S = f32> {
    /// One `[d_mlp]` vector per layer, added after the up-projection.
    UpProjection(Vec<Tensor<S>>),
    /// One `[d_model]` vector per layer, added to the MLP output.
    MlpOutput(Vec<Tensor<S>>),
}

impl<S: Float> BiasSet<S> {
    pub fn zeros_up(config: &ModelConfig) -> Self {
        BiasSet::UpProjection(vec![Tensor::zeros(&[config.d_mlp]); config.n_layers])
    }

    pub fn layers(&self) -> &[Tensor<S>] {
        match self {
            BiasSet::UpProjection(v) | BiasSet::MlpOutput(v) => v,
        }
    }
}

impl<S: Float> MlpHook<S> for BiasSet<S> {
    fn up_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize, _residual: Var) -> Result<Option<Var>> {
        match self {
            BiasSet::UpProjection(b) => Ok(Some(tape.leaf_ref(&b[layer], false))),
            BiasSet::MlpOutput(_) => Ok(None),
        }
    }

    fn out_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize) -> Result<Option<Var>> {
        match self {
            BiasSet::MlpOutput(b) => Ok(Some(tape.leaf_ref(&b[layer], false))),
            BiasSet::UpProjection(_) => Ok(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
}

/// Model weights registered on a tape, in [`TransformerModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub unembedding: Var,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_up, l.w_gate, l.w_down]);
        }
        out.push(self.final_norm);
        out.push(self.unembedding);
        out
    }
}

/// Tape handles produced by [`TransformerModel::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// `(low, mid, high)` residual activations.
    pub taps: Option<(Var, Var, Var)>,
    /// Post-rotary keys and values of the new rows, per layer.
    pub new_kv: Vec<(Var, Var)>,
}

/// SwiGLU MLP with optional steering biases:
/// `W_d((W_u a + up_bias) ⊙ silu(W_g a)) + out_bias`.
pub fn mlp_on_tape<'a, S: Float>(
    tape: &mut Tape<'a, S>,
    layer: &BoundLayer,
    a: Var,
    up_bias: Option<Var>,
    out_bias: Option<Var>,
) -> Result<Var> {
    let mut up = tape.linear(a, layer.w_up)?;
    if let Some(b) = up_bias {
        up = tape.add(up, b)?;
    }
    let gate = tape.linear(a, layer.w_gate)?;
    let gate = tape.silu(gate);
    let hidden = tape.mul(up, gate)?;
    let mut out = tape.linear(hidden, layer.w_down)?;
    if let Some(b) = out_bias {
        out = tape.add(out, b)?;
    }
    Ok(out)
}

impl<S: Float> TransformerModel<S> {
    /// Scaled-normal init (std 0.02) for embeddings and projections, ones for
    /// norm gains. Verifiers start frozen, drafters trainable.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, role: Role, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let embedding = Tensor::randn(&[v, d], INIT_STD, rng);
        let layers = (0..config.n_layers).map(|_| LayerWeights::init(&config, rng)).collect();
        let unembedding = Tensor::randn(&[v, d], INIT_STD, rng);
        Ok(Self {
            role,
            trainable: role == Role::Drafter,
            embedding,
            layers,
            final_norm: Tensor::ones(&[d]),
            unembedding,
            config,
        })
    }

    /// Rebuilds a model from named tensors in [`param_shapes`] order.
    pub fn from_params(config: ModelConfig, role: Role, mut tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(contract_err!("expected {} tensors, got {}", shapes.len(), tensors.len()));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(crate::error::dim_err!("{name}: expected {:?}, got {:?}", shape, t.shape()));
            }
        }
        let unembedding = tensors.pop().expect("len checked");
        let final_norm = tensors.pop().expect("len checked");
        let mut it = tensors.into_iter();
        let embedding = it.next().expect("len checked");
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut next = || it.next().expect("len checked");
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                w_gate: next(),
                w_down: next(),
            });
        }
        Ok(Self {
            role,
            trainable: role == Role::Drafter,
            embedding,
            layers,
            final_norm,
            unembedding,
            config,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Copy of this model with a different role (e.g. to self-draft).
    pub fn with_role(&self, role: Role) -> Self {
        let mut m = self.clone();
        m.role = role;
        m.trainable = role == Role::Drafter;
        m
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAMS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembedding".into(), &self.unembedding));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LAYER_PARAMS.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembedding".into(), &mut self.unembedding));
        out
    }

    pub fn cast<T: Float>(&self) -> TransformerModel<T> {
        let tensors = self.params().into_iter().map(|(_, t)| t.cast::<T>()).collect();
        let mut m = TransformerModel::from_params(self.config.clone(), self.role, tensors)
            .expect("same config, same shapes");
        m.trainable = self.trainable;
        m
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &'a Tensor<S>| tape.leaf_ref(t, trainable);
        let embedding = leaf(&self.embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                mlp_norm: leaf(&l.mlp_norm),
                w_up: leaf(&l.w_up),
                w_gate: leaf(&l.w_gate),
                w_down: leaf(&l.w_down),
            })
            .collect();
        BoundModel {
            embedding,
            layers,
            final_norm: leaf(&self.final_norm),
            unembedding: leaf(&self.unembedding),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract_err!("forward needs at least one token"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass of `batch` sequences of `tokens.len() / batch`
    /// tokens each. With a `past` cache the batch must be 1 and the new rows
    /// continue at position `past.len()`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        bound: &BoundModel,
        tokens: &[usize],
        batch: usize,
        past: Option<&KvCache<S>>,
        hook: Option<&'a dyn MlpHook<S>>,
        capture_taps: bool,
    ) -> Result<TapeForward> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(contract_err!("{} tokens do not split into {batch} sequences", tokens.len()));
        }
        let n = tokens.len() / batch;
        let past_len = past.map_or(0, KvCache::len);
        if past_len > 0 && batch != 1 {
            return Err(contract_err!("cached forward supports a single sequence"));
        }
        if past_len + n > c.max_seq_len {
            return Err(Error::Capacity(format!(
                "{} cached + {} new positions exceed max_seq_len {}",
                past_len, n, c.max_seq_len
            )));
        }
        let taps = if capture_taps { Some(c.taps()?) } else { None };
        let positions: Vec<usize> = (0..tokens.len()).map(|r| past_len + r % n).collect();
        let shape = AttentionShape {
            heads: c.n_heads,
            batch,
            q_len: n,
            kv_len: past_len + n,
        };

        let mut x = tape.embedding(bound.embedding, tokens)?;
        let mut tapped: [Option<Var>; 3] = [None; 3];
        let mut new_kv = Vec::with_capacity(c.n_layers);
        for (li, layer) in bound.layers.iter().enumerate() {
            let residual_in = x;
            let h = tape.rms_norm(x, layer.attn_norm, c.norm_eps)?;
            let q = tape.linear(h, layer.wq)?;
            let k = tape.linear(h, layer.wk)?;
            let v = tape.linear(h, layer.wv)?;
            let q = tape.rope(q, c.n_heads, &positions, c.rope_base)?;
            let k = tape.rope(k, c.n_heads, &positions, c.rope_base)?;
            new_kv.push((k, v));
            let (k_all, v_all) = match past {
                Some(cache) if past_len > 0 => {
                    let pk = Tensor::new(vec![past_len, c.d_model], cache.layer_keys(li).to_vec())?;
                    let pv = Tensor::new(vec![past_len, c.d_model], cache.layer_values(li).to_vec())?;
                    let pk = tape.constant(pk);
                    let pv = tape.constant(pv);
                    (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
                }
                _ => (k, v),
            };
            let att = tape.causal_attention(q, k_all, v_all, shape)?;
            let att = tape.linear(att, layer.wo)?;
            x = tape.add(x, att)?;
            let a = tape.rms_norm(x, layer.mlp_norm, c.norm_eps)?;
            let (up_bias, out_bias) = match hook {
                Some(hk) => (hk.up_bias(tape, li, residual_in)?, hk.out_bias(tape, li)?),
                None => (None, None),
            };
            let f = mlp_on_tape(tape, layer, a, up_bias, out_bias)?;
            x = tape.add(x, f)?;
            if let Some(t) = taps {
                for (slot, want) in tapped.iter_mut().zip([t.low, t.mid, t.high]) {
                    if want == li {
                        *slot = Some(x);
                    }
                }
            }
        }
        let xn = tape.rms_norm(x, bound.final_norm, c.norm_eps)?;
        let logits = tape.linear(xn, bound.unembedding)?;
        let taps = match tapped {
            [Some(l), Some(m), Some(h)] => Some((l, m, h)),
            _ => None,
        };
        Ok(TapeForward { logits, taps, new_kv })
    }

    /// Inference forward over `tokens`, extending `cache` when given.
    pub fn forward<'a>(
        &'a self,
        tokens: &[usize],
        cache: Option<&mut KvCache<S>>,
        hook: Option<&'a dyn MlpHook<S>>,
        capture_taps: bool,
    ) -> Result<ForwardOutput<S>> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &bound, tokens, 1, cache.as_deref(), hook, capture_taps)?;
        if let Some(cache) = cache {
            for (li, (k, v)) in out.new_kv.iter().enumerate() {
                cache.keys[li].extend_from_slice(tape.value(*k).data());
                cache.values[li].extend_from_slice(tape.value(*v).data());
            }
            cache.len += tokens.len();
        }
        let taps = out.taps.map(|(l, m, h)| TapRows {
            high: tape.value(h).clone(),
            mid: tape.value(m).clone(),
            low: tape.value(l).clone(),
        });
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            taps,
        })
    }

    /// Next-token distribution after feeding `tokens` (softmax, or one-hot
    /// at the argmax for `temperature == 0`).
    pub fn next_token_distribution<'a>(
        &'a self,
        tokens: &[usize],
        cache: Option<&mut KvCache<S>>,
        hook: Option<&'a dyn MlpHook<S>>,
        temperature: f64,
    ) -> Result<Vec<S>> {
        let out = self.forward(tokens, cache, hook, false)?;
        let last = out.logits.rows() - 1;
        Ok(softmax(out.logits.row(last), temperature))
    }
}

/// Inverse-CDF categorical draw: the first index whose cumulative mass
/// exceeds `u ∈ [0, 1)`.
pub fn sample_with_uniform<S: Float>(dist: &[S], u: f64) -> Result<usize> {
    if dist.is_empty() {
        return Err(Error::Domain("empty distribution".into()));
    }
    if let Some(bad) = dist.iter().find(|p| !(p.as_f64() >= 0.0)) {
        return Err(Error::Domain(format!("negative or NaN probability {bad}")));
    }
    let total: f64 = dist.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Domain(format!("distribution sums to {total}")));
    }
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, p) in dist.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum && p > 0.0 {
            return Ok(i);
        }
    }
    Ok(last_positive)
}

/// Draws one token from `dist` using a single uniform from `rng`.
pub fn sample<S: Float, R: Rng + ?Sized>(dist: &[S], rng: &mut R) -> Result<usize> {
    sample_with_uniform(dist, rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 8, 2, 16, 7, 32).with_taps(0, 1, 1)
    }

    #[test]
    fn default_taps() {
        let c = ModelConfig::new(12, 8, 2, 16, 7, 32);
        assert_eq!(c.taps().unwrap(), TapLayers { low: 3, mid: 6, high: 10 });
        assert!(ModelConfig::new(4, 8, 2, 16, 7, 32).taps().is_err());
        // (3, 2, 3) collides.
        assert!(ModelConfig::new(5, 8, 2, 16, 7, 32).taps().is_err());
        assert!(tiny().with_taps(0, 1, 5).taps().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(2, 9, 2, 16, 7, 32).validate().is_err());
        assert!(ModelConfig::new(2, 8, 0, 16, 7, 32).validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn logits_shape_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = TransformerModel::<f32>::init(tiny(), Role::Verifier, &mut rng).unwrap();
        let out = m.forward(&[1, 2, 3], None, None, true).unwrap();
        assert_eq!(out.logits.shape(), &[3, 7]);
        assert_eq!(out.taps.unwrap().rows(), 3);
        assert!(matches!(m.forward(&[7], None, None, false), Err(Error::Domain(_))));
        assert!(matches!(m.forward(&[], None, None, false), Err(Error::Contract(_))));
        let mut cache = KvCache::new(&m.config);
        m.forward(&[0; 30], Some(&mut cache), None, false).unwrap();
        assert!(matches!(m.forward(&[0; 3], Some(&mut cache), None, false), Err(Error::Capacity(_))));
    }

    #[test]
    fn zero_unembedding_gives_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = TransformerModel::<f64>::init(tiny(), Role::Drafter, &mut rng).unwrap();
        m.unembedding = Tensor::zeros(&[7, 8]);
        let p = m.next_token_distribution(&[1, 2], None, None, 1.0).unwrap();
        for x in p {
            assert!((x - 1.0 / 7.0).abs() < 1e-12);
        }
        let p = m.next_token_distribution(&[1, 2], None, None, 0.0).unwrap();
        assert_eq!(p.iter().filter(|&&x| x == 1.0).count(), 1);
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_with_uniform(&[0.0, 1.0, 0.0], 0.999).unwrap(), 1);
        assert_eq!(sample_with_uniform(&[0.25, 0.75], 0.30).unwrap(), 1);
        assert_eq!(sample_with_uniform(&[0.25, 0.75], 0.2).unwrap(), 0);
        assert!(sample_with_uniform(&[-0.5, 1.5], 0.2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ones = (0..100_000).filter(|_| sample(&[0.25f64, 0.75], &mut rng).unwrap() == 1).count();
        assert!((ones as f64 / 100_000.0 - 0.75).abs() < 0.01);
    }

    #[test]
    fn params_roundtrip_through_from_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = TransformerModel::<f32>::init(tiny(), Role::Drafter, &mut rng).unwrap();
        let tensors = m.params().into_iter().map(|(_, t)| t.clone()).collect();
        let back = TransformerModel::from_params(m.config.clone(), Role::Drafter, tensors).unwrap();
        assert_eq!(back, m);
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let expect: Vec<String> = param_shapes(&m.config).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, expect);
    }
}
