//! Steering vectors: extraction from verifier taps and injection into the
//! drafter's MLP blocks.
//!
//! `g = LayerNorm(W_hml · [h, m, l])`, with a gain-only layer norm. Three
//! injection variants are supported:
//!
//! * `BiasInMlp`: `W_d((W_u a + W_s g) ⊙ silu(W_g a))`
//! * `BiasAfterMlp`: `W_d(W_u a ⊙ silu(W_g a)) + W_s g`
//! * `CondBiasInMlp`: as `BiasInMlp` with the bias
//!   `W2 · silu(W1 · [f, g] + b1)`, where `f` is the residual entering the layer.
//!
//! Every output path starts at zero so a fresh state leaves the drafter
//! unchanged bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::{mlp_on_tape, BiasSet, BoundLayer, HiddenTaps, LayerWeights, MlpHook, ModelConfig};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const STEER_NORM_EPS: f64 = 1e-5;
const COND_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    BiasInMlp,
    BiasAfterMlp,
    CondBiasInMlp,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [Self::BiasInMlp, Self::BiasAfterMlp, Self::CondBiasInMlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::BiasInMlp => "bias_in_mlp",
            Self::BiasAfterMlp => "bias_after_mlp",
            Self::CondBiasInMlp => "cond_bias_in_mlp",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown steering variant {s:?}")))
    }
}

/// Per-layer injector weights.
#[derive(Clone, Debug, PartialEq)]
pub enum SteeringVariant<S = f32> {
    /// `W_s^(l)`: `[d_mlp × d_steer]`
    BiasInMlp { w_s: Vec<Tensor<S>> },
    /// `W_s^(l)`: `[d_model × d_steer]`
    BiasAfterMlp { w_s: Vec<Tensor<S>> },
    /// `W1 [d_steer × (d_model + d_steer)]`, `b1 [d_steer]`, `W2 [d_mlp × d_steer]`
    CondBiasInMlp {
        w1: Vec<Tensor<S>>,
        b1: Vec<Tensor<S>>,
        w2: Vec<Tensor<S>>,
    },
}

impl<S: Float> SteeringVariant<S> {
    pub fn kind(&self) -> VariantKind {
        match self {
            Self::BiasInMlp { .. } => VariantKind::BiasInMlp,
            Self::BiasAfterMlp { .. } => VariantKind::BiasAfterMlp,
            Self::CondBiasInMlp { .. } => VariantKind::CondBiasInMlp,
        }
    }
}

/// Shapes of the steering parameters, given the verifier and drafter configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringDims {
    pub d_verifier: usize,
    pub d_steer: usize,
    pub d_drafter: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
}

impl SteeringDims {
    pub fn new(verifier: &ModelConfig, drafter: &ModelConfig) -> Self {
        Self {
            d_verifier: verifier.d_model,
            d_steer: drafter.d_model,
            d_drafter: drafter.d_model,
            d_mlp: drafter.d_mlp,
            n_layers: drafter.n_layers,
        }
    }

    pub fn param_shapes(&self, kind: VariantKind) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("steering.w_hml".to_string(), vec![self.d_steer, 3 * self.d_verifier]),
            ("steering.norm_gain".to_string(), vec![self.d_steer]),
        ];
        for l in 0..self.n_layers {
            match kind {
                VariantKind::BiasInMlp => out.push((format!("steering.layers.{l}.w_s"), vec![self.d_mlp, self.d_steer])),
                VariantKind::BiasAfterMlp => {
                    out.push((format!("steering.layers.{l}.w_s"), vec![self.d_drafter, self.d_steer]))
                }
                VariantKind::CondBiasInMlp => {
                    out.push((format!("steering.layers.{l}.w1"), vec![self.d_steer, self.d_drafter + self.d_steer]));
                    out.push((format!("steering.layers.{l}.b1"), vec![self.d_steer]));
                    out.push((format!("steering.layers.{l}.w2"), vec![self.d_mlp, self.d_steer]));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringState<S = f32> {
    pub dims: SteeringDims,
    /// `[d_steer × 3·d_verifier]`, columns ordered `[h, m, l]`.
    pub w_hml: Tensor<S>,
    pub norm_gain: Tensor<S>,
    pub variant: SteeringVariant<S>,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector<S = f32> {
    pub g: Vec<S>,
    /// 1-based position of the token whose draft block this vector conditions.
    pub origin_position: usize,
}

impl<S: Float> SteeringState<S> {
    /// Block-identity `W_hml` (so `W_hml·[h,m,l] = h+m+l` when widths match),
    /// unit norm gain and zero output paths.
    pub fn init<R: Rng + ?Sized>(kind: VariantKind, dims: SteeringDims, rng: &mut R) -> Self {
        let (dv, ds) = (dims.d_verifier, dims.d_steer);
        let mut w_hml = Tensor::zeros(&[ds, 3 * dv]);
        for i in 0..ds.min(dv) {
            for block in 0..3 {
                w_hml.data_mut()[i * 3 * dv + block * dv + i] = S::one();
            }
        }
        let zeros = |shape: &[usize]| (0..dims.n_layers).map(|_| Tensor::zeros(shape)).collect::<Vec<_>>();
        let variant = match kind {
            VariantKind::BiasInMlp => SteeringVariant::BiasInMlp { w_s: zeros(&[dims.d_mlp, ds]) },
            VariantKind::BiasAfterMlp => SteeringVariant::BiasAfterMlp { w_s: zeros(&[dims.d_drafter, ds]) },
            VariantKind::CondBiasInMlp => SteeringVariant::CondBiasInMlp {
                w1: (0..dims.n_layers)
                    .map(|_| Tensor::randn(&[ds, dims.d_drafter + ds], COND_INIT_STD, rng))
                    .collect(),
                b1: zeros(&[ds]),
                w2: zeros(&[dims.d_mlp, ds]),
            },
        };
        Self {
            dims,
            w_hml,
            norm_gain: Tensor::ones(&[ds]),
            variant,
            enabled: true,
        }
    }

    /// Rebuilds a state from tensors in [`SteeringDims::param_shapes`] order.
    pub fn from_params(kind: VariantKind, dims: SteeringDims, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let shapes = dims.param_shapes(kind);
        if tensors.len() != shapes.len() {
            return Err(contract_err!("expected {} steering tensors, got {}", shapes.len(), tensors.len()));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(dim_err!("{name}: expected {:?}, got {:?}", shape, t.shape()));
            }
        }
        let mut it = tensors.into_iter();
        let w_hml = it.next().expect("len checked");
        let norm_gain = it.next().expect("len checked");
        let rest: Vec<Tensor<S>> = it.collect();
        let variant = match kind {
            VariantKind::BiasInMlp => SteeringVariant::BiasInMlp { w_s: rest },
            VariantKind::BiasAfterMlp => SteeringVariant::BiasAfterMlp { w_s: rest },
            VariantKind::CondBiasInMlp => {
                let (mut w1, mut b1, mut w2) = (Vec::new(), Vec::new(), Vec::new());
                for (i, t) in rest.into_iter().enumerate() {
                    match i % 3 {
                        0 => w1.push(t),
                        1 => b1.push(t),
                        _ => w2.push(t),
                    }
                }
                SteeringVariant::CondBiasInMlp { w1, b1, w2 }
            }
        };
        Ok(Self {
            dims,
            w_hml,
            norm_gain,
            variant,
            enabled: true,
        })
    }

    pub fn kind(&self) -> VariantKind {
        self.variant.kind()
    }

    fn injector_tensors(&self) -> Vec<&Tensor<S>> {
        match &self.variant {
            SteeringVariant::BiasInMlp { w_s } | SteeringVariant::BiasAfterMlp { w_s } => w_s.iter().collect(),
            SteeringVariant::CondBiasInMlp { w1, b1, w2 } => {
                (0..w1.len()).flat_map(|l| [&w1[l], &b1[l], &w2[l]]).collect()
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let names = self.dims.param_shapes(self.kind());
        let tensors = [&self.w_hml, &self.norm_gain].into_iter().chain(self.injector_tensors());
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let names = self.dims.param_shapes(self.kind());
        let mut tensors: Vec<&mut Tensor<S>> = vec![&mut self.w_hml, &mut self.norm_gain];
        match &mut self.variant {
            SteeringVariant::BiasInMlp { w_s } | SteeringVariant::BiasAfterMlp { w_s } => tensors.extend(w_s.iter_mut()),
            SteeringVariant::CondBiasInMlp { w1, b1, w2 } => {
                for ((a, b), c) in w1.iter_mut().zip(b1.iter_mut()).zip(w2.iter_mut()) {
                    tensors.extend([a, b, c]);
                }
            }
        }
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn cast<T: Float>(&self) -> SteeringState<T> {
        let tensors = self.params().into_iter().map(|(_, t)| t.cast::<T>()).collect();
        let mut s = SteeringState::from_params(self.kind(), self.dims, tensors).expect("same shapes");
        s.enabled = self.enabled;
        s
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: bool) -> BoundSteering {
        let w_hml = tape.leaf_ref(&self.w_hml, trainable);
        let norm_gain = tape.leaf_ref(&self.norm_gain, trainable);
        let injectors = self.injector_tensors().into_iter().map(|t| tape.leaf_ref(t, trainable)).collect();
        BoundSteering {
            kind: self.kind(),
            w_hml,
            norm_gain,
            injectors,
        }
    }

    /// `g = LayerNorm(W_hml · [h, m, l])`.
    pub fn compute_steering(&self, taps: &HiddenTaps<S>, origin_position: usize) -> Result<SteeringVector<S>> {
        let dv = self.dims.d_verifier;
        if taps.h.len() != dv || taps.m.len() != dv || taps.l.len() != dv {
            return Err(dim_err!(
                "taps of width ({}, {}, {}) do not match verifier width {dv}",
                taps.h.len(),
                taps.m.len(),
                taps.l.len()
            ));
        }
        let mut hml = Vec::with_capacity(3 * dv);
        hml.extend_from_slice(&taps.h);
        hml.extend_from_slice(&taps.m);
        hml.extend_from_slice(&taps.l);
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 3 * dv], hml)?);
        let g = bound.steering_rows(&mut tape, x)?;
        let g = tape.value(g).data().to_vec();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("steering vector has non-finite entries".into()));
        }
        Ok(SteeringVector { g, origin_position })
    }

    /// `b^(l) = W_s^(l) · g`, computed once per speculation round.
    pub fn make_bias(&self, g: &SteeringVector<S>) -> Result<BiasSet<S>> {
        let (w_s, up) = match &self.variant {
            SteeringVariant::BiasInMlp { w_s } => (w_s, true),
            SteeringVariant::BiasAfterMlp { w_s } => (w_s, false),
            SteeringVariant::CondBiasInMlp { .. } => {
                return Err(contract_err!("cond_bias_in_mlp computes its bias per position"));
            }
        };
        self.check_g(g)?;
        let mut tape = Tape::no_grad();
        let gv = tape.constant(Tensor::new(vec![1, self.dims.d_steer], g.g.clone())?);
        let mut biases = Vec::with_capacity(w_s.len());
        for w in w_s {
            let wv = tape.leaf_ref(w, false);
            let b = tape.linear(gv, wv)?;
            biases.push(tape.value(b).clone().reshape(vec![w.rows()])?);
        }
        Ok(if up { BiasSet::UpProjection(biases) } else { BiasSet::MlpOutput(biases) })
    }

    fn check_g(&self, g: &SteeringVector<S>) -> Result<()> {
        if g.g.len() != self.dims.d_steer {
            return Err(dim_err!("steering vector has length {}, expected {}", g.g.len(), self.dims.d_steer));
        }
        Ok(())
    }

    /// Hook that steers a drafter forward with `g`, or `None` when disabled.
    pub fn hook(&self, g: &SteeringVector<S>) -> Result<Option<DraftHook<'_, S>>> {
        if !self.enabled {
            return Ok(None);
        }
        self.check_g(g)?;
        Ok(Some(match self.variant {
            SteeringVariant::CondBiasInMlp { .. } => DraftHook::Conditional { state: self, g: g.g.clone() },
            _ => DraftHook::Fixed(self.make_bias(g)?),
        }))
    }

    /// One steered MLP block on plain tensors. `a` is the normed MLP input and
    /// `f_prev` the residual entering the layer, both `[rows × d_model]`.
    pub fn apply_variant(
        &self,
        layer: usize,
        mlp: &LayerWeights<S>,
        a: &Tensor<S>,
        f_prev: &Tensor<S>,
        g: &SteeringVector<S>,
    ) -> Result<Tensor<S>> {
        if layer >= self.dims.n_layers {
            return Err(dim_err!("layer {layer} outside 0..{}", self.dims.n_layers));
        }
        self.check_g(g)?;
        let rows = a.rows();
        if f_prev.rows() != rows {
            return Err(dim_err!("a has {rows} rows but f_prev has {}", f_prev.rows()));
        }
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let bl = BoundLayer {
            attn_norm: tape.leaf_ref(&mlp.attn_norm, false),
            wq: tape.leaf_ref(&mlp.wq, false),
            wk: tape.leaf_ref(&mlp.wk, false),
            wv: tape.leaf_ref(&mlp.wv, false),
            wo: tape.leaf_ref(&mlp.wo, false),
            mlp_norm: tape.leaf_ref(&mlp.mlp_norm, false),
            w_up: tape.leaf_ref(&mlp.w_up, false),
            w_gate: tape.leaf_ref(&mlp.w_gate, false),
            w_down: tape.leaf_ref(&mlp.w_down, false),
        };
        let av = tape.leaf_ref(a, false);
        let fv = tape.leaf_ref(f_prev, false);
        let g_rows = tape.constant(Tensor::new(vec![rows, g.g.len()], g.g.repeat(rows))?);
        let hook = TrainingHook { steering: bound, g_rows };
        let up = hook.up_bias(&mut tape, layer, fv)?;
        let out = hook.out_bias(&mut tape, layer)?;
        let y = mlp_on_tape(&mut tape, &bl, av, up, out)?;
        Ok(tape.value(y).clone())
    }
}

/// Steering parameters registered on a tape, in [`SteeringState::params`] order.
#[derive(Clone, Debug)]
pub struct BoundSteering {
    pub kind: VariantKind,
    pub w_hml: Var,
    pub norm_gain: Var,
    pub injectors: Vec<Var>,
}

impl BoundSteering {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_hml, self.norm_gain];
        v.extend(&self.injectors);
        v
    }

    /// Steering rows for tap rows `hml: [rows × 3·d_verifier]`.
    pub fn steering_rows<S: Float>(&self, tape: &mut Tape<'_, S>, hml: Var) -> Result<Var> {
        let proj = tape.linear(hml, self.w_hml)?;
        tape.layer_norm(proj, self.norm_gain, None, STEER_NORM_EPS)
    }
}

/// Hook used when every row has its own steering vector (training).
#[derive(Clone, Debug)]
pub struct TrainingHook {
    pub steering: BoundSteering,
    /// `[rows × d_steer]`
    pub g_rows: Var,
}

impl<S: Float> MlpHook<S> for TrainingHook {
    fn up_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize, residual: Var) -> Result<Option<Var>> {
        let inj = &self.steering.injectors;
        match self.steering.kind {
            VariantKind::BiasInMlp => Ok(Some(tape.linear(self.g_rows, inj[layer])?)),
            VariantKind::BiasAfterMlp => Ok(None),
            VariantKind::CondBiasInMlp => {
                let (w1, b1, w2) = (inj[3 * layer], inj[3 * layer + 1], inj[3 * layer + 2]);
                let x = tape.concat_cols(&[residual, self.g_rows])?;
                let h = tape.linear(x, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.silu(h);
                Ok(Some(tape.linear(h, w2)?))
            }
        }
    }

    fn out_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize) -> Result<Option<Var>> {
        match self.steering.kind {
            VariantKind::BiasAfterMlp => Ok(Some(tape.linear(self.g_rows, self.steering.injectors[layer])?)),
            _ => Ok(None),
        }
    }
}

/// Hook applied while drafting one block.
#[derive(Clone, Debug)]
pub enum DraftHook<'s, S = f32> {
    Fixed(BiasSet<S>),
    Conditional { state: &'s SteeringState<S>, g: Vec<S> },
}

impl<S: Float> MlpHook<S> for DraftHook<'_, S> {
    fn up_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize, residual: Var) -> Result<Option<Var>> {
        match self {
            DraftHook::Fixed(b) => b.up_bias(tape, layer, residual),
            DraftHook::Conditional { state, g } => {
                let SteeringVariant::CondBiasInMlp { w1, b1, w2 } = &state.variant else {
                    unreachable!("conditional hook built from a conditional state")
                };
                let rows = tape.value(residual).rows();
                let g_rows = tape.constant(Tensor::new(vec![rows, g.len()], g.repeat(rows))?);
                let x = tape.concat_cols(&[residual, g_rows])?;
                let w1 = tape.leaf_ref(&w1[layer], false);
                let b1 = tape.leaf_ref(&b1[layer], false);
                let w2 = tape.leaf_ref(&w2[layer], false);
                let h = tape.linear(x, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.silu(h);
                Ok(Some(tape.linear(h, w2)?))
            }
        }
    }

    fn out_bias<'a>(&'a self, tape: &mut Tape<'a, S>, layer: usize) -> Result<Option<Var>> {
        match self {
            DraftHook::Fixed(b) => b.out_bias(tape, layer),
            DraftHook::Conditional { .. } => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> SteeringDims {
        SteeringDims { d_verifier: 4, d_steer: 4, d_drafter: 4, d_mlp: 6, n_layers: 2 }
    }

    #[test]
    fn identity_init_sums_taps() {
        let s = SteeringState::<f64>::init(VariantKind::BiasInMlp, dims(), &mut ChaCha8Rng::seed_from_u64(0));
        let hml: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = Tensor::new(vec![1, 12], hml.clone()).unwrap();
        let proj = x.matmul(&s.w_hml.transpose()).unwrap();
        for i in 0..4 {
            assert!((proj.data()[i] - (hml[i] + hml[4 + i] + hml[8 + i])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_taps_give_zero_vector() {
        let s = SteeringState::<f32>::init(VariantKind::BiasInMlp, dims(), &mut ChaCha8Rng::seed_from_u64(0));
        let v = vec![0.1f32; 4];
        let g = s.compute_steering(&HiddenTaps { h: v.clone(), m: v.clone(), l: v }, 3).unwrap();
        assert_eq!(g.g, vec![0.0; 4]);
        assert_eq!(g.origin_position, 3);
    }

    #[test]
    fn zero_projection_gives_zero_vector() {
        let mut s = SteeringState::<f32>::init(VariantKind::BiasInMlp, dims(), &mut ChaCha8Rng::seed_from_u64(0));
        s.w_hml = Tensor::zeros(&[4, 12]);
        let taps = HiddenTaps { h: vec![1.0, 2.0, 3.0, 4.0], m: vec![0.5; 4], l: vec![-1.0; 4] };
        assert_eq!(s.compute_steering(&taps, 1).unwrap().g, vec![0.0; 4]);
        let bad = HiddenTaps { h: vec![1.0; 3], m: vec![0.5; 4], l: vec![-1.0; 4] };
        assert!(matches!(s.compute_steering(&bad, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn make_bias_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = SteeringVector { g: vec![0.3f32, -1.0, 2.0, 0.5], origin_position: 1 };
        let s = SteeringState::<f32>::init(VariantKind::BiasInMlp, dims(), &mut rng);
        let b = s.make_bias(&g).unwrap();
        assert!(matches!(b, BiasSet::UpProjection(_)));
        assert!(b.layers().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        let c = SteeringState::<f32>::init(VariantKind::CondBiasInMlp, dims(), &mut rng);
        assert!(matches!(c.make_bias(&g), Err(Error::Contract(_))));
    }

    #[test]
    fn params_roundtrip() {
        for kind in VariantKind::ALL {
            let s = SteeringState::<f32>::init(kind, dims(), &mut ChaCha8Rng::seed_from_u64(2));
            let tensors = s.params().into_iter().map(|(_, t)| t.clone()).collect();
            assert_eq!(SteeringState::from_params(kind, dims(), tensors).unwrap(), s);
            assert_eq!(kind.name().parse::<VariantKind>().unwrap(), kind);
        }
    }
}
