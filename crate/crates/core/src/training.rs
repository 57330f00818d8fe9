//! Synthetic data, distillation and steered alignment of the drafter.
//!
//! Offsets use 0-based rows: drafter row `r` predicts token `r + 1` and is
//! trained against the verifier distribution of the same row. The steering
//! vector "at" token `j` is built from the verifier taps of row `j - 1`
//! (the state that predicted token `j`), so an offset `δ` pairs drafter row
//! `r` with tap row `r - δ`. Rows without a valid source see a zero steering
//! row and still count in the loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::model::{Role, TransformerModel};
use crate::specdec::autoregressive;
use crate::steering::{SteeringState, TrainingHook};
use crate::tensor::{softmax, Float, Tape, Tensor, Var};

/// Floor applied to `pD` by [`kl_loss`].
pub const KL_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    PerSequenceRandom,
    Blocked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr_peak: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_offset_mode")]
    pub offset_mode: OffsetMode,
    #[serde(default)]
    pub freeze_drafter: bool,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 disables periodic calls.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Upper bound on optimizer steps per epoch; 0 means the whole corpus.
    #[serde(default)]
    pub max_steps_per_epoch: usize,
}

fn default_warmup() -> usize {
    1000
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_clip() -> f64 {
    0.5
}

fn default_k() -> usize {
    8
}

fn default_offset_mode() -> OffsetMode {
    OffsetMode::PerSequenceRandom
}

impl TrainingConfig {
    pub fn new(lr_peak: f64, epochs: usize, batch_size: usize, seq_len: usize) -> Self {
        Self {
            lr_peak,
            warmup_steps: default_warmup(),
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            weight_decay: default_weight_decay(),
            grad_clip_norm: default_clip(),
            epochs,
            batch_size,
            seq_len,
            k: default_k(),
            offset_mode: default_offset_mode(),
            freeze_drafter: false,
            seed: 0,
            checkpoint_every: 0,
            max_steps_per_epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return Err(Error::Config("lr_peak must be positive".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.k == 0 {
            return Err(Error::Config("batch_size, k must be positive and seq_len >= 2".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup from `lr_peak / 10` to `lr_peak`, then cosine decay back
    /// to `lr_peak / 10` at `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let floor = self.lr_peak / 10.0;
        if step < self.warmup_steps {
            return floor + (self.lr_peak - floor) * step as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr_peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + (self.lr_peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `Σ pV (ln pV - ln max(pD, 1e-9))`, with `0 · ln 0 = 0`.
pub fn kl_loss<S: Float>(p_v: &[S], p_d: &[S]) -> f64 {
    p_v.iter()
        .zip(p_d)
        .filter(|(v, _)| v.as_f64() > 0.0)
        .map(|(v, d)| {
            let v = v.as_f64();
            v * (v.ln() - d.as_f64().max(KL_FLOOR).ln())
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub sequences: Vec<Vec<usize>>,
    pub temperature: f64,
    pub seed: u64,
}

/// Samples `n_sequences` continuations from the verifier, cycling through
/// `prompts`; each sequence is its prompt followed by samples up to `max_len`
/// tokens in total. Sequence `i` uses its own stream derived from `seed`.
pub fn generate_synthetic<S: Float>(
    verifier: &TransformerModel<S>,
    prompts: &[Vec<usize>],
    temperature: f64,
    max_len: usize,
    n_sequences: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err(contract_err!("synthetic generation needs non-empty prompts"));
    }
    let mut sequences = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let prompt = &prompts[i % prompts.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let budget = max_len.saturating_sub(prompt.len());
        let mut seq = prompt.clone();
        seq.truncate(max_len);
        if budget > 0 {
            seq.extend(autoregressive(verifier, prompt, budget, temperature, None, &mut rng)?);
        }
        sequences.push(seq);
    }
    Ok(SyntheticCorpus { sequences, temperature, seed })
}

/// Draws one offset per sequence, uniform over `[1, k]`.
pub fn sample_offsets<R: Rng + ?Sized>(batch: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=k)).collect()
}

/// Tap row used by each drafter row of a length-`n` sequence, or `None`.
pub fn steering_sources(mode: OffsetMode, n: usize, delta: usize, k: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|r| match mode {
            OffsetMode::PerSequenceRandom => r.checked_sub(delta),
            OffsetMode::Blocked => {
                let phase = (delta - 1) % k;
                if r < phase.max(1) {
                    return None;
                }
                // Largest j <= r with j ≡ δ-1 (mod k) and j >= 1.
                let mut j = r - (r + k - phase) % k;
                if j == 0 {
                    j = k;
                    if j > r {
                        return None;
                    }
                }
                Some(j - 1)
            }
        })
        .collect()
}

/// Loss and gradients of one alignment step.
#[derive(Clone, Debug)]
pub struct StepResult<S = f32> {
    pub loss: f64,
    /// One entry per drafter parameter; `None` when the drafter is frozen.
    pub drafter_grads: Option<Vec<Tensor<S>>>,
    /// One entry per steering parameter (empty for distillation).
    pub steering_grads: Vec<Tensor<S>>,
}

fn grads_or_zero<S: Float>(tape: &Tape<'_, S>, vars: &[Var]) -> Vec<Tensor<S>> {
    vars.iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect()
}

fn check_batch<S: Float>(batch: &[Vec<usize>], model: &TransformerModel<S>) -> Result<usize> {
    let n = batch.first().map_or(0, Vec::len);
    if n == 0 || batch.iter().any(|s| s.len() != n) {
        return Err(contract_err!("batch sequences must be non-empty and of equal length"));
    }
    if n > model.config.max_seq_len {
        return Err(Error::Capacity(format!("sequence length {n} > max_seq_len {}", model.config.max_seq_len)));
    }
    Ok(n)
}

struct Teacher<S> {
    targets: Tensor<S>,
    /// `[rows × 3·d_verifier]` in `[h, m, l]` order.
    hml: Option<Tensor<S>>,
}

fn teacher<S: Float>(verifier: &TransformerModel<S>, flat: &[usize], batch: usize, taps: bool) -> Result<Teacher<S>> {
    if verifier.role != Role::Verifier || verifier.is_trainable() {
        return Err(contract_err!("the verifier must be frozen during alignment"));
    }
    let mut tape = Tape::no_grad();
    let bound = verifier.bind(&mut tape, false);
    let out = verifier.forward_on_tape(&mut tape, &bound, flat, batch, None, None, taps)?;
    let logits = tape.value(out.logits);
    let v = logits.last_dim();
    let mut t = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        t.extend(softmax(logits.row(r), 1.0));
    }
    let targets = Tensor::new(vec![logits.rows(), v], t)?;
    let hml = match out.taps {
        Some((l, m, h)) => {
            let cat = tape.concat_cols(&[h, m, l])?;
            Some(tape.value(cat).clone())
        }
        None => None,
    };
    Ok(Teacher { targets, hml })
}

/// KL(verifier ‖ steered drafter), averaged over every row of the batch.
/// `deltas` holds one offset per sequence.
pub fn sd2_loss_and_grads<S: Float>(
    drafter: &TransformerModel<S>,
    steering: &SteeringState<S>,
    verifier: &TransformerModel<S>,
    batch: &[Vec<usize>],
    deltas: &[usize],
    config: &TrainingConfig,
) -> Result<StepResult<S>> {
    let n = check_batch(batch, drafter)?;
    if deltas.len() != batch.len() || deltas.iter().any(|&d| d == 0 || d > config.k) {
        return Err(contract_err!("need one offset in [1, {}] per sequence", config.k));
    }
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();
    let teach = teacher(verifier, &flat, batch.len(), true)?;
    let hml = teach.hml.expect("taps requested");

    let mut index = Vec::with_capacity(flat.len());
    for (b, &delta) in deltas.iter().enumerate() {
        for src in steering_sources(config.offset_mode, n, delta, config.k) {
            index.push(src.map(|r| b * n + r));
        }
    }

    let mut tape = Tape::new();
    let bd = drafter.bind(&mut tape, !config.freeze_drafter);
    let bs = steering.bind(&mut tape, true);
    let x = tape.constant(hml);
    let g_all = bs.steering_rows(&mut tape, x)?;
    let g_rows = tape.gather_rows(g_all, &index)?;
    let hook = TrainingHook { steering: bs.clone(), g_rows };
    let out = drafter.forward_on_tape(&mut tape, &bd, &flat, batch.len(), None, Some(&hook), false)?;
    let weights = vec![S::one(); flat.len()];
    let loss = tape.kl_div(out.logits, &teach.targets, &weights)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        drafter_grads: (!config.freeze_drafter).then(|| grads_or_zero(&tape, &bd.vars())),
        steering_grads: grads_or_zero(&tape, &bs.vars()),
    })
}

/// Steered alignment step with offsets drawn from `rng` per the config.
pub fn sd2_training_step<S: Float, R: Rng + ?Sized>(
    drafter: &TransformerModel<S>,
    steering: &SteeringState<S>,
    verifier: &TransformerModel<S>,
    batch: &[Vec<usize>],
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<StepResult<S>> {
    let deltas = sample_offsets(batch.len(), config.k, rng);
    sd2_loss_and_grads(drafter, steering, verifier, batch, &deltas, config)
}

/// KL(verifier ‖ drafter), averaged over every row of the batch.
pub fn distill_training_step<S: Float>(
    drafter: &TransformerModel<S>,
    verifier: &TransformerModel<S>,
    batch: &[Vec<usize>],
    config: &TrainingConfig,
) -> Result<StepResult<S>> {
    check_batch(batch, drafter)?;
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();
    let teach = teacher(verifier, &flat, batch.len(), false)?;
    let mut tape = Tape::new();
    let bd = drafter.bind(&mut tape, !config.freeze_drafter);
    let out = drafter.forward_on_tape(&mut tape, &bd, &flat, batch.len(), None, None, false)?;
    let weights = vec![S::one(); flat.len()];
    let loss = tape.kl_div(out.logits, &teach.targets, &weights)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        drafter_grads: (!config.freeze_drafter).then(|| grads_or_zero(&tape, &bd.vars())),
        steering_grads: Vec::new(),
    })
}

/// Next-token cross-entropy (KL against one-hot targets); the last row of
/// each sequence has no target and is masked.
pub fn pretrain_step<S: Float>(model: &TransformerModel<S>, batch: &[Vec<usize>]) -> Result<StepResult<S>> {
    let n = check_batch(batch, model)?;
    if n < 2 {
        return Err(contract_err!("pretraining needs sequences of at least two tokens"));
    }
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();
    let v = model.config.vocab_size;
    let mut targets = Tensor::zeros(&[flat.len(), v]);
    let mut weights = vec![S::one(); flat.len()];
    for (i, w) in weights.iter_mut().enumerate() {
        if i % n == n - 1 {
            *w = S::zero();
        } else {
            targets.data_mut()[i * v + flat[i + 1]] = S::one();
        }
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = model.forward_on_tape(&mut tape, &bound, &flat, batch.len(), None, None, false)?;
    let loss = tape.kl_div(out.logits, &targets, &weights)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        drafter_grads: Some(grads_or_zero(&tape, &bound.vars())),
        steering_grads: Vec::new(),
    })
}

/// Mean next-token cross-entropy without gradients.
pub fn eval_loss<S: Float>(model: &TransformerModel<S>, batch: &[Vec<usize>]) -> Result<f64> {
    let n = check_batch(batch, model)?;
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape, false);
    let out = model.forward_on_tape(&mut tape, &bound, &flat, batch.len(), None, None, false)?;
    let logits = tape.value(out.logits);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..flat.len() {
        if i % n == n - 1 {
            continue;
        }
        let p = softmax(logits.row(i), 1.0);
        total -= p[flat[i + 1]].as_f64().max(KL_FLOOR).ln();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// AdamW with decoupled weight decay, global-norm clipping and the warmup +
/// cosine schedule of [`TrainingConfig::lr_at`].
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(config: &TrainingConfig) -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            clip_norm: config.grad_clip_norm,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `decay[i]` selects decoupled weight decay for
    /// parameter `i`; `names` only feed diagnostics.
    pub fn step<S: Float>(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Tensor<S>],
        decay: &[bool],
        names: &[String],
        lr: f64,
    ) -> Result<StepStats> {
        if params.len() != grads.len() || decay.len() != params.len() {
            return Err(contract_err!("{} params, {} grads, {} decay flags", params.len(), grads.len(), decay.len()));
        }
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(contract_err!("gradient shape mismatch for parameter {i}"));
            }
            for &x in g.data() {
                let x = x.as_f64();
                if !x.is_finite() {
                    let name = names.get(i).map_or("?", String::as_str);
                    return Err(Error::Numerical(format!(
                        "non-finite gradient {x} in {name} at optimizer step {}",
                        self.t
                    )));
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g.as_f64() * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let x = w.as_f64();
                *w = S::of(x - lr * (mhat / (vhat.sqrt() + self.eps) + wd * x));
            }
        }
        Ok(StepStats { lr, grad_norm: norm })
    }
}

/// Norm gains and steering parameters are excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm") || name.starts_with("steering."))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Next-token training on the corpus, no teacher.
    Pretrain,
    Distill,
    Sd2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TransformerModel,
    pub steering: Option<SteeringState>,
    pub curve: Vec<LossRecord>,
}

/// Periodic callback: `(step, model, steering)`.
pub type CheckpointFn<'c> = dyn FnMut(usize, &TransformerModel, Option<&SteeringState>) -> Result<()> + 'c;

/// Cuts every sequence into non-overlapping windows of `len` tokens.
pub fn windows(corpus: &[Vec<usize>], len: usize) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .flat_map(|s| s.chunks_exact(len).map(<[usize]>::to_vec))
        .collect()
}

/// Full training loop: seeded shuffling of fixed-length windows, one
/// optimizer step per batch, loss curve, optional periodic callback.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mode: TrainMode,
    mut model: TransformerModel,
    mut steering: Option<SteeringState>,
    verifier: Option<&TransformerModel>,
    corpus: &[Vec<usize>],
    config: &TrainingConfig,
    mut on_checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(contract_err!("training corpus is empty"));
    }
    let windows = windows(corpus, config.seq_len);
    if windows.is_empty() {
        return Err(contract_err!("no sequence reaches seq_len {}", config.seq_len));
    }
    let teacher = match mode {
        TrainMode::Pretrain => None,
        _ => Some(verifier.ok_or_else(|| contract_err!("alignment needs a verifier"))?),
    };
    if mode == TrainMode::Sd2 && steering.is_none() {
        return Err(contract_err!("sd2 training needs a steering state"));
    }
    let bs = config.batch_size.min(windows.len());
    let mut per_epoch = windows.len() / bs;
    if config.max_steps_per_epoch > 0 {
        per_epoch = per_epoch.min(config.max_steps_per_epoch);
    }
    let total = per_epoch * config.epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config);
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(bs).take(per_epoch) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let result = match mode {
                TrainMode::Pretrain => pretrain_step(&model, &batch)?,
                TrainMode::Distill => distill_training_step(&model, teacher.expect("checked"), &batch, config)?,
                TrainMode::Sd2 => sd2_training_step(
                    &model,
                    steering.as_ref().expect("checked"),
                    teacher.expect("checked"),
                    &batch,
                    config,
                    &mut rng,
                )?,
            };
            let lr = config.lr_at(step, total);
            let mut grads = Vec::new();
            let mut names = Vec::new();
            let mut params: Vec<&mut Tensor> = Vec::new();
            if let Some(g) = result.drafter_grads {
                grads.extend(g);
                for (n, p) in model.params_mut() {
                    names.push(n);
                    params.push(p);
                }
            }
            if let Some(s) = steering.as_mut().filter(|_| mode == TrainMode::Sd2) {
                grads.extend(result.steering_grads);
                for (n, p) in s.params_mut() {
                    names.push(n);
                    params.push(p);
                }
            }
            let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
            let stats = opt.step(&mut params, &grads, &decay, &names, lr)?;
            curve.push(LossRecord { step, lr, loss: result.loss, grad_norm: stats.grad_norm });
            step += 1;
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    cb(step, &model, steering.as_ref())?;
                }
            }
        }
    }
    if let Some(cb) = on_checkpoint {
        cb(step, &model, steering.as_ref())?;
    }
    Ok(TrainOutcome { model, steering, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&[0.3f64, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl_loss(&[1.0f64, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl_loss(&[0.5f64, 0.5], &[0.25, 0.75]) - 0.1438).abs() < 1e-3);
        assert!((kl_loss(&[0.5f64, 0.5], &[0.25, 0.75]) - expect).abs() < 1e-12);
        // The floor keeps a zero drafter probability finite.
        assert!((kl_loss(&[1.0f64, 0.0], &[0.0, 1.0]) - -(1e-9f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn schedule_endpoints() {
        let mut c = TrainingConfig::new(1e-3, 1, 1, 2);
        c.warmup_steps = 100;
        assert!((c.lr_at(0, 1000) - 1e-4).abs() < 1e-15);
        assert!((c.lr_at(100, 1000) - 1e-3).abs() < 1e-15);
        assert!((c.lr_at(1000, 1000) - 1e-4).abs() < 1e-15);
        assert!((c.lr_at(550, 1000) - 0.55e-3).abs() < 1e-12);
        c.warmup_steps = 0;
        assert_eq!(c.lr_at(0, 10), 1e-3);
    }

    #[test]
    fn per_sequence_sources() {
        assert_eq!(
            steering_sources(OffsetMode::PerSequenceRandom, 5, 2, 8),
            vec![None, None, Some(0), Some(1), Some(2)]
        );
    }

    #[test]
    fn blocked_sources() {
        // k = 3, δ = 1: origins j ∈ {3, 6, ...}; rows j..j+2 read tap row j-1.
        let s = steering_sources(OffsetMode::Blocked, 9, 1, 3);
        assert_eq!(s, vec![None, None, None, Some(2), Some(2), Some(2), Some(5), Some(5), Some(5)]);
        // δ = 2: origins j ∈ {1, 4, 7}.
        let s = steering_sources(OffsetMode::Blocked, 8, 2, 3);
        assert_eq!(s, vec![None, Some(0), Some(0), Some(0), Some(3), Some(3), Some(3), Some(6)]);
        // Every sourced row sits 1..=k rows after its tap.
        for delta in 1..=4 {
            for (r, src) in steering_sources(OffsetMode::Blocked, 30, delta, 4).into_iter().enumerate() {
                if let Some(t) = src {
                    assert!((1..=4).contains(&(r - t)), "δ={delta} r={r} t={t}");
                    assert_eq!((t + 1) % 4, (delta - 1) % 4);
                }
            }
        }
    }

    #[test]
    fn adamw_single_scalar_step() {
        let mut c = TrainingConfig::new(0.1, 1, 1, 2);
        c.weight_decay = 0.01;
        let mut opt = AdamW::new(&c);
        let mut p = Tensor::<f64>::vector(&[2.0]);
        let g = Tensor::vector(&[0.3]);
        opt.step(&mut [&mut p], &[g], &[true], &["w".into()], 0.1).unwrap();
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let m = (1.0 - b1) * 0.3;
        let v = (1.0 - b2) * 0.09;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expect = 2.0 - 0.1 * (mhat / (vhat.sqrt() + eps) + 0.01 * 2.0);
        assert!((p.data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn clipping_scales_gradients() {
        let c = TrainingConfig::new(0.1, 1, 1, 2);
        let mut a = AdamW::new(&c);
        let mut b = AdamW::new(&c);
        let mut pa = Tensor::<f64>::vector(&[1.0, 1.0]);
        let mut pb = pa.clone();
        let stats = a
            .step(&mut [&mut pa], &[Tensor::vector(&[3.0, 4.0])], &[false], &["w".into()], 0.1)
            .unwrap();
        assert_eq!(stats.grad_norm, 5.0);
        b.step(&mut [&mut pb], &[Tensor::vector(&[0.3, 0.4])], &[false], &["w".into()], 0.1).unwrap();
        assert!(pa.max_abs_diff(&pb) < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let c = TrainingConfig::new(0.1, 1, 1, 2);
        let mut opt = AdamW::new(&c);
        let mut p = Tensor::<f32>::vector(&[1.0]);
        let err = opt.step(&mut [&mut p], &[Tensor::vector(&[f32::NAN])], &[true], &["layers.0.wq".into()], 0.1);
        assert!(matches!(err, Err(Error::Numerical(msg)) if msg.contains("layers.0.wq")));
    }

    #[test]
    fn decay_mask() {
        assert!(decays("layers.0.wq"));
        assert!(!decays("layers.0.attn_norm"));
        assert!(!decays("final_norm"));
        assert!(!decays("steering.layers.0.w_s"));
    }
}
