//! Speculative decoding: steered drafting, parallel verification with
//! rejection sampling, residual resampling, bonus tokens and the steering
//! handoff between blocks.
//!
//! Cache protocol. Between blocks both models have processed every emitted
//! token except the last one (the *pending* token). The drafter may also
//! hold one extra pending token when the previous block accepted all drafts.
//! Verification feeds `[pending, x̂1..x̂k]` and reads `k + 1` distributions;
//! row `n` (the number of accepted drafts) produced the final token, and its
//! taps seed the steering vector for the next block.
//!
//! Random draws per block, in order: one uniform per drafted token, one per
//! examined draft in the verifier walk, one for the final token. None are
//! drawn at `T = 0`.

use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::model::{sample_with_uniform, KvCache, MlpHook, TransformerModel};
use crate::steering::{SteeringState, SteeringVector};
use crate::tensor::{argmax, softmax, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Pretrained,
    Distilled,
    Sd2,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [Self::Pretrained, Self::Distilled, Self::Sd2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrained => "pretrained",
            Self::Distilled => "distilled",
            Self::Sd2 => "sd2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub steering_enabled: bool,
    pub mode: DecodeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token: Option<usize>,
}

fn default_k() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl EngineConfig {
    pub fn new(mode: DecodeMode, temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            k: default_k(),
            temperature,
            max_new_tokens,
            seed,
            steering_enabled: true,
            mode,
            eos_token: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    fn steered(&self) -> bool {
        self.mode == DecodeMode::Sd2 && self.steering_enabled
    }
}

/// Source of uniform draws in `[0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<R: RngCore> UniformSource for R {
    fn next_uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(self)
    }
}

/// Replays a fixed list of draws; panics when exhausted.
#[derive(Clone, Debug, Default)]
pub struct ScriptedUniforms {
    draws: Vec<f64>,
    next: usize,
}

impl ScriptedUniforms {
    pub fn new(draws: Vec<f64>) -> Self {
        Self { draws, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl UniformSource for ScriptedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let u = *self.draws.get(self.next).expect("scripted uniforms exhausted");
        self.next += 1;
        u
    }
}

/// Tokens proposed by the drafter for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftBlock<S = f32> {
    pub tokens: Vec<usize>,
    pub drafter_dists: Vec<Vec<S>>,
    /// Origin position of the steering vector used, if any.
    pub steering_used: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSource {
    RejectionResample,
    Bonus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult<S = f32> {
    pub accepted_count: usize,
    /// Accepted drafts followed by the final token.
    pub emitted_tokens: Vec<usize>,
    pub final_token_source: FinalSource,
    pub next_steering: Option<SteeringVector<S>>,
}

/// `min(1, pV / pD)`.
pub fn accept_probability(p_v: f64, p_d: f64) -> Result<f64> {
    if !(p_d > 0.0) {
        return Err(contract_err!("drafted token has drafter probability {p_d}"));
    }
    Ok((p_v / p_d).min(1.0))
}

/// `normalize(max(0, pV - pD))`, or `pV` when the two coincide.
pub fn residual_distribution<S: Float>(p_v: &[S], p_d: &[S]) -> Vec<S> {
    if p_v == p_d {
        return p_v.to_vec();
    }
    let diff: Vec<f64> = p_v
        .iter()
        .zip(p_d)
        .map(|(v, d)| (v.as_f64() - d.as_f64()).max(0.0))
        .collect();
    let total: f64 = diff.iter().sum();
    if !(total > 0.0) {
        return p_v.to_vec();
    }
    diff.into_iter().map(|x| S::of(x / total)).collect()
}

fn pick<S: Float>(dist: &[S], temperature: f64, rng: &mut dyn UniformSource) -> Result<usize> {
    if temperature == 0.0 {
        Ok(argmax(dist))
    } else {
        sample_with_uniform(dist, rng.next_uniform())
    }
}

/// Drafts `k` tokens. The cache must hold the context before `pending`;
/// afterwards it additionally holds `pending` and the first `k - 1` drafts.
pub fn draft<S: Float>(
    drafter: &TransformerModel<S>,
    cache: &mut KvCache<S>,
    pending: &[usize],
    hook: Option<&dyn MlpHook<S>>,
    k: usize,
    temperature: f64,
    rng: &mut dyn UniformSource,
) -> Result<DraftBlock<S>> {
    if k == 0 || pending.is_empty() {
        return Err(contract_err!("draft needs k >= 1 and a pending token"));
    }
    if cache.len() + pending.len() + k - 1 > drafter.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "drafting {k} tokens from position {} exceeds max_seq_len {}",
            cache.len() + pending.len(),
            drafter.config.max_seq_len
        )));
    }
    let mut tokens = Vec::with_capacity(k);
    let mut dists = Vec::with_capacity(k);
    let mut input = pending.to_vec();
    for _ in 0..k {
        let logits = drafter.forward(&input, Some(cache), hook, false)?.logits;
        let dist = softmax(logits.row(logits.rows() - 1), temperature);
        let tok = pick(&dist, temperature, rng)?;
        tokens.push(tok);
        dists.push(dist);
        input = vec![tok];
    }
    // The last draft is never fed: verification decides what follows it.
    Ok(DraftBlock {
        tokens,
        drafter_dists: dists,
        steering_used: None,
    })
}

/// Verifies a block. `cache` must hold the first `prefix_len - 1` tokens and
/// `pending` is token `prefix_len`. On return the cache holds the pending
/// token and the accepted drafts.
#[allow(clippy::too_many_arguments)]
pub fn verify<S: Float>(
    verifier: &TransformerModel<S>,
    cache: &mut KvCache<S>,
    pending: usize,
    prefix_len: usize,
    block: &DraftBlock<S>,
    steering: Option<&SteeringState<S>>,
    temperature: f64,
    rng: &mut dyn UniformSource,
) -> Result<VerificationResult<S>> {
    if cache.len() + 1 != prefix_len {
        return Err(contract_err!(
            "verifier cache holds {} tokens but the prefix has {prefix_len}",
            cache.len()
        ));
    }
    let k = block.tokens.len();
    if k == 0 || block.drafter_dists.len() != k {
        return Err(contract_err!("malformed draft block"));
    }
    let start = cache.len();
    let mut input = Vec::with_capacity(k + 1);
    input.push(pending);
    input.extend_from_slice(&block.tokens);
    let steer = steering.filter(|s| s.enabled);
    let out = verifier.forward(&input, Some(cache), None, steer.is_some())?;

    let p_v: Vec<Vec<S>> = (0..=k).map(|i| softmax(out.logits.row(i), temperature)).collect();
    let (accepted, final_token, source) = verify_walk(&p_v, block, temperature, rng)?;
    cache.truncate(start + 1 + accepted);

    let next_steering = match (steer, &out.taps) {
        (Some(s), Some(taps)) => Some(s.compute_steering(&taps.at(accepted), prefix_len + accepted + 1)?),
        _ => None,
    };
    let mut emitted = block.tokens[..accepted].to_vec();
    emitted.push(final_token);
    Ok(VerificationResult {
        accepted_count: accepted,
        emitted_tokens: emitted,
        final_token_source: source,
        next_steering,
    })
}

/// The accept/reject walk over verifier distributions `p_v` (one per draft
/// plus the bonus row). Returns `(accepted, final_token, source)`.
pub fn verify_walk<S: Float>(
    p_v: &[Vec<S>],
    block: &DraftBlock<S>,
    temperature: f64,
    rng: &mut dyn UniformSource,
) -> Result<(usize, usize, FinalSource)> {
    let k = block.tokens.len();
    if p_v.len() != k + 1 {
        return Err(contract_err!("{} verifier rows for {k} drafts", p_v.len()));
    }
    for i in 0..k {
        let x = block.tokens[i];
        let ok = if temperature == 0.0 {
            argmax(&p_v[i]) == x
        } else {
            let a = accept_probability(p_v[i][x].as_f64(), block.drafter_dists[i][x].as_f64())?;
            rng.next_uniform() < a
        };
        if !ok {
            let resid = residual_distribution(&p_v[i], &block.drafter_dists[i]);
            return Ok((i, pick(&resid, temperature, rng)?, FinalSource::RejectionResample));
        }
    }
    Ok((k, pick(&p_v[k], temperature, rng)?, FinalSource::Bonus))
}

/// One speculation round as recorded in traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_index: usize,
    /// 1-based output position of the last token emitted by the block.
    pub position: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub emitted: usize,
    pub final_source: FinalSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Newly generated tokens (the prompt is not repeated).
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockRecord>,
    /// Set when the token budget had to be cut to fit `max_seq_len`.
    pub truncated: bool,
    pub elapsed: Duration,
}

impl GenerationOutput {
    pub fn accepted_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.accepted).collect()
    }
}

/// Speculative generation seeded from `engine.seed`.
pub fn generate<S: Float>(
    engine: &EngineConfig,
    verifier: &TransformerModel<S>,
    drafter: &TransformerModel<S>,
    steering: Option<&SteeringState<S>>,
    prompt: &[usize],
) -> Result<GenerationOutput> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(engine.seed);
    generate_with(engine, verifier, drafter, steering, prompt, &mut rng)
}

pub fn generate_with<S: Float>(
    engine: &EngineConfig,
    verifier: &TransformerModel<S>,
    drafter: &TransformerModel<S>,
    steering: Option<&SteeringState<S>>,
    prompt: &[usize],
    rng: &mut dyn UniformSource,
) -> Result<GenerationOutput> {
    engine.validate()?;
    let started = Instant::now();
    if prompt.is_empty() {
        return Err(contract_err!("prompt must contain at least one token"));
    }
    if verifier.config.vocab_size != drafter.config.vocab_size {
        return Err(contract_err!("verifier and drafter vocabularies differ"));
    }
    let steering = if engine.steered() {
        Some(steering.ok_or_else(|| contract_err!("sd2 mode needs a steering state"))?)
    } else {
        None
    };
    let max_len = verifier.config.max_seq_len.min(drafter.config.max_seq_len);
    let mut budget = engine.max_new_tokens;
    let mut truncated = false;
    if prompt.len() + budget > max_len {
        budget = max_len.saturating_sub(prompt.len());
        truncated = true;
    }

    let t = prompt.len();
    let mut v_cache = KvCache::new(&verifier.config);
    let mut d_cache = KvCache::new(&drafter.config);
    let mut g = None;
    if t >= 2 {
        let out = verifier.forward(&prompt[..t - 1], Some(&mut v_cache), None, steering.is_some())?;
        if let (Some(s), Some(taps)) = (steering, out.taps) {
            g = Some(s.compute_steering(&taps.at(t - 2), t)?);
        }
        drafter.forward(&prompt[..t - 1], Some(&mut d_cache), None, false)?;
    }
    if let (Some(s), None) = (steering, &g) {
        g = Some(SteeringVector { g: vec![S::zero(); s.dims.d_steer], origin_position: t });
    }

    let mut tokens: Vec<usize> = Vec::with_capacity(budget);
    let mut blocks = Vec::new();
    let mut pending_v = prompt[t - 1];
    let mut pending_d = vec![prompt[t - 1]];
    let mut prefix_len = t;
    while tokens.len() < budget {
        let k = engine.k.min(max_len - prefix_len);
        if k == 0 {
            truncated = true;
            break;
        }
        let d_base = d_cache.len();
        let hook = match (steering, &g) {
            (Some(s), Some(g)) => s.hook(g)?,
            _ => None,
        };
        let mut block = draft(
            drafter,
            &mut d_cache,
            &pending_d,
            hook.as_ref().map(|h| h as &dyn MlpHook<S>),
            k,
            engine.temperature,
            rng,
        )?;
        block.steering_used = g.as_ref().map(|g| g.origin_position);
        let res = verify(verifier, &mut v_cache, pending_v, prefix_len, &block, steering, engine.temperature, rng)?;
        let n = res.accepted_count;
        d_cache.truncate(d_base + pending_d.len() + n.min(k - 1));
        pending_d = if n == k { vec![block.tokens[k - 1]] } else { Vec::new() };
        let final_token = *res.emitted_tokens.last().expect("at least one emitted token");
        pending_d.push(final_token);
        pending_v = final_token;
        prefix_len += n + 1;
        if res.next_steering.is_some() {
            g = res.next_steering;
        }

        let room = budget - tokens.len();
        let mut emitted = res.emitted_tokens;
        emitted.truncate(room);
        let mut hit_eos = false;
        if let Some(eos) = engine.eos_token {
            if let Some(at) = emitted.iter().position(|&x| x == eos) {
                emitted.truncate(at + 1);
                hit_eos = true;
            }
        }
        tokens.extend_from_slice(&emitted);
        blocks.push(BlockRecord {
            block_index: blocks.len(),
            position: tokens.len(),
            drafted: k,
            accepted: n,
            emitted: emitted.len(),
            final_source: res.final_token_source,
        });
        if hit_eos {
            break;
        }
    }
    Ok(GenerationOutput {
        tokens,
        blocks,
        truncated,
        elapsed: started.elapsed(),
    })
}

/// Verifier-only autoregressive decoding, the reference for losslessness.
pub fn autoregressive<S: Float>(
    verifier: &TransformerModel<S>,
    prompt: &[usize],
    max_new_tokens: usize,
    temperature: f64,
    eos_token: Option<usize>,
    rng: &mut dyn UniformSource,
) -> Result<Vec<usize>> {
    let mut cache = KvCache::new(&verifier.config);
    let mut out = Vec::with_capacity(max_new_tokens);
    let mut input = prompt.to_vec();
    let budget = max_new_tokens.min(verifier.config.max_seq_len.saturating_sub(prompt.len()));
    while out.len() < budget {
        let dist = verifier.next_token_distribution(&input, Some(&mut cache), None, temperature)?;
        let tok = pick(&dist, temperature, rng)?;
        out.push(tok);
        if Some(tok) == eos_token {
            break;
        }
        input = vec![tok];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accept_probability_examples() {
        assert_eq!(accept_probability(0.5, 0.5).unwrap(), 1.0);
        assert!((accept_probability(0.2, 0.8).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(accept_probability(0.9, 0.3).unwrap(), 1.0);
        assert!(matches!(accept_probability(0.3, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual_distribution(&[0.6f64, 0.4], &[0.2, 0.8]), vec![1.0, 0.0]);
        let r = residual_distribution(&[0.5f64, 0.4, 0.1], &[0.1, 0.3, 0.6]);
        for (a, b) in r.iter().zip([0.8, 0.2, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = [0.3f32, 0.7];
        assert_eq!(residual_distribution(&p, &p), p.to_vec());
    }

    #[test]
    fn engine_validation() {
        let mut e = EngineConfig::new(DecodeMode::Pretrained, 0.0, 4, 0);
        assert!(e.validate().is_ok());
        e.k = 0;
        assert!(e.validate().is_err());
        e.k = 8;
        e.temperature = -1.0;
        assert!(e.validate().is_err());
    }

    #[test]
    fn scripted_uniforms_replay_in_order() {
        let mut s = ScriptedUniforms::new(vec![0.1, 0.9]);
        assert_eq!(s.next_uniform(), 0.1);
        assert_eq!(s.next_uniform(), 0.9);
        assert_eq!(s.consumed(), 2);
    }
}
