//! Empirical losslessness checks: greedy identity against plain decoding and
//! first-token total variation against the exact verifier distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TransformerModel;
use crate::specdec::{autoregressive, generate_with, DecodeMode, EngineConfig};
use crate::steering::SteeringState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub prompt: Vec<usize>,
    pub expected: Vec<usize>,
    pub got: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyReport {
    pub trials: usize,
    pub mismatches: usize,
    pub first_counterexample: Option<Counterexample>,
}

impl GreedyReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Speculative decoding at T=0 must reproduce greedy decoding exactly.
pub fn greedy_identity(
    verifier: &TransformerModel,
    drafter: &TransformerModel,
    steering: Option<&SteeringState>,
    mode: DecodeMode,
    prompts: &[Vec<usize>],
    max_new_tokens: usize,
    k: usize,
) -> Result<GreedyReport> {
    let mut engine = EngineConfig::new(mode, 0.0, max_new_tokens, 0);
    engine.k = k;
    let mut report = GreedyReport { trials: prompts.len(), mismatches: 0, first_counterexample: None };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for prompt in prompts {
        let budget = max_new_tokens.min(verifier.config.max_seq_len.saturating_sub(prompt.len()));
        let expected = autoregressive(verifier, prompt, budget, 0.0, None, &mut rng)?;
        let got = generate_with(&engine, verifier, drafter, steering, prompt, &mut rng)?.tokens;
        if got != expected {
            report.mismatches += 1;
            report.first_counterexample.get_or_insert(Counterexample { prompt: prompt.clone(), expected, got });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub rounds: usize,
    pub tv: f64,
    pub exact: Vec<f64>,
    pub empirical: Vec<f64>,
}

/// Total-variation distance between the first token emitted by `rounds`
/// independent speculative blocks and the verifier's next-token distribution.
#[allow(clippy::too_many_arguments)]
pub fn first_token_tv(
    verifier: &TransformerModel,
    drafter: &TransformerModel,
    steering: Option<&SteeringState>,
    mode: DecodeMode,
    prefix: &[usize],
    temperature: f64,
    k: usize,
    rounds: usize,
    seed: u64,
) -> Result<TvReport> {
    let exact: Vec<f64> = verifier
        .next_token_distribution(prefix, None, None, temperature)?
        .into_iter()
        .map(f64::from)
        .collect();
    let mut engine = EngineConfig::new(mode, temperature, 1, seed);
    engine.k = k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..rounds {
        let out = generate_with(&engine, verifier, drafter, steering, prefix, &mut rng)?;
        counts[out.tokens[0]] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / rounds.max(1) as f64).collect();
    let tv = 0.5 * exact.iter().zip(&empirical).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(TvReport { rounds, tv, exact, empirical })
}
