//! End-to-end toy pipeline: pretrain a verifier and a drafter on a synthetic
//! corpus, align copies of the drafter, then compare block efficiency.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, CorpusSpec, Split};
use super::experiment::{run_experiment, Drafter, ExperimentMatrix, ModelSet, RunReport};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Role, TransformerModel};
use crate::specdec::DecodeMode;
use crate::steering::{SteeringDims, SteeringState, VariantKind};
use crate::training::{generate_synthetic, train, TrainMode, TrainingConfig};

/// How an arm's drafter is obtained from the pretrained drafter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmSpec {
    Pretrained,
    Distill,
    Sd2 {
        variant: VariantKind,
        #[serde(default)]
        freeze_drafter: bool,
    },
}

impl ArmSpec {
    pub fn decode_mode(&self) -> DecodeMode {
        match self {
            ArmSpec::Pretrained => DecodeMode::Pretrained,
            ArmSpec::Distill => DecodeMode::Distilled,
            ArmSpec::Sd2 { .. } => DecodeMode::Sd2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Training split; held-out prompts come from the same generator.
    pub corpus: CorpusSpec,
    pub verifier: ModelConfig,
    pub drafter: ModelConfig,
    pub verifier_training: TrainingConfig,
    pub drafter_training: TrainingConfig,
    /// Shared by every aligned arm; `freeze_drafter` is taken from the arm.
    pub alignment: TrainingConfig,
    /// Verifier samples used as alignment data; 0 aligns on the corpus itself.
    #[serde(default)]
    pub synthetic_sequences: usize,
    #[serde(default = "one")]
    pub synthetic_temperature: f64,
    pub arms: BTreeMap<String, ArmSpec>,
    pub eval_temperature: f64,
    pub eval_seeds: Vec<u64>,
    pub eval_prompts: usize,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    pub k: usize,
    pub init_seed: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct TrainedArm {
    pub spec: ArmSpec,
    pub drafter: Drafter,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PipelineModels {
    pub verifier: TransformerModel,
    pub arms: BTreeMap<String, TrainedArm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub spec: ArmSpec,
    /// One τ per evaluation seed.
    pub tau_per_seed: Vec<f64>,
    /// Mean accepted drafts per block, per seed (τ − 1).
    pub accepted_per_seed: Vec<f64>,
    pub final_loss: Option<f64>,
}

impl ArmResult {
    pub fn mean_accepted(&self) -> f64 {
        self.accepted_per_seed.iter().sum::<f64>() / self.accepted_per_seed.len() as f64
    }
}

fn tail_mean(curve: &[f64]) -> Option<f64> {
    let n = curve.len().min(20);
    (n > 0).then(|| curve[curve.len() - n..].iter().sum::<f64>() / n as f64)
}

/// The verifier, the independently pretrained drafter and the alignment data.
#[derive(Clone, Debug)]
pub struct BaseModels {
    pub verifier: TransformerModel,
    pub drafter: TransformerModel,
    pub align_data: Vec<Vec<usize>>,
}

fn init_rng(config: &PipelineConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    rng.set_stream(stream);
    rng
}

/// Pretrains the verifier on `corpus` and freezes it.
pub fn pretrain_verifier(config: &PipelineConfig, corpus: &[Vec<usize>]) -> Result<TransformerModel> {
    let model = TransformerModel::init(config.verifier.clone(), Role::Drafter, &mut init_rng(config, 0))?;
    let out = train(TrainMode::Pretrain, model, None, None, corpus, &config.verifier_training, None)?;
    let mut verifier = out.model.with_role(Role::Verifier);
    verifier.set_trainable(false);
    Ok(verifier)
}

pub fn pretrain_drafter(config: &PipelineConfig, corpus: &[Vec<usize>]) -> Result<TransformerModel> {
    let model = TransformerModel::init(config.drafter.clone(), Role::Drafter, &mut init_rng(config, 2))?;
    Ok(train(TrainMode::Pretrain, model, None, None, corpus, &config.drafter_training, None)?.model)
}

/// Pretrains the verifier and the drafter on the train corpus and prepares
/// the alignment data.
pub fn pretrain_base(config: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<BaseModels> {
    if config.corpus.split != Split::Train {
        return Err(Error::Config("pipeline corpus must be the train split".into()));
    }
    let corpus = generate_corpus(&config.corpus)?;
    let clock = Instant::now();
    let verifier = pretrain_verifier(config, &corpus)?;
    log(&format!("verifier pretrained ({:.0?})", clock.elapsed()));
    let drafter = pretrain_drafter(config, &corpus)?;
    log(&format!("drafter pretrained ({:.0?})", clock.elapsed()));
    let align_data = if config.synthetic_sequences > 0 {
        let prompts: Vec<Vec<usize>> = corpus.iter().map(|s| s[..config.prompt_len.min(s.len())].to_vec()).collect();
        let synth = generate_synthetic(
            &verifier,
            &prompts,
            config.synthetic_temperature,
            config.alignment.seq_len,
            config.synthetic_sequences,
            config.init_seed ^ 0x5eed,
        )?;
        log(&format!("synthetic corpus: {} sequences ({:.0?})", synth.sequences.len(), clock.elapsed()));
        synth.sequences
    } else {
        corpus
    };
    Ok(BaseModels { verifier, drafter, align_data })
}

/// Derives one arm's drafter from the pretrained drafter.
pub fn train_arm(config: &PipelineConfig, base: &BaseModels, spec: &ArmSpec) -> Result<TrainedArm> {
    let (drafter, final_loss) = match spec {
        ArmSpec::Pretrained => (Drafter { model: base.drafter.clone(), steering: None }, None),
        ArmSpec::Distill => {
            let mut cfg = config.alignment.clone();
            cfg.freeze_drafter = false;
            let out = train(TrainMode::Distill, base.drafter.clone(), None, Some(&base.verifier), &base.align_data, &cfg, None)?;
            let losses: Vec<f64> = out.curve.iter().map(|r| r.loss).collect();
            (Drafter { model: out.model, steering: None }, tail_mean(&losses))
        }
        ArmSpec::Sd2 { variant, freeze_drafter } => {
            let mut cfg = config.alignment.clone();
            cfg.freeze_drafter = *freeze_drafter;
            let mut rng = init_rng(config, 1);
            let dims = SteeringDims::new(&config.verifier, &config.drafter);
            let steering = SteeringState::init(*variant, dims, &mut rng);
            let out = train(TrainMode::Sd2, base.drafter.clone(), Some(steering), Some(&base.verifier), &base.align_data, &cfg, None)?;
            let losses: Vec<f64> = out.curve.iter().map(|r| r.loss).collect();
            (Drafter { model: out.model, steering: out.steering }, tail_mean(&losses))
        }
    };
    Ok(TrainedArm { spec: spec.clone(), drafter, final_loss })
}

/// Trains the base models and every configured arm.
pub fn train_pipeline(config: &PipelineConfig, log: &mut dyn FnMut(&str)) -> Result<PipelineModels> {
    let clock = Instant::now();
    let base = pretrain_base(config, log)?;
    let mut arms = BTreeMap::new();
    for (name, spec) in &config.arms {
        let arm = train_arm(config, &base, spec)?;
        log(&format!("arm {name}: loss {:.4} ({:.0?})", arm.final_loss.unwrap_or(f64::NAN), clock.elapsed()));
        arms.insert(name.clone(), arm);
    }
    Ok(PipelineModels { verifier: base.verifier, arms })
}

/// The evaluation matrix for one arm: held-out prompts, every seed.
pub fn eval_matrix(config: &PipelineConfig, mode: DecodeMode) -> ExperimentMatrix {
    let mut corpus = config.corpus.with_split(Split::HeldOut);
    corpus.name = "held_out".into();
    corpus.n_sequences = config.eval_prompts;
    corpus.seq_len = corpus.seq_len.max(config.prompt_len);
    ExperimentMatrix {
        modes: vec![mode],
        temperatures: vec![config.eval_temperature],
        corpora: vec![corpus],
        seeds: config.eval_seeds.clone(),
        k: config.k,
        max_new_tokens: config.max_new_tokens,
        n_prompts: config.eval_prompts,
        prompt_len: config.prompt_len,
        measure_throughput: false,
        eos_token: None,
    }
}

/// Evaluates one arm on held-out prompts, one report per seed.
pub fn evaluate_arm(
    config: &PipelineConfig,
    verifier: &TransformerModel,
    name: &str,
    arm: &TrainedArm,
) -> Result<(ArmResult, Vec<RunReport>)> {
    let mode = arm.spec.decode_mode();
    let set = ModelSet { verifier: verifier.clone(), drafters: BTreeMap::from([(mode, arm.drafter.clone())]) };
    let out = run_experiment(&eval_matrix(config, mode), &set)?;
    let taus: Vec<f64> = out.reports.iter().map(|r| r.tau).collect();
    let result = ArmResult {
        name: name.to_string(),
        spec: arm.spec.clone(),
        accepted_per_seed: taus.iter().map(|t| t - 1.0).collect(),
        tau_per_seed: taus,
        final_loss: arm.final_loss,
    };
    Ok((result, out.reports))
}

/// Evaluates every arm; returns per-arm results and the raw reports.
pub fn evaluate_pipeline(config: &PipelineConfig, models: &PipelineModels) -> Result<(Vec<ArmResult>, Vec<RunReport>)> {
    let mut results = Vec::new();
    let mut all = Vec::new();
    for (name, arm) in &models.arms {
        let (r, reports) = evaluate_arm(config, &models.verifier, name, arm)?;
        results.push(r);
        all.extend(reports);
    }
    Ok((results, all))
}
