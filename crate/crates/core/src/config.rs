//! The JSON run configuration shared by every command. Parsing is strict:
//! unknown keys anywhere are rejected before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::corpus::{check_disjoint, CorpusSpec, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::specdec::DecodeMode;
use crate::steering::VariantKind;
use crate::training::TrainingConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Training split; held-out prompts come from the same generator.
    pub corpus: CorpusSpec,
    /// Optional out-of-distribution evaluation corpus.
    #[serde(default)]
    pub ood_corpus: Option<CorpusSpec>,
    pub verifier: ModelConfig,
    pub drafter: ModelConfig,
    pub pretrain: PretrainSection,
    pub align: AlignSection,
    pub engine: EngineSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub artifacts: Artifacts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub verifier: TrainingConfig,
    pub drafter: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSection {
    pub training: TrainingConfig,
    #[serde(default = "default_variant")]
    pub variant: VariantKind,
    /// Verifier samples used as alignment data; 0 aligns on the corpus.
    #[serde(default)]
    pub synthetic_sequences: usize,
    #[serde(default = "default_one")]
    pub synthetic_temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_k")]
    pub k: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub eos_token: Option<usize>,
    #[serde(default = "default_true")]
    pub steering_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub modes: Vec<DecodeMode>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_prompts: usize,
    pub prompt_len: usize,
    #[serde(default)]
    pub measure_throughput: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_greedy_trials")]
    pub greedy_trials: usize,
    #[serde(default = "default_greedy_tokens")]
    pub greedy_max_new_tokens: usize,
    #[serde(default = "default_tv_rounds")]
    pub tv_rounds: usize,
    #[serde(default = "default_tv_threshold")]
    pub tv_threshold: f64,
    #[serde(default = "default_one")]
    pub tv_temperature: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            greedy_trials: default_greedy_trials(),
            greedy_max_new_tokens: default_greedy_tokens(),
            tv_rounds: default_tv_rounds(),
            tv_threshold: default_tv_threshold(),
            tv_temperature: 1.0,
        }
    }
}

/// Checkpoint locations, relative to the output directory unless absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifacts {
    #[serde(default)]
    pub verifier: Option<PathBuf>,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub distilled: Option<PathBuf>,
    #[serde(default)]
    pub sd2: Option<PathBuf>,
}

fn default_variant() -> VariantKind {
    VariantKind::BiasInMlp
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_k() -> usize {
    8
}
fn default_greedy_trials() -> usize {
    100
}
fn default_greedy_tokens() -> usize {
    32
}
fn default_tv_rounds() -> usize {
    100_000
}
fn default_tv_threshold() -> f64 {
    0.01
}

impl RunConfig {
    /// Strict parse followed by [`RunConfig::validate`]; every failure is a
    /// [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Config(format!("config file {} not found", path.display())))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.verifier.validate().map_err(cfg_err)?;
        self.drafter.validate().map_err(cfg_err)?;
        self.verifier.taps().map_err(cfg_err)?;
        if self.verifier.vocab_size != self.drafter.vocab_size {
            return Err(Error::Config("verifier and drafter vocabularies differ".into()));
        }
        if self.corpus.split != Split::Train {
            return Err(Error::Config("corpus must be the train split".into()));
        }
        self.corpus.validate().map_err(cfg_err)?;
        if self.corpus.vocab_size != self.verifier.vocab_size {
            return Err(Error::Config("corpus vocabulary differs from the models'".into()));
        }
        if let Some(ood) = &self.ood_corpus {
            ood.validate().map_err(cfg_err)?;
            if ood.vocab_size != self.verifier.vocab_size {
                return Err(Error::Config("ood corpus vocabulary differs from the models'".into()));
            }
            check_disjoint(&self.corpus, ood).map_err(cfg_err)?;
        }
        for t in [&self.pretrain.verifier, &self.pretrain.drafter, &self.align.training] {
            t.validate().map_err(cfg_err)?;
        }
        if self.engine.k == 0 || self.engine.max_new_tokens == 0 {
            return Err(Error::Config("engine.k and engine.max_new_tokens must be positive".into()));
        }
        if self.eval.modes.is_empty() || self.eval.temperatures.is_empty() || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one mode, temperature and seed".into()));
        }
        if self.eval.n_prompts == 0 || self.eval.prompt_len == 0 {
            return Err(Error::Config("eval.n_prompts and eval.prompt_len must be positive".into()));
        }
        if self.eval.prompt_len + self.engine.max_new_tokens > self.verifier.max_seq_len {
            return Err(Error::Config("prompt_len + max_new_tokens exceeds the verifier context".into()));
        }
        if !(self.verify.tv_threshold > 0.0) || self.verify.tv_rounds == 0 {
            return Err(Error::Config("verify.tv_threshold and verify.tv_rounds must be positive".into()));
        }
        Ok(())
    }

    /// Replaces the master seed and every training seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.verifier.seed = seed;
        self.pretrain.drafter.seed = seed.wrapping_add(1);
        self.align.training.seed = seed.wrapping_add(2);
        self
    }

    pub fn artifact_path(&self, out: &Path, which: Artifact) -> PathBuf {
        let configured = match which {
            Artifact::Verifier => &self.artifacts.verifier,
            Artifact::Drafter(DecodeMode::Pretrained) => &self.artifacts.pretrained,
            Artifact::Drafter(DecodeMode::Distilled) => &self.artifacts.distilled,
            Artifact::Drafter(DecodeMode::Sd2) => &self.artifacts.sd2,
        };
        match configured {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => out.join(p),
            None => out.join("checkpoints").join(which.default_file()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifact {
    Verifier,
    Drafter(DecodeMode),
}

impl Artifact {
    pub fn default_file(self) -> String {
        match self {
            Artifact::Verifier => "verifier.sd2c".into(),
            Artifact::Drafter(m) => format!("drafter_{}.sd2c", m.name()),
        }
    }
}
