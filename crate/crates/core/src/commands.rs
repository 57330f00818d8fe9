//! The command implementations behind the CLI, usable as a library.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::corpus::{generate_corpus, CorpusSpec, Split};
use crate::bench::experiment::{
    run_experiment, summarize_traces, write_outputs, ComparisonRow, Drafter, ExperimentMatrix, ModelSet,
    TraceSummary,
};
use crate::bench::lossless::{first_token_tv, greedy_identity};
use crate::checkpoint::Checkpoint;
use crate::config::{Artifact, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Role, TransformerModel};
use crate::specdec::DecodeMode;
use crate::steering::{SteeringDims, SteeringState, VariantKind};
use crate::training::{eval_loss, generate_synthetic, train, windows, LossRecord, OffsetMode, TrainMode};

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_curve(out: &Path, name: &str, curve: &[LossRecord]) -> Result<()> {
    let mut text = String::new();
    for r in curve {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(&out.join("curves").join(format!("{name}.jsonl")), text.as_bytes())
}

/// Held-out windows used for validation losses.
fn validation_windows(cfg: &RunConfig, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    let held = cfg.corpus.with_split(Split::HeldOut);
    let mut w = windows(&generate_corpus(&held)?, seq_len);
    w.truncate(32);
    Ok(w)
}

fn mean_loss(model: &TransformerModel, windows: &[Vec<usize>]) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in windows.chunks(8) {
        total += eval_loss(model, chunk)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub verifier_path: PathBuf,
    pub drafter_path: PathBuf,
    pub verifier_init_loss: f64,
    pub verifier_val_loss: f64,
    pub drafter_val_loss: f64,
}

/// Trains the verifier and, independently, the drafter on the train corpus.
pub fn pretrain(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PretrainSummary> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let verifier = TransformerModel::init(cfg.verifier.clone(), Role::Drafter, &mut rng)?;
    rng.set_stream(1);
    let drafter = TransformerModel::init(cfg.drafter.clone(), Role::Drafter, &mut rng)?;

    let val = validation_windows(cfg, cfg.pretrain.verifier.seq_len)?;
    let verifier_init_loss = mean_loss(&verifier, &val)?;
    let v = train(TrainMode::Pretrain, verifier, None, None, &corpus, &cfg.pretrain.verifier, None)?;
    let verifier_val_loss = mean_loss(&v.model, &val)?;
    log(&format!("verifier: {} steps, held-out loss {verifier_init_loss:.4} -> {verifier_val_loss:.4}", v.curve.len()));
    write_curve(out, "verifier", &v.curve)?;

    let d = train(TrainMode::Pretrain, drafter, None, None, &corpus, &cfg.pretrain.drafter, None)?;
    let dval = validation_windows(cfg, cfg.pretrain.drafter.seq_len)?;
    let drafter_val_loss = mean_loss(&d.model, &dval)?;
    log(&format!("drafter: {} steps, held-out loss {drafter_val_loss:.4}", d.curve.len()));
    write_curve(out, "drafter_pretrained", &d.curve)?;

    let mut verifier = v.model.with_role(Role::Verifier);
    verifier.set_trainable(false);
    let verifier_path = cfg.artifact_path(out, Artifact::Verifier);
    let drafter_path = cfg.artifact_path(out, Artifact::Drafter(DecodeMode::Pretrained));
    let mut ck = Checkpoint::new(verifier, None);
    ck.metadata.insert("seed".into(), cfg.seed.into());
    ck.metadata.insert("validation_loss".into(), verifier_val_loss.into());
    ck.save(&verifier_path)?;
    let mut ck = Checkpoint::new(d.model, None);
    ck.metadata.insert("seed".into(), cfg.seed.into());
    ck.metadata.insert("validation_loss".into(), drafter_val_loss.into());
    ck.save(&drafter_path)?;
    Ok(PretrainSummary { verifier_path, drafter_path, verifier_init_loss, verifier_val_loss, drafter_val_loss })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Distill,
    Sd2,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignOptions {
    pub variant: Option<VariantKind>,
    pub offset_mode: Option<OffsetMode>,
    pub freeze_drafter: Option<bool>,
    /// Overrides the configured output checkpoint.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub path: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub validation_tau: f64,
}

fn load_verifier(cfg: &RunConfig, out: &Path) -> Result<TransformerModel> {
    let mut v = Checkpoint::load(&cfg.artifact_path(out, Artifact::Verifier))?.model.with_role(Role::Verifier);
    v.set_trainable(false);
    Ok(v)
}

/// Block efficiency on held-out prompts at the first configured temperature
/// and seed; recorded in aligned checkpoints.
pub fn validation_tau(cfg: &RunConfig, verifier: &TransformerModel, mode: DecodeMode, drafter: &Drafter) -> Result<f64> {
    let mut matrix = eval_matrix(cfg);
    matrix.modes = vec![mode];
    matrix.temperatures.truncate(1);
    matrix.seeds.truncate(1);
    matrix.corpora.truncate(1);
    matrix.measure_throughput = false;
    let set = ModelSet { verifier: verifier.clone(), drafters: BTreeMap::from([(mode, drafter.clone())]) };
    Ok(run_experiment(&matrix, &set)?.reports[0].tau)
}

/// Aligns a copy of the pretrained drafter to the verifier.
pub fn align(
    cfg: &RunConfig,
    out: &Path,
    mode: AlignMode,
    opts: &AlignOptions,
    log: &mut dyn FnMut(&str),
) -> Result<AlignSummary> {
    cfg.validate()?;
    let verifier = load_verifier(cfg, out)?;
    let base = Checkpoint::load(&cfg.artifact_path(out, Artifact::Drafter(DecodeMode::Pretrained)))?;
    let mut tcfg = cfg.align.training.clone();
    if let Some(m) = opts.offset_mode {
        tcfg.offset_mode = m;
    }
    if let Some(f) = opts.freeze_drafter {
        tcfg.freeze_drafter = f;
    }
    let mut data = generate_corpus(&cfg.corpus)?;
    if cfg.align.synthetic_sequences > 0 {
        let prompts: Vec<Vec<usize>> = data.iter().map(|s| s[..cfg.eval.prompt_len.min(s.len())].to_vec()).collect();
        data = generate_synthetic(
            &verifier,
            &prompts,
            cfg.align.synthetic_temperature,
            tcfg.seq_len,
            cfg.align.synthetic_sequences,
            cfg.seed,
        )?
        .sequences;
        log(&format!("synthetic alignment corpus: {} sequences", data.len()));
    }
    let drafter = base.model.with_role(Role::Drafter);
    let (train_mode, decode_mode, steering) = match mode {
        AlignMode::Distill => (TrainMode::Distill, DecodeMode::Distilled, None),
        AlignMode::Sd2 => {
            let kind = opts.variant.unwrap_or(cfg.align.variant);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            let dims = SteeringDims::new(&verifier.config, &drafter.config);
            (TrainMode::Sd2, DecodeMode::Sd2, Some(SteeringState::init(kind, dims, &mut rng)))
        }
    };
    let outcome = train(train_mode, drafter, steering, Some(&verifier), &data, &tcfg, None)?;
    let final_loss = outcome.curve.last().map_or(f64::NAN, |r| r.loss);
    log(&format!("{}: {} steps, final loss {final_loss:.5}", decode_mode.name(), outcome.curve.len()));
    write_curve(out, &format!("drafter_{}", decode_mode.name()), &outcome.curve)?;
    let d = Drafter { model: outcome.model, steering: outcome.steering };
    let tau = validation_tau(cfg, &verifier, decode_mode, &d)?;
    log(&format!("{}: validation tau {tau:.4}", decode_mode.name()));
    let path = opts.output.clone().unwrap_or_else(|| cfg.artifact_path(out, Artifact::Drafter(decode_mode)));
    let mut ck = Checkpoint::new(d.model, d.steering);
    ck.metadata.insert("seed".into(), cfg.seed.into());
    ck.metadata.insert("mode".into(), decode_mode.name().into());
    ck.metadata.insert("freeze_drafter".into(), tcfg.freeze_drafter.into());
    ck.metadata.insert("offset_mode".into(), serde_json::to_value(tcfg.offset_mode)?);
    ck.metadata.insert("validation_tau".into(), tau.into());
    ck.save(&path)?;
    Ok(AlignSummary { path, steps: outcome.curve.len(), final_loss, validation_tau: tau })
}

fn eval_corpora(cfg: &RunConfig) -> Vec<CorpusSpec> {
    let n = cfg.eval.n_prompts;
    let fit = |mut c: CorpusSpec, name: &str| {
        c.name = name.into();
        c.n_sequences = n;
        c.seq_len = c.seq_len.max(cfg.eval.prompt_len);
        c
    };
    let mut out = vec![fit(cfg.corpus.with_split(Split::HeldOut), "held_out")];
    if let Some(ood) = &cfg.ood_corpus {
        out.push(fit(ood.with_split(Split::Ood), "ood"));
    }
    out
}

pub fn eval_matrix(cfg: &RunConfig) -> ExperimentMatrix {
    ExperimentMatrix {
        modes: cfg.eval.modes.clone(),
        temperatures: cfg.eval.temperatures.clone(),
        corpora: eval_corpora(cfg),
        seeds: cfg.eval.seeds.clone(),
        k: cfg.engine.k,
        max_new_tokens: cfg.engine.max_new_tokens,
        n_prompts: cfg.eval.n_prompts,
        prompt_len: cfg.eval.prompt_len,
        measure_throughput: cfg.eval.measure_throughput,
        eos_token: cfg.engine.eos_token,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub modes: Option<Vec<DecodeMode>>,
    pub temperatures: Option<Vec<f64>>,
    /// Use this many seeds, counting up from the master seed.
    pub n_seeds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub dir: PathBuf,
    pub report_hash: String,
    pub comparison: Vec<ComparisonRow>,
}

fn load_drafters(cfg: &RunConfig, out: &Path, modes: &[DecodeMode]) -> Result<BTreeMap<DecodeMode, Drafter>> {
    let mut drafters = BTreeMap::new();
    let mut missing = Vec::new();
    for &mode in modes {
        let path = cfg.artifact_path(out, Artifact::Drafter(mode));
        match Checkpoint::load(&path) {
            Ok(ck) => {
                if mode == DecodeMode::Sd2 && ck.steering.is_none() {
                    return Err(Error::Checkpoint(format!("{} has no steering state", path.display())));
                }
                let steering = if cfg.engine.steering_enabled {
                    ck.steering
                } else {
                    ck.steering.map(|mut s| {
                        s.enabled = false;
                        s
                    })
                };
                drafters.insert(mode, Drafter { model: ck.model, steering });
            }
            Err(Error::MissingArtifact(p)) => missing.push(format!("mode={} ({})", mode.name(), p.display())),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    Ok(drafters)
}

/// Runs the evaluation matrix and writes traces and tables under `out/eval`.
pub fn eval(cfg: &RunConfig, out: &Path, opts: &EvalOptions) -> Result<EvalSummary> {
    cfg.validate()?;
    let mut matrix = eval_matrix(cfg);
    if let Some(m) = &opts.modes {
        matrix.modes = m.clone();
    }
    if let Some(t) = &opts.temperatures {
        matrix.temperatures = t.clone();
    }
    if let Some(n) = opts.n_seeds {
        matrix.seeds = (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    }
    matrix.validate()?;
    let verifier = load_verifier(cfg, out)?;
    let drafters = load_drafters(cfg, out, &matrix.modes)?;
    let result = run_experiment(&matrix, &ModelSet { verifier, drafters })?;
    let dir = out.join("eval");
    let report_hash = write_outputs(&result, &matrix, &dir)?;
    Ok(EvalSummary { dir, report_hash, comparison: result.comparison })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A drafter with uniform random weights in `[-1, 1]`.
pub fn adversarial_drafter(template: &TransformerModel, seed: u64) -> Result<TransformerModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransformerModel::init(template.config.clone(), Role::Drafter, &mut rng)?;
    for (_, t) in m.params_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-1.0..=1.0);
        }
    }
    Ok(m)
}

/// Greedy identity for every available drafter plus an adversarial one,
/// then the first-token TV check with the first available drafter.
pub fn verify_lossless(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<VerifyReport> {
    cfg.validate()?;
    let verifier = load_verifier(cfg, out)?;
    let mut drafters: Vec<(String, DecodeMode, Drafter)> = Vec::new();
    for mode in DecodeMode::ALL {
        match Checkpoint::load(&cfg.artifact_path(out, Artifact::Drafter(mode))) {
            Ok(ck) if mode != DecodeMode::Sd2 || ck.steering.is_some() => {
                drafters.push((mode.name().into(), mode, Drafter { model: ck.model, steering: ck.steering }))
            }
            Ok(_) | Err(Error::MissingArtifact(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let template = drafters.first().map_or(&verifier, |d| &d.2.model).clone();
    drafters.push((
        "adversarial".into(),
        DecodeMode::Pretrained,
        Drafter { model: adversarial_drafter(&template, cfg.seed)?, steering: None },
    ));

    let mut held = cfg.corpus.with_split(Split::HeldOut);
    held.n_sequences = cfg.verify.greedy_trials.max(1);
    held.seq_len = held.seq_len.max(cfg.eval.prompt_len);
    let prompts: Vec<Vec<usize>> =
        generate_corpus(&held)?.into_iter().map(|s| s[..cfg.eval.prompt_len].to_vec()).collect();

    let mut checks = Vec::new();
    for (name, mode, d) in &drafters {
        let r = greedy_identity(
            &verifier,
            &d.model,
            d.steering.as_ref(),
            *mode,
            &prompts,
            cfg.verify.greedy_max_new_tokens,
            cfg.engine.k,
        )?;
        let detail = match &r.first_counterexample {
            None => format!("{} prompts, 0 mismatches", r.trials),
            Some(c) => format!(
                "{} of {} prompts differ; first: prompt {:?} expected {:?} got {:?}",
                r.mismatches, r.trials, c.prompt, c.expected, c.got
            ),
        };
        log(&format!("greedy_identity[{name}]: {detail}"));
        checks.push(CheckResult { name: format!("greedy_identity[{name}]"), passed: r.passed(), detail });
    }
    let (name, mode, d) = &drafters[0];
    let r = first_token_tv(
        &verifier,
        &d.model,
        d.steering.as_ref(),
        *mode,
        &prompts[0],
        cfg.verify.tv_temperature,
        cfg.engine.k,
        cfg.verify.tv_rounds,
        cfg.seed,
    )?;
    let passed = r.tv < cfg.verify.tv_threshold;
    let mut detail = format!("TV {:.5} over {} rounds (threshold {})", r.tv, r.rounds, cfg.verify.tv_threshold);
    if !passed {
        write!(detail, "; exact {:?} empirical {:?}", r.exact, r.empirical).unwrap();
    }
    log(&format!("first_token_tv[{name}]: {detail}"));
    checks.push(CheckResult { name: format!("first_token_tv[{name}]"), passed, detail });
    Ok(VerifyReport { checks })
}

/// Re-aggregates the JSONL traces under `out/eval/traces` into
/// `out/eval/reaggregated.csv`.
pub fn report(out: &Path) -> Result<(PathBuf, Vec<TraceSummary>)> {
    let traces = out.join("eval").join("traces");
    if !traces.is_dir() {
        return Err(Error::MissingArtifact(traces));
    }
    let summaries = summarize_traces(&traces)?;
    let mut csv = String::from("run,blocks,tau,center,mean_accepted,count\n");
    for s in &summaries {
        let run = s.file.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        if s.profile.is_empty() {
            writeln!(csv, "{run},{},{:.6},,,", s.blocks, s.tau).unwrap();
        }
        for b in &s.profile {
            writeln!(csv, "{run},{},{:.6},{},{:.6},{}", s.blocks, s.tau, b.center, b.mean_accepted, b.count).unwrap();
        }
    }
    let path = out.join("eval").join("reaggregated.csv");
    write_file(&path, csv.as_bytes())?;
    Ok((path, summaries))
}
