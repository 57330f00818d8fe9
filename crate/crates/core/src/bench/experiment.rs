//! Experiment matrices: every `(mode, temperature, corpus, seed)` cell is a
//! batch of speculative generations over held-out prompts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{generate_corpus, CorpusSpec};
use super::metrics::{block_efficiency, mean_std, positional_profile, speedup, welch_t_test, ProfileBucket, SignificanceResult, ThroughputKey};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::specdec::{generate_with, BlockRecord, DecodeMode, EngineConfig};
use crate::steering::SteeringState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub modes: Vec<DecodeMode>,
    pub temperatures: Vec<f64>,
    /// Evaluation corpora (held-out or out-of-distribution splits).
    pub corpora: Vec<CorpusSpec>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub max_new_tokens: usize,
    pub n_prompts: usize,
    pub prompt_len: usize,
    /// Run cells one at a time after a discarded warmup generation.
    #[serde(default)]
    pub measure_throughput: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token: Option<usize>,
}

fn default_k() -> usize {
    8
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.temperatures.is_empty() || self.corpora.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment matrix has an empty axis".into()));
        }
        if self.n_prompts == 0 || self.prompt_len == 0 || self.max_new_tokens == 0 || self.k == 0 {
            return Err(Error::Config("n_prompts, prompt_len, max_new_tokens and k must be positive".into()));
        }
        if self.temperatures.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config("temperatures must be finite and >= 0".into()));
        }
        let mut names: Vec<&str> = self.corpora.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.corpora.len() {
            return Err(Error::Config("corpus names must be unique".into()));
        }
        for c in &self.corpora {
            c.validate()?;
            if c.seq_len < self.prompt_len || c.n_sequences < self.n_prompts {
                return Err(Error::Config(format!("corpus {} is too small for {} prompts of {} tokens", c.name, self.n_prompts, self.prompt_len)));
            }
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("matrix serializes")))
    }
}

#[derive(Clone, Debug)]
pub struct Drafter {
    pub model: TransformerModel,
    pub steering: Option<SteeringState>,
}

/// The verifier and one drafter per decoding mode.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub verifier: TransformerModel,
    pub drafters: BTreeMap<DecodeMode, Drafter>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub corpus: String,
    pub seed: u64,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("{}_T{}_{}_seed{}", self.mode.name(), self.temperature, self.corpus, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cell: CellKey,
    pub accepted_counts: Vec<usize>,
    pub tau: f64,
    pub tokens_generated: usize,
    /// Wall-clock derived and hardware-dependent; never hashed.
    pub tokens_per_second: f64,
    /// Throughput relative to the pretrained cell with the same temperature,
    /// corpus and seed.
    pub alpha: Option<f64>,
    pub profile: Vec<ProfileBucket>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub throughput_key: ThroughputKey,
    #[serde(skip)]
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub corpus: String,
    pub temperature: f64,
    pub mode: DecodeMode,
    pub n_seeds: usize,
    pub tau_mean: f64,
    pub tau_std: f64,
    pub alpha_mean: Option<f64>,
    /// Welch test of this mode's per-seed τ against the pretrained drafter's.
    pub vs_pretrained: Option<SignificanceResult>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub reports: Vec<RunReport>,
    pub comparison: Vec<ComparisonRow>,
}

/// Worker count from `SD2_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("SD2_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn hardware_tag() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}-{}cores", std::env::consts::ARCH, std::env::consts::OS, cores)
}

fn prompts_for(spec: &CorpusSpec, n: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    Ok(generate_corpus(spec)?.into_iter().take(n).map(|s| s[..len].to_vec()).collect())
}

fn hash_prompts(prompts: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for p in prompts {
        for &t in p {
            h.update((t as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn run_cell(
    matrix: &ExperimentMatrix,
    models: &ModelSet,
    cell: &CellKey,
    prompts: &[Vec<usize>],
    key: &ThroughputKey,
) -> Result<RunReport> {
    let drafter = &models.drafters[&cell.mode];
    let mut engine = EngineConfig::new(cell.mode, cell.temperature, matrix.max_new_tokens, cell.seed);
    engine.k = matrix.k;
    engine.eos_token = matrix.eos_token;
    let run = |i: usize, p: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
        rng.set_stream(i as u64);
        generate_with(&engine, &models.verifier, &drafter.model, drafter.steering.as_ref(), p, &mut rng)
    };
    if matrix.measure_throughput {
        run(0, &prompts[0])?;
    }
    let mut blocks = Vec::new();
    let mut tokens = 0;
    let mut elapsed = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let out = run(i, p)?;
        tokens += out.tokens.len();
        elapsed += out.elapsed.as_secs_f64();
        blocks.extend(out.blocks);
    }
    let accepted: Vec<usize> = blocks.iter().map(|b| b.accepted).collect();
    Ok(RunReport {
        cell: cell.clone(),
        tau: block_efficiency(&accepted)?,
        accepted_counts: accepted,
        tokens_generated: tokens,
        tokens_per_second: if elapsed > 0.0 { tokens as f64 / elapsed } else { 0.0 },
        alpha: None,
        profile: positional_profile(&blocks),
        seeds: matrix.seeds.clone(),
        config_hash: matrix.config_hash(),
        throughput_key: key.clone(),
        blocks,
    })
}

/// Runs every cell of the matrix and aggregates over seeds.
pub fn run_experiment(matrix: &ExperimentMatrix, models: &ModelSet) -> Result<ExperimentResult> {
    matrix.validate()?;
    let mut cells = Vec::new();
    for corpus in &matrix.corpora {
        for &temperature in &matrix.temperatures {
            for &mode in &matrix.modes {
                for &seed in &matrix.seeds {
                    cells.push(CellKey { mode, temperature, corpus: corpus.name.clone(), seed });
                }
            }
        }
    }
    let missing: Vec<String> = cells
        .iter()
        .filter(|c| match models.drafters.get(&c.mode) {
            None => true,
            Some(d) => c.mode == DecodeMode::Sd2 && d.steering.is_none(),
        })
        .map(CellKey::label)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    let vocab = models.verifier.config.vocab_size;
    let mut prompts = BTreeMap::new();
    for c in &matrix.corpora {
        if c.vocab_size != vocab {
            return Err(Error::Config(format!("corpus {} has vocab {} but the verifier has {vocab}", c.name, c.vocab_size)));
        }
        let p = prompts_for(c, matrix.n_prompts, matrix.prompt_len)?;
        let key = ThroughputKey {
            prompts_hash: hash_prompts(&p),
            hardware: hardware_tag(),
            max_new_tokens: matrix.max_new_tokens,
            k: matrix.k,
        };
        prompts.insert(c.name.clone(), (p, key));
    }
    let job = |c: &CellKey| {
        let (p, key) = &prompts[&c.corpus];
        run_cell(matrix, models, c, p, key)
    };
    let mut reports: Vec<RunReport> = if matrix.measure_throughput {
        cells.iter().map(job).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(job).collect::<Result<_>>())?
    };

    for i in 0..reports.len() {
        let c = &reports[i].cell;
        let base = reports
            .iter()
            .find(|r| r.cell.mode == DecodeMode::Pretrained && r.cell.temperature == c.temperature && r.cell.corpus == c.corpus && r.cell.seed == c.seed);
        if let Some(b) = base {
            let a = speedup(reports[i].tokens_per_second, &reports[i].throughput_key, b.tokens_per_second, &b.throughput_key).ok();
            reports[i].alpha = a;
        }
    }

    let mut comparison = Vec::new();
    for corpus in &matrix.corpora {
        for &temperature in &matrix.temperatures {
            let group = |mode: DecodeMode| -> Vec<&RunReport> {
                reports
                    .iter()
                    .filter(|r| r.cell.mode == mode && r.cell.temperature == temperature && r.cell.corpus == corpus.name)
                    .collect()
            };
            let base: Vec<f64> = group(DecodeMode::Pretrained).iter().map(|r| r.tau).collect();
            for &mode in &matrix.modes {
                let rs = group(mode);
                let taus: Vec<f64> = rs.iter().map(|r| r.tau).collect();
                let (tau_mean, tau_std) = mean_std(&taus);
                let alphas: Vec<f64> = rs.iter().filter_map(|r| r.alpha).collect();
                let vs_pretrained = if mode != DecodeMode::Pretrained && taus.len() >= 2 && base.len() >= 2 {
                    Some(welch_t_test(&taus, &base)?)
                } else {
                    None
                };
                comparison.push(ComparisonRow {
                    corpus: corpus.name.clone(),
                    temperature,
                    mode,
                    n_seeds: taus.len(),
                    tau_mean,
                    tau_std,
                    alpha_mean: (!alphas.is_empty()).then(|| mean_std(&alphas).0),
                    vs_pretrained,
                });
            }
        }
    }
    Ok(ExperimentResult { reports, comparison })
}

/// One line of a JSONL trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub block_index: usize,
    pub position: usize,
    pub accepted: usize,
    pub emitted: usize,
    pub mode: DecodeMode,
    pub seed: u64,
}

pub fn trace_lines(report: &RunReport) -> String {
    let mut out = String::new();
    for b in &report.blocks {
        let rec = TraceRecord {
            block_index: b.block_index,
            position: b.position,
            accepted: b.accepted,
            emitted: b.emitted,
            mode: report.cell.mode,
            seed: report.cell.seed,
        };
        out.push_str(&serde_json::to_string(&rec).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSONL trace; blank lines are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("trace line {}: {e}", i + 1))))
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Long-form τ table; deterministic for a fixed matrix and seeds.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let with_std = rows.iter().any(|r| r.n_seeds > 1);
    let mut out = String::from("corpus,temperature,mode,n_seeds,tau_mean");
    if with_std {
        out.push_str(",tau_std,welch_t,welch_p,p_greater");
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{},{:.6}", r.corpus, r.temperature, r.mode.name(), r.n_seeds, r.tau_mean).unwrap();
        if with_std {
            let s = r.vs_pretrained.as_ref();
            write!(
                out,
                ",{:.6},{},{},{}",
                r.tau_std,
                fmt_opt(s.map(|s| s.t_statistic)),
                fmt_opt(s.map(|s| s.p_value)),
                fmt_opt(s.map(|s| s.p_greater()))
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// Wide table with τ and α per corpus. α is wall-clock derived.
pub fn summary_table_csv(rows: &[ComparisonRow], corpora: &[String]) -> String {
    let mut out = String::from("mode,temperature");
    for c in corpora {
        write!(out, ",{c}_tau,{c}_alpha").unwrap();
    }
    out.push('\n');
    let mut keys: Vec<(DecodeMode, String)> = Vec::new();
    for r in rows {
        let key = (r.mode, r.temperature.to_string());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (mode, t) in keys {
        write!(out, "{},{t}", mode.name()).unwrap();
        for c in corpora {
            let row = rows.iter().find(|r| r.mode == mode && r.temperature.to_string() == t && &r.corpus == c);
            match row {
                Some(r) => write!(out, ",{:.4},{}", r.tau_mean, fmt_opt(r.alpha_mean)).unwrap(),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn profile_csv(reports: &[RunReport]) -> String {
    let mut groups: BTreeMap<(String, String, &'static str), Vec<&BlockRecord>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.cell.corpus.clone(), r.cell.temperature.to_string(), r.cell.mode.name()))
            .or_default()
            .extend(&r.blocks);
    }
    let mut out = String::from("corpus,temperature,mode,center,mean_accepted,count\n");
    for ((c, t, m), blocks) in groups {
        for b in positional_profile(blocks) {
            writeln!(out, "{c},{t},{m},{},{:.6},{}", b.center, b.mean_accepted, b.count).unwrap();
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes traces, tables and reports under `dir`; returns the hash of every
/// deterministic output (timing excluded).
pub fn write_outputs(result: &ExperimentResult, matrix: &ExperimentMatrix, dir: &Path) -> Result<String> {
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    let mut hasher = Sha256::new();
    let comparison = comparison_csv(&result.comparison);
    let profile = profile_csv(&result.reports);
    hasher.update(comparison.as_bytes());
    hasher.update(profile.as_bytes());
    write(&dir.join("comparison.csv"), &comparison)?;
    write(&dir.join("profile.csv"), &profile)?;
    for r in &result.reports {
        let lines = trace_lines(r);
        hasher.update(r.cell.label().as_bytes());
        hasher.update(lines.as_bytes());
        write(&traces.join(format!("{}.jsonl", r.cell.label())), &lines)?;
    }
    let corpora: Vec<String> = matrix.corpora.iter().map(|c| c.name.clone()).collect();
    write(&dir.join("table.csv"), &summary_table_csv(&result.comparison, &corpora))?;
    let mut tp = String::from("corpus,temperature,mode,seed,tokens_per_second,alpha,hardware\n");
    for r in &result.reports {
        writeln!(
            tp,
            "{},{},{},{},{:.3},{},{}",
            r.cell.corpus,
            r.cell.temperature,
            r.cell.mode.name(),
            r.cell.seed,
            r.tokens_per_second,
            fmt_opt(r.alpha),
            r.throughput_key.hardware
        )
        .unwrap();
    }
    write(&dir.join("throughput.csv"), &tp)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "matrix": matrix,
        "comparison": result.comparison,
        "reports": result.reports,
    }))?;
    write(&dir.join("report.json"), &json)?;
    let hash = hex::encode(hasher.finalize());
    write(&dir.join("report_hash.txt"), &format!("{hash}\n"))?;
    Ok(hash)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub file: PathBuf,
    pub blocks: usize,
    pub tau: f64,
    pub profile: Vec<ProfileBucket>,
}

/// Re-aggregates every `*.jsonl` trace under `dir` (sorted by file name).
pub fn summarize_traces(dir: &Path) -> Result<Vec<TraceSummary>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let recs = parse_trace(&text)?;
        let blocks: Vec<BlockRecord> = recs
            .iter()
            .map(|r| BlockRecord {
                block_index: r.block_index,
                position: r.position,
                drafted: 0,
                accepted: r.accepted,
                emitted: r.emitted,
                final_source: crate::specdec::FinalSource::Bonus,
            })
            .collect();
        let accepted: Vec<usize> = recs.iter().map(|r| r.accepted).collect();
        out.push(TraceSummary {
            file: f,
            blocks: recs.len(),
            tau: if accepted.is_empty() { f64::NAN } else { block_efficiency(&accepted)? },
            profile: positional_profile(&blocks),
        });
    }
    Ok(out)
}
