use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sd2::checkpoint::Checkpoint;
use sd2::commands::validation_tau;
use sd2::bench::experiment::Drafter;
use sd2::config::RunConfig;
use sd2::specdec::DecodeMode;

const TINY: &str = include_str!("../../../configs/tiny.json");

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sd2"))
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).arg("--out").arg(out).args(args).output().expect("sd2 runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(config_text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, config_text).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn sd2(&self, args: &[&str]) -> Output {
        run(&self.config, &self.out(), args)
    }

    fn ck(&self, name: &str) -> PathBuf {
        self.out().join("checkpoints").join(name)
    }
}

fn pretrained() -> Workspace {
    let ws = Workspace::new(TINY);
    ok(&ws.sd2(&["pretrain"]));
    ws
}

#[test]
fn pretrain_is_seed_deterministic_and_learns() {
    let a = pretrained();
    let b = pretrained();
    for name in ["verifier.sd2c", "drafter_pretrained.sd2c"] {
        assert_eq!(std::fs::read(a.ck(name)).unwrap(), std::fs::read(b.ck(name)).unwrap(), "{name}");
    }
    let summary = sd2::commands::pretrain(&RunConfig::from_json(TINY).unwrap(), &a.dir.path().join("lib"), &mut |_| {}).unwrap();
    assert!(summary.verifier_val_loss < summary.verifier_init_loss);
    assert!(a.out().join("curves/verifier.jsonl").is_file());
}

#[test]
fn zero_epochs_writes_random_init_models() {
    let ws = Workspace::new(&TINY.replace("\"epochs\": 2", "\"epochs\": 0").replace("\"epochs\": 1", "\"epochs\": 0"));
    ok(&ws.sd2(&["pretrain"]));
    let cfg = RunConfig::load(&ws.config).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = sd2::model::TransformerModel::init(cfg.verifier.clone(), sd2::model::Role::Drafter, &mut rng).unwrap();
    let saved = Checkpoint::load(&ws.ck("verifier.sd2c")).unwrap().model;
    for ((_, a), (_, b)) in init.params().into_iter().zip(saved.params()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn align_records_variant_and_validation_tau() {
    let ws = pretrained();
    ok(&ws.sd2(&["align", "sd2", "--variant", "bias-after-mlp"]));
    let bytes = std::fs::read(ws.ck("drafter_sd2.sd2c")).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    assert_eq!(header["steering"]["variant"], "bias_after_mlp");

    let cfg = RunConfig::load(&ws.config).unwrap();
    let ck = Checkpoint::load(&ws.ck("drafter_sd2.sd2c")).unwrap();
    let verifier = Checkpoint::load(&ws.ck("verifier.sd2c")).unwrap().model;
    let logged = ck.metadata["validation_tau"].as_f64().unwrap();
    let tau = validation_tau(&cfg, &verifier, DecodeMode::Sd2, &Drafter { model: ck.model, steering: ck.steering }).unwrap();
    assert_eq!(tau.to_bits(), logged.to_bits());
}

#[test]
fn frozen_drafter_keeps_base_tensors() {
    let ws = pretrained();
    ok(&ws.sd2(&["align", "sd2", "--freeze-drafter", "--offset-mode", "blocked"]));
    let base = Checkpoint::load(&ws.ck("drafter_pretrained.sd2c")).unwrap().model;
    let aligned = Checkpoint::load(&ws.ck("drafter_sd2.sd2c")).unwrap();
    for ((_, a), (_, b)) in base.params().into_iter().zip(aligned.model.params()) {
        assert!(a.bit_eq(b));
    }
    assert_eq!(aligned.metadata["offset_mode"], "blocked");
}

fn aligned() -> Workspace {
    let ws = pretrained();
    ok(&ws.sd2(&["align", "distill"]));
    ok(&ws.sd2(&["align", "sd2"]));
    ws
}

#[test]
fn eval_tables_are_deterministic_and_reaggregate() {
    let ws = aligned();
    let first = ok(&ws.sd2(&["eval"]));
    let table = std::fs::read_to_string(ws.out().join("eval/comparison.csv")).unwrap();
    assert!(table.starts_with("corpus,temperature,mode,n_seeds,tau_mean,tau_std"));
    assert!(table.lines().any(|l| l.starts_with("ood,")));
    let second = ok(&ws.sd2(&["eval"]));
    let hash = |s: &str| s.lines().last().unwrap().rsplit(' ').next().unwrap().to_string();
    assert_eq!(hash(&first), hash(&second));
    assert_eq!(table, std::fs::read_to_string(ws.out().join("eval/comparison.csv")).unwrap());

    ok(&ws.sd2(&["eval", "--seeds", "1", "--mode", "sd2"]));
    let single = std::fs::read_to_string(ws.out().join("eval/comparison.csv")).unwrap();
    assert_eq!(single.lines().next().unwrap(), "corpus,temperature,mode,n_seeds,tau_mean");

    // Independent aggregation of the raw traces.
    ok(&ws.sd2(&["report"]));
    let re = std::fs::read_to_string(ws.out().join("eval/reaggregated.csv")).unwrap();
    for entry in std::fs::read_dir(ws.out().join("eval/traces")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut buckets: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
        let mut total = 0;
        let mut n = 0;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let acc = v["accepted"].as_u64().unwrap() as usize;
            let pos = v["position"].as_u64().unwrap() as usize;
            let b = buckets.entry(pos / 16 * 16 + 8).or_default();
            b.0 += acc;
            b.1 += 1;
            total += acc;
            n += 1;
        }
        let run = path.file_stem().unwrap().to_string_lossy().into_owned();
        let tau = total as f64 / n as f64 + 1.0;
        for (center, (sum, count)) in buckets {
            let row = format!("{run},{n},{tau:.6},{center},{:.6},{count}", sum as f64 / count as f64);
            assert!(re.lines().any(|l| l == row), "missing {row}");
        }
    }
}

#[test]
fn self_drafting_reaches_the_ceiling() {
    let text = TINY.replace("\"verify\"", "\"artifacts\": { \"pretrained\": \"checkpoints/verifier.sd2c\" },\n  \"verify\"");
    let ws = Workspace::new(&text);
    ok(&ws.sd2(&["pretrain"]));
    ok(&ws.sd2(&["eval", "--mode", "pretrained", "--temperature", "0"]));
    let table = std::fs::read_to_string(ws.out().join("eval/comparison.csv")).unwrap();
    for line in table.lines().skip(1) {
        let tau: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(tau, 5.0, "{line}");
    }
}

#[test]
fn verify_lossless_passes_on_trained_and_adversarial_drafters() {
    let ws = aligned();
    let out = ok(&ws.sd2(&["verify-lossless"]));
    assert!(out.contains("PASS greedy_identity[sd2]"));
    assert!(out.contains("PASS greedy_identity[adversarial]"));
    assert!(out.contains("PASS first_token_tv"));
}

#[test]
fn verification_failure_exits_one() {
    let ws = Workspace::new(&TINY.replace("\"tv_threshold\": 0.03", "\"tv_threshold\": 1e-9"));
    ok(&ws.sd2(&["pretrain"]));
    let o = ws.sd2(&["verify-lossless"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL first_token_tv"));
}

#[test]
fn exit_codes() {
    let ws = Workspace::new(&TINY.replace("\"schema_version\": 1,", "\"schema_version\": 1, \"bogus\": true,"));
    let o = ws.sd2(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let ws = Workspace::new(TINY);
    assert_eq!(ws.sd2(&["align", "distill"]).status.code(), Some(3));
    ok(&ws.sd2(&["pretrain"]));
    let o = ws.sd2(&["eval"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mode=distilled") && err.contains("mode=sd2"), "{err}");
    assert_eq!(ws.sd2(&["report"]).status.code(), Some(3));
    assert_eq!(bin().arg("pretrain").output().unwrap().status.code(), Some(2));
}
