use std::fs;
use std::path::PathBuf;

use sd2::bench::{parse_trace, ExperimentMatrix};
use sd2::checkpoint::Checkpoint;
use sd2::config::RunConfig;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn checkpoint_seeds_decode_except_truncated() {
    for (path, bytes) in seeds("checkpoint_decode") {
        let decoded = Checkpoint::decode(&bytes);
        if path.extension().is_some_and(|e| e == "sd2c") {
            let ck = decoded.unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(ck.encode(), bytes);
        } else {
            assert!(decoded.is_err());
        }
    }
}

#[test]
fn config_seeds_parse() {
    for (path, bytes) in seeds("run_config") {
        RunConfig::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("experiment_matrix") {
        let m: ExperimentMatrix = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        m.validate().unwrap();
    }
}

#[test]
fn trace_seeds_parse() {
    for (path, bytes) in seeds("trace_jsonl") {
        let records = parse_trace(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!records.is_empty());
    }
}
