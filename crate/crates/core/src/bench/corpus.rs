//! Synthetic corpora: a hashed higher-order Markov chain with optional latent
//! regimes, a random probabilistic grammar, and raw bytes from a file.

use std::path::PathBuf;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
    Ood,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::HeldOut => 1,
            Split::Ood => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusKind {
    Markov {
        order: usize,
        /// Number of successors with non-zero probability per context.
        branching: usize,
        /// Dirichlet concentration of the successor weights.
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "one")]
        regimes: usize,
        #[serde(default)]
        switch_prob: f64,
        seed: u64,
    },
    Pcfg {
        nonterminals: usize,
        rules_per_nonterminal: usize,
        max_rhs: usize,
        seed: u64,
    },
    Bytes {
        path: PathBuf,
    },
}

fn default_alpha() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    pub generator: CorpusKind,
    pub vocab_size: usize,
    pub split: Split,
    pub n_sequences: usize,
    pub seq_len: usize,
}

impl CorpusSpec {
    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len == 0 {
            return Err(Error::Config(format!("corpus {}: vocab_size >= 2 and seq_len >= 1 required", self.name)));
        }
        match &self.generator {
            CorpusKind::Markov { order, branching, alpha, regimes, switch_prob, .. } => {
                if *order == 0 || *branching == 0 || *branching > self.vocab_size || *regimes == 0 {
                    return Err(Error::Config(format!("corpus {}: bad markov parameters", self.name)));
                }
                if (self.vocab_size as f64).powi(*order as i32) > 2f64.powi(62) {
                    return Err(Error::Config(format!("corpus {}: order too large for the vocabulary", self.name)));
                }
                if !(*alpha > 0.0) || !(0.0..=1.0).contains(switch_prob) {
                    return Err(Error::Config(format!("corpus {}: alpha > 0 and switch_prob in [0, 1]", self.name)));
                }
            }
            CorpusKind::Pcfg { nonterminals, rules_per_nonterminal, max_rhs, .. } => {
                if *nonterminals == 0 || *rules_per_nonterminal == 0 || *max_rhs == 0 {
                    return Err(Error::Config(format!("corpus {}: bad grammar parameters", self.name)));
                }
            }
            CorpusKind::Bytes { .. } => {
                if self.vocab_size != 256 {
                    return Err(Error::Config(format!("corpus {}: byte corpora have vocab_size 256", self.name)));
                }
            }
        }
        Ok(())
    }
}

/// Errors when `ood` shares its generator with `train`.
pub fn check_disjoint(train: &CorpusSpec, ood: &CorpusSpec) -> Result<()> {
    if train.generator == ood.generator {
        return Err(Error::Config(format!(
            "out-of-distribution corpus {} reuses the generator of {}",
            ood.name, train.name
        )));
    }
    Ok(())
}

/// Materializes a corpus. Train and held-out splits share the generator and
/// differ only in the sampling stream.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    match &spec.generator {
        CorpusKind::Markov { order, branching, alpha, regimes, switch_prob, seed } => {
            let chain = MarkovChain {
                vocab: spec.vocab_size,
                order: *order,
                branching: *branching,
                alpha: *alpha,
                regimes: *regimes,
                switch_prob: *switch_prob,
                seed: *seed,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(*seed ^ 0x5eed_0000);
            rng.set_stream(spec.split.stream());
            Ok((0..spec.n_sequences).map(|_| chain.sample(spec.seq_len, &mut rng)).collect())
        }
        CorpusKind::Pcfg { nonterminals, rules_per_nonterminal, max_rhs, seed } => {
            let g = Grammar::random(spec.vocab_size, *nonterminals, *rules_per_nonterminal, *max_rhs, *seed);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed ^ 0x9cf6_0000);
            rng.set_stream(spec.split.stream());
            Ok((0..spec.n_sequences).map(|_| g.sample(spec.seq_len, &mut rng)).collect())
        }
        CorpusKind::Bytes { path } => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let chunks: Vec<Vec<usize>> = bytes
                .chunks_exact(spec.seq_len)
                .map(|c| c.iter().map(|&b| b as usize).collect())
                .collect();
            let cut = chunks.len() * 9 / 10;
            let part = match spec.split {
                Split::Train => &chunks[..cut],
                Split::HeldOut => &chunks[cut..],
                Split::Ood => &chunks[..],
            };
            Ok(part.iter().take(spec.n_sequences).cloned().collect())
        }
    }
}

/// Order-`m` chain whose successor sets are derived from the context on the
/// fly, so the table never has to be stored.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    pub vocab: usize,
    pub order: usize,
    pub branching: usize,
    pub alpha: f64,
    pub regimes: usize,
    pub switch_prob: f64,
    pub seed: u64,
}

impl MarkovChain {
    /// Successors and their probabilities after `context` (the last `order`
    /// tokens) under `regime`.
    pub fn transition(&self, context: &[usize], regime: usize) -> (Vec<usize>, Vec<f64>) {
        let code = context.iter().fold(0u64, |acc, &t| acc * self.vocab as u64 + t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(regime as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(code);
        let succ = index::sample(&mut rng, self.vocab, self.branching).into_vec();
        let gamma = Gamma::new(self.alpha, 1.0).expect("alpha validated");
        let raw: Vec<f64> = (0..self.branching).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
        let total: f64 = raw.iter().sum();
        (succ, raw.into_iter().map(|w| w / total).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut seq: Vec<usize> = (0..self.order.min(len)).map(|_| rng.random_range(0..self.vocab)).collect();
        let mut regime = rng.random_range(0..self.regimes);
        while seq.len() < len {
            if self.regimes > 1 && rng.random::<f64>() < self.switch_prob {
                regime = rng.random_range(0..self.regimes);
            }
            let (succ, probs) = self.transition(&seq[seq.len() - self.order..], regime);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = succ[succ.len() - 1];
            for (t, p) in succ.iter().zip(&probs) {
                cum += p;
                if u < cum {
                    pick = *t;
                    break;
                }
            }
            seq.push(pick);
        }
        seq
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Symbol {
    Terminal(usize),
    NonTerminal(usize),
}

/// Random grammar in which nonterminal `i` only rewrites to terminals and
/// nonterminals `> i`, so every derivation terminates.
#[derive(Clone, Debug)]
pub struct Grammar {
    rules: Vec<Vec<(Vec<Symbol>, f64)>>,
}

impl Grammar {
    pub fn random(vocab: usize, nonterminals: usize, rules: usize, max_rhs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rules = (0..nonterminals)
            .map(|nt| {
                let raw: Vec<(Vec<Symbol>, f64)> = (0..rules)
                    .map(|_| {
                        let len = rng.random_range(1..=max_rhs);
                        let rhs = (0..len)
                            .map(|_| {
                                if nt + 1 < nonterminals && rng.random::<f64>() < 0.4 {
                                    Symbol::NonTerminal(rng.random_range(nt + 1..nonterminals))
                                } else {
                                    Symbol::Terminal(rng.random_range(0..vocab))
                                }
                            })
                            .collect();
                        (rhs, rng.random::<f64>() + 0.05)
                    })
                    .collect();
                let total: f64 = raw.iter().map(|r| r.1).sum();
                raw.into_iter().map(|(rhs, w)| (rhs, w / total)).collect()
            })
            .collect();
        Self { rules }
    }

    fn expand<R: Rng + ?Sized>(&self, nt: usize, out: &mut Vec<usize>, limit: usize, rng: &mut R) {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let options = &self.rules[nt];
        let mut chosen = &options[options.len() - 1].0;
        for (rhs, p) in options {
            cum += p;
            if u < cum {
                chosen = rhs;
                break;
            }
        }
        for s in chosen {
            if out.len() >= limit {
                return;
            }
            match s {
                Symbol::Terminal(t) => out.push(*t),
                Symbol::NonTerminal(n) => self.expand(*n, out, limit, rng),
            }
        }
    }

    /// Concatenated derivations from the start symbol, cut to `len` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            self.expand(0, &mut out, len, rng);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markov(split: Split) -> CorpusSpec {
        CorpusSpec {
            name: "m".into(),
            generator: CorpusKind::Markov { order: 2, branching: 3, alpha: 0.5, regimes: 1, switch_prob: 0.0, seed: 7 },
            vocab_size: 16,
            split,
            n_sequences: 20,
            seq_len: 50,
        }
    }

    #[test]
    fn markov_respects_successor_sets() {
        let spec = markov(Split::Train);
        let CorpusKind::Markov { order, branching, alpha, regimes, switch_prob, seed } = spec.generator.clone() else {
            unreachable!()
        };
        let chain = MarkovChain { vocab: 16, order, branching, alpha, regimes, switch_prob, seed };
        for seq in generate_corpus(&spec).unwrap() {
            assert_eq!(seq.len(), 50);
            for w in seq.windows(3) {
                let (succ, probs) = chain.transition(&w[..2], 0);
                assert!(succ.contains(&w[2]));
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_differ_but_are_reproducible() {
        let a = generate_corpus(&markov(Split::Train)).unwrap();
        assert_eq!(a, generate_corpus(&markov(Split::Train)).unwrap());
        assert_ne!(a, generate_corpus(&markov(Split::HeldOut)).unwrap());
    }

    #[test]
    fn grammar_output_in_vocab() {
        let spec = CorpusSpec {
            name: "g".into(),
            generator: CorpusKind::Pcfg { nonterminals: 6, rules_per_nonterminal: 3, max_rhs: 4, seed: 1 },
            vocab_size: 16,
            split: Split::Ood,
            n_sequences: 5,
            seq_len: 40,
        };
        let seqs = generate_corpus(&spec).unwrap();
        assert!(seqs.iter().all(|s| s.len() == 40 && s.iter().all(|&t| t < 16)));
        assert!(check_disjoint(&markov(Split::Train), &spec).is_ok());
        assert!(check_disjoint(&markov(Split::Train), &markov(Split::Ood)).is_err());
    }

    #[test]
    fn bytes_corpus_reads_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.txt");
        std::fs::write(&path, b"abcdefghijklmnopqrstuvwxyz0123456789").unwrap();
        let spec = CorpusSpec {
            name: "b".into(),
            generator: CorpusKind::Bytes { path: path.clone() },
            vocab_size: 256,
            split: Split::Ood,
            n_sequences: 100,
            seq_len: 5,
        };
        let seqs = generate_corpus(&spec).unwrap();
        assert_eq!(seqs.len(), 7);
        assert_eq!(seqs[0], vec![97, 98, 99, 100, 101]);
        let missing = CorpusSpec { generator: CorpusKind::Bytes { path: dir.path().join("nope") }, ..spec };
        assert!(matches!(generate_corpus(&missing), Err(Error::Io { .. })));
    }
}
