use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sd2::model::{sample_with_uniform, KvCache, ModelConfig, Role, TransformerModel};
use sd2::specdec::{
    autoregressive, draft, generate, generate_with, residual_distribution, verify_walk, DecodeMode, DraftBlock,
    EngineConfig, FinalSource, ScriptedUniforms, UniformSource,
};
use sd2::steering::{SteeringDims, SteeringState, VariantKind};
use sd2::tensor::{argmax, softmax, Tensor};

const V: usize = 13;

fn verifier_cfg() -> ModelConfig {
    ModelConfig::new(3, 16, 2, 32, V, 96).with_taps(0, 1, 2)
}

fn drafter_cfg() -> ModelConfig {
    ModelConfig::new(2, 8, 2, 16, V, 96).with_taps(0, 1, 1)
}

fn pair(seed: u64) -> (TransformerModel, TransformerModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = TransformerModel::init(verifier_cfg(), Role::Verifier, &mut rng).unwrap();
    let d = TransformerModel::init(drafter_cfg(), Role::Drafter, &mut rng).unwrap();
    (sharpen(v, 40.0), sharpen(d, 40.0))
}

/// Scales the unembedding so random models have peaked, diverse distributions.
fn sharpen(mut m: TransformerModel, by: f32) -> TransformerModel {
    m.unembedding = m.unembedding.map(|x| x * by);
    m
}

fn random_steering(kind: VariantKind, seed: u64) -> SteeringState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SteeringState::init(kind, SteeringDims::new(&verifier_cfg(), &drafter_cfg()), &mut rng);
    for (_, t) in s.params_mut().into_iter().skip(2) {
        *t = Tensor::randn(t.shape(), 0.5, &mut rng);
    }
    s
}

#[test]
fn greedy_output_matches_verifier_greedy() {
    for seed in 0..12u64 {
        let (v, d) = pair(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let prompt: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..V)).collect();
        let reference = autoregressive(&v, &prompt, 30, 0.0, None, &mut rng).unwrap();
        for mode in DecodeMode::ALL {
            let steering = random_steering(VariantKind::ALL[seed as usize % 3], seed);
            let mut e = EngineConfig::new(mode, 0.0, 30, seed);
            e.k = 1 + seed as usize % 8;
            let out = generate(&e, &v, &d, Some(&steering), &prompt).unwrap();
            assert_eq!(out.tokens, reference, "seed {seed} mode {mode:?}");
        }
    }
}

#[test]
fn self_drafting_accepts_everything() {
    let (v, _) = pair(3);
    let d = v.with_role(Role::Drafter);
    for temperature in [0.0, 1.0] {
        let e = EngineConfig::new(DecodeMode::Pretrained, temperature, 45, 7);
        let out = generate(&e, &v, &d, None, &[1, 2, 3]).unwrap();
        assert!(out.blocks.iter().all(|b| b.accepted == b.drafted), "T={temperature}");
        assert!(out.blocks.iter().all(|b| b.final_source == FinalSource::Bonus));
        assert_eq!(out.tokens.len(), 45);
    }
}

#[test]
fn scripted_rejection_walk() {
    // pV[x̂]=0.2, pD[x̂]=0.8 at the first draft; u = 0.9 rejects, the residual
    // [0.6, 0.4] - [0.2, 0.8] -> [1, 0] then yields token 0 for any draw.
    let block = DraftBlock {
        tokens: vec![1, 0],
        drafter_dists: vec![vec![0.2f64, 0.8], vec![0.5, 0.5]],
        steering_used: None,
    };
    let p_v = vec![vec![0.8, 0.2], vec![0.5, 0.5], vec![0.5, 0.5]];
    let mut rng = ScriptedUniforms::new(vec![0.9, 0.77]);
    let (n, tok, src) = verify_walk(&p_v, &block, 1.0, &mut rng).unwrap();
    assert_eq!((n, tok, src), (0, 0, FinalSource::RejectionResample));
    assert_eq!(rng.consumed(), 2);

    // u = 0.1 < 0.25 accepts the first draft; then u = 0.3 < 1 the second;
    // bonus from the last row with u = 0.6 -> token 1.
    let mut rng = ScriptedUniforms::new(vec![0.1, 0.3, 0.6]);
    let (n, tok, src) = verify_walk(&p_v, &block, 1.0, &mut rng).unwrap();
    assert_eq!((n, tok, src), (2, 1, FinalSource::Bonus));

    // T = 0 consumes nothing.
    let mut rng = ScriptedUniforms::new(vec![]);
    let (n, tok, _) = verify_walk(&p_v, &block, 0.0, &mut rng).unwrap();
    assert_eq!((n, tok), (0, 0));
}

#[test]
fn max_new_tokens_one_is_one_block() {
    let (v, d) = pair(4);
    for t in [0.0, 1.0] {
        let out = generate(&EngineConfig::new(DecodeMode::Pretrained, t, 1, 0), &v, &d, None, &[4]).unwrap();
        assert_eq!(out.blocks.len(), 1);
        assert_eq!(out.tokens.len(), 1);
    }
}

#[test]
fn eos_stops_generation_inclusive() {
    let (v, d) = pair(5);
    let plain = generate(&EngineConfig::new(DecodeMode::Pretrained, 0.0, 40, 0), &v, &d, None, &[2, 3]).unwrap();
    let eos = plain.tokens[5];
    let first = plain.tokens.iter().position(|&t| t == eos).unwrap();
    let mut e = EngineConfig::new(DecodeMode::Pretrained, 0.0, 40, 0);
    e.eos_token = Some(eos);
    let out = generate(&e, &v, &d, None, &[2, 3]).unwrap();
    assert_eq!(out.tokens, plain.tokens[..=first]);
}

#[test]
fn capacity_overflow_is_flagged() {
    let (v, d) = pair(6);
    let out = generate(&EngineConfig::new(DecodeMode::Pretrained, 1.0, 200, 0), &v, &d, None, &[1; 10]).unwrap();
    assert!(out.truncated);
    assert_eq!(out.tokens.len(), 86);
}

#[test]
fn zero_init_steering_is_transparent() {
    let (v, d) = pair(7);
    for kind in VariantKind::ALL {
        let s = SteeringState::init(kind, SteeringDims::new(&verifier_cfg(), &drafter_cfg()), &mut ChaCha8Rng::seed_from_u64(1));
        let a = generate(&EngineConfig::new(DecodeMode::Pretrained, 1.0, 40, 3), &v, &d, None, &[5, 6]).unwrap();
        let b = generate(&EngineConfig::new(DecodeMode::Sd2, 1.0, 40, 3), &v, &d, Some(&s), &[5, 6]).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.blocks, b.blocks);
    }
}

#[test]
fn sd2_mode_requires_steering() {
    let (v, d) = pair(8);
    assert!(generate(&EngineConfig::new(DecodeMode::Sd2, 0.0, 4, 0), &v, &d, None, &[1]).is_err());
    let mut e = EngineConfig::new(DecodeMode::Sd2, 0.0, 4, 0);
    e.steering_enabled = false;
    assert!(generate(&e, &v, &d, None, &[1]).is_ok());
}

#[test]
fn cached_draft_matches_full_recompute() {
    let (_, d) = pair(9);
    let prefix = [3usize, 1, 4, 1, 5];
    let mut cache = KvCache::new(&d.config);
    d.forward(&prefix[..4], Some(&mut cache), None, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = draft(&d, &mut cache, &prefix[4..], None, 6, 1.0, &mut rng).unwrap();
    assert_eq!(cache.len(), 5 + 5);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seq = prefix.to_vec();
    for i in 0..6 {
        let logits = d.forward(&seq, None, None, false).unwrap().logits;
        let dist = softmax(logits.row(seq.len() - 1), 1.0);
        assert_eq!(dist, block.drafter_dists[i]);
        let tok = sample_with_uniform(&dist, rng.random::<f64>()).unwrap();
        assert_eq!(tok, block.tokens[i]);
        assert!(dist[tok] > 0.0);
        seq.push(tok);
    }
}

/// Classic speculative sampling written straight through, full recompute,
/// no caches.
fn reference_trace(v: &TransformerModel, d: &TransformerModel, prompt: &[usize], k: usize, budget: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    let mut accepted_counts = Vec::new();
    let dist_at = |m: &TransformerModel, s: &[usize]| {
        let l = m.forward(s, None, None, false).unwrap().logits;
        softmax(l.row(s.len() - 1), 1.0)
    };
    while seq.len() - prompt.len() < budget {
        let mut drafted = Vec::new();
        let mut q = Vec::new();
        let mut ctx = seq.clone();
        for _ in 0..k {
            let dist = dist_at(d, &ctx);
            let tok = sample_with_uniform(&dist, rng.random::<f64>()).unwrap();
            drafted.push(tok);
            q.push(dist);
            ctx.push(tok);
        }
        let mut n = 0;
        let mut fin = None;
        let mut ctx = seq.clone();
        for i in 0..k {
            let p = dist_at(v, &ctx);
            let x = drafted[i];
            let a = (p[x] as f64 / q[i][x] as f64).min(1.0);
            if rng.random::<f64>() < a {
                n += 1;
                ctx.push(x);
            } else {
                let r = residual_distribution(&p, &q[i]);
                fin = Some(sample_with_uniform(&r, rng.random::<f64>()).unwrap());
                break;
            }
        }
        let fin = fin.unwrap_or_else(|| sample_with_uniform(&dist_at(v, &ctx), rng.random::<f64>()).unwrap());
        accepted_counts.push(n);
        seq.extend_from_slice(&drafted[..n]);
        seq.push(fin);
    }
    seq.truncate(prompt.len() + budget);
    (seq[prompt.len()..].to_vec(), accepted_counts)
}

#[test]
fn matches_straight_line_reference_trace() {
    for seed in 0..4 {
        let (v, d) = pair(20 + seed);
        let mut e = EngineConfig::new(DecodeMode::Pretrained, 1.0, 24, seed);
        e.k = 4;
        let out = generate(&e, &v, &d, None, &[7, 8, 9]).unwrap();
        let (tokens, counts) = reference_trace(&v, &d, &[7, 8, 9], 4, 24, seed);
        assert_eq!(out.tokens, tokens);
        assert_eq!(out.accepted_counts(), counts);
    }
}

fn draws_per_block(drafted: usize, accepted: usize) -> usize {
    drafted + (accepted + 1).min(drafted) + 1
}

struct Recording<R>(R, Vec<f64>);

impl<R: Rng> UniformSource for Recording<R> {
    fn next_uniform(&mut self) -> f64 {
        let u = self.0.random::<f64>();
        self.1.push(u);
        u
    }
}

#[test]
fn rollback_matches_restart_from_accepted_prefix() {
    let (v, d) = pair(30);
    let prompt = [2usize, 4];
    let e = EngineConfig::new(DecodeMode::Pretrained, 1.0, 40, 0);
    let mut rec = Recording(ChaCha8Rng::seed_from_u64(11), Vec::new());
    let full = generate_with(&e, &v, &d, None, &prompt, &mut rec).unwrap();
    let total: usize = full.blocks.iter().map(|b| draws_per_block(b.drafted, b.accepted)).sum();
    assert_eq!(total, rec.1.len());

    let mut used = 0;
    for (j, b) in full.blocks.iter().enumerate().take(full.blocks.len() - 1) {
        used += draws_per_block(b.drafted, b.accepted);
        let mut restart_prompt = prompt.to_vec();
        restart_prompt.extend_from_slice(&full.tokens[..b.position]);
        let mut e2 = e.clone();
        e2.max_new_tokens = e.max_new_tokens - b.position;
        let mut script = ScriptedUniforms::new(rec.1[used..].to_vec());
        let rest = generate_with(&e2, &v, &d, None, &restart_prompt, &mut script).unwrap();
        assert_eq!(rest.tokens, full.tokens[b.position..], "after block {j}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn acceptance_bounds_hold(seed in 0u64..1000, k in 1usize..9, t in prop_oneof![Just(0.0), Just(1.0), Just(0.7)]) {
        let (v, d) = pair(seed);
        let mut e = EngineConfig::new(DecodeMode::Pretrained, t, 20, seed);
        e.k = k;
        let out = generate(&e, &v, &d, None, &[1, 2]).unwrap();
        prop_assert_eq!(out.tokens.len(), 20);
        for b in &out.blocks {
            prop_assert!(b.accepted <= b.drafted && b.drafted <= k);
            prop_assert!(b.emitted >= 1 && b.emitted <= b.accepted + 1);
        }
        prop_assert!(out.tokens.iter().all(|&x| x < V));
    }

    #[test]
    fn steered_greedy_is_lossless(seed in 0u64..1000, variant in 0usize..3) {
        let (v, d) = pair(seed);
        let s = random_steering(VariantKind::ALL[variant], seed);
        let prompt = [seed as usize % V, 3];
        let reference = autoregressive(&v, &prompt, 16, 0.0, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = generate(&EngineConfig::new(DecodeMode::Sd2, 0.0, 16, seed), &v, &d, Some(&s), &prompt).unwrap();
        prop_assert_eq!(out.tokens, reference);
    }
}

#[test]
fn first_token_distribution_matches_verifier() {
    // Tiny vocabulary, 2-layer verifier; exact next-token distribution vs
    // empirical first emitted token of speculative rounds.
    let vc = ModelConfig::new(2, 8, 2, 16, 5, 32).with_taps(0, 1, 1);
    let dc = ModelConfig::new(1, 8, 2, 16, 5, 32).with_taps(0, 0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let v = sharpen(TransformerModel::init(vc, Role::Verifier, &mut rng).unwrap(), 60.0);
    let d = sharpen(TransformerModel::init(dc, Role::Drafter, &mut rng).unwrap(), 60.0);
    let prompt = [1usize, 3, 0];
    let exact = v.next_token_distribution(&prompt, None, None, 1.0).unwrap();
    let rounds = 20_000;
    let mut counts = [0usize; 5];
    let mut e = EngineConfig::new(DecodeMode::Pretrained, 1.0, 1, 0);
    e.k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..rounds {
        let out = generate_with(&e, &v, &d, None, &prompt, &mut rng).unwrap();
        counts[out.tokens[0]] += 1;
    }
    let tv: f64 = 0.5 * (0..5).map(|i| (counts[i] as f64 / rounds as f64 - exact[i] as f64).abs()).sum::<f64>();
    assert!(tv < 0.02, "tv {tv}, exact {exact:?}, counts {counts:?}");
    assert!(argmax(&exact) < 5);
}
