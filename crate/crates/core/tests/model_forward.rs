use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sd2::model::{BiasSet, KvCache, ModelConfig, Role, TransformerModel};
use sd2::tensor::{Tape, Tensor};

fn config() -> ModelConfig {
    ModelConfig::new(3, 16, 2, 24, 11, 64).with_taps(0, 1, 2)
}

fn model(seed: u64) -> TransformerModel {
    TransformerModel::init(config(), Role::Verifier, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn cached_forward_matches_full_forward_bitwise() {
    let m = model(1);
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
    let full = m.forward(&tokens, None, None, true).unwrap();
    let mut cache = KvCache::new(&m.config);
    let mut rows = Vec::new();
    let mut taps = Vec::new();
    for chunk in [&tokens[..4], &tokens[4..5], &tokens[5..8], &tokens[8..]] {
        let out = m.forward(chunk, Some(&mut cache), None, true).unwrap();
        let t = out.taps.unwrap();
        for r in 0..chunk.len() {
            rows.extend_from_slice(out.logits.row(r));
            taps.push(t.at(r));
        }
    }
    assert_eq!(cache.len(), tokens.len());
    let cached = Tensor::new(vec![tokens.len(), 11], rows).unwrap();
    assert!(cached.bit_eq(&full.logits));
    let ft = full.taps.unwrap();
    for (r, t) in taps.iter().enumerate() {
        assert_eq!(*t, ft.at(r));
    }
}

#[test]
fn truncated_cache_recomputes_identically() {
    let m = model(2);
    let mut cache = KvCache::new(&m.config);
    m.forward(&[1, 2, 3, 4, 5], Some(&mut cache), None, false).unwrap();
    let a = m.forward(&[7, 8], Some(&mut cache), None, false).unwrap();
    cache.truncate(5);
    m.forward(&[9], Some(&mut cache), None, false).unwrap();
    cache.truncate(5);
    let b = m.forward(&[7, 8], Some(&mut cache), None, false).unwrap();
    assert!(a.logits.bit_eq(&b.logits));
}

#[test]
fn zero_bias_is_identity() {
    let m = model(3);
    let tokens = [2, 7, 1, 8];
    let plain = m.forward(&tokens, None, None, false).unwrap();
    let zeros = BiasSet::zeros_up(&m.config);
    let hooked = m.forward(&tokens, None, Some(&zeros), false).unwrap();
    assert!(plain.logits.bit_eq(&hooked.logits));
    let out = BiasSet::MlpOutput(vec![Tensor::zeros(&[16]); 3]);
    let hooked = m.forward(&tokens, None, Some(&out), false).unwrap();
    assert!(plain.logits.bit_eq(&hooked.logits));
}

#[test]
fn nonzero_bias_changes_output() {
    let m = model(4);
    let tokens = [2, 7, 1];
    let plain = m.forward(&tokens, None, None, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = BiasSet::UpProjection((0..3).map(|_| Tensor::randn(&[24], 1.0, &mut rng)).collect());
    let hooked = m.forward(&tokens, None, Some(&b), false).unwrap();
    assert!(plain.logits.max_abs_diff(&hooked.logits) > 1e-4);
}

#[test]
fn batched_rows_match_single_sequences_bitwise() {
    let m = model(5);
    let seqs = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 0, 1]];
    let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
    let mut tape = Tape::no_grad();
    let bound = m.bind(&mut tape, false);
    let out = m.forward_on_tape(&mut tape, &bound, &flat, 3, None, None, false).unwrap();
    let batched = tape.value(out.logits);
    for (b, s) in seqs.iter().enumerate() {
        let single = m.forward(s, None, None, false).unwrap();
        for r in 0..4 {
            assert_eq!(batched.row(b * 4 + r), single.logits.row(r));
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let m: TransformerModel<f64> = model(6).cast();
    let tokens = [1, 4, 2, 8, 5, 7];
    let target = {
        let mut t = Tensor::<f64>::zeros(&[6, 11]);
        for r in 0..6 {
            t.data_mut()[r * 11 + tokens[(r + 1) % 6]] = 1.0;
        }
        t
    };
    let loss_of = |mm: &TransformerModel<f64>| -> (f64, Option<Vec<Tensor<f64>>>) {
        let mut tape = Tape::new();
        let bound = mm.bind(&mut tape, true);
        let out = mm.forward_on_tape(&mut tape, &bound, &tokens, 2, None, None, false).unwrap();
        let loss = tape.kl_div(out.logits, &target, &[1.0; 6]).unwrap();
        let value = tape.value(loss).data()[0];
        tape.backward(loss).unwrap();
        let grads = bound.vars().iter().map(|v| tape.grad(*v).unwrap().clone()).collect();
        (value, Some(grads))
    };
    let (_, grads) = loss_of(&m);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        for _ in 0..3 {
            let numel = grads[pi].numel();
            let j = rng.random_range(0..numel);
            let h = 1e-5;
            let mut plus = m.clone();
            plus.params_mut()[pi].1.data_mut()[j] += h;
            let mut minus = m.clone();
            minus.params_mut()[pi].1.data_mut()[j] -= h;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let analytic = grads[pi].data()[j];
            let err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            assert!(err < 1e-5 || (numeric - analytic).abs() < 1e-9, "{name}[{j}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn frozen_binding_produces_no_gradients() {
    let m = model(7);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let out = m.forward_on_tape(&mut tape, &bound, &[1, 2], 1, None, None, false).unwrap();
    let loss = tape.sum(out.logits);
    tape.backward(loss).unwrap();
    assert!(bound.vars().iter().all(|v| tape.grad(*v).is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prefix_logits_ignore_future_tokens(
        prefix in proptest::collection::vec(0usize..11, 1..8),
        suffix in proptest::collection::vec(0usize..11, 1..6),
        other in proptest::collection::vec(0usize..11, 1..6),
    ) {
        let m = model(8);
        let a: Vec<usize> = prefix.iter().chain(&suffix).copied().collect();
        let b: Vec<usize> = prefix.iter().chain(&other).copied().collect();
        let la = m.forward(&a, None, None, false).unwrap().logits;
        let lb = m.forward(&b, None, None, false).unwrap().logits;
        for r in 0..prefix.len() {
            prop_assert_eq!(la.row(r), lb.row(r));
        }
    }

    #[test]
    fn cached_chunks_match_full(tokens in proptest::collection::vec(0usize..11, 2..20), split in 1usize..19) {
        let split = split.min(tokens.len() - 1);
        let m = model(9);
        let full = m.forward(&tokens, None, None, false).unwrap().logits;
        let mut cache = KvCache::new(&m.config);
        m.forward(&tokens[..split], Some(&mut cache), None, false).unwrap();
        let tail = m.forward(&tokens[split..], Some(&mut cache), None, false).unwrap().logits;
        for r in 0..tokens.len() - split {
            prop_assert_eq!(tail.row(r), full.row(split + r));
        }
    }
}
