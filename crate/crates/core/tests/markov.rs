use std::collections::HashMap;

use itemforge_core::markov::{generate_markov, NGramModel};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ids(seed: u64, len: usize, vocab: u32) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Independent count of every (context, next) occurrence by scanning all
/// positions separately for each distinct context.
fn brute_force_counts(ids: &[u32], order: usize) -> HashMap<(Vec<u32>, u32), u64> {
    let mut out = HashMap::new();
    for t in (order - 1)..ids.len() - 1 {
        let context = ids[t + 1 - order..=t].to_vec();
        *out.entry((context, ids[t + 1])).or_insert(0) += 1;
    }
    out
}

#[test]
fn order_two_counts_match_brute_force_triples() {
    let ids = random_ids(1, 10_000, 12);
    let m = NGramModel::fit(&ids, 2, 12, 0.0).unwrap();
    let oracle = brute_force_counts(&ids, 2);
    let mut n = 0;
    for (ctx, entry) in m.counts() {
        for (&next, &c) in &entry.next {
            assert_eq!(oracle[&(ctx.clone(), next)], c);
            n += 1;
        }
    }
    assert_eq!(n, oracle.len());
}

#[test]
fn order_one_rows_match_count_ratios() {
    let ids = random_ids(2, 5_000, 30);
    let m = NGramModel::fit(&ids, 1, 30, 0.0).unwrap();
    let oracle = brute_force_counts(&ids, 1);
    for prev in 0..30u32 {
        let total: u64 = oracle.iter().filter(|((c, _), _)| c[0] == prev).map(|(_, n)| n).sum();
        let row = m.next_distribution::<f64>(&[prev]).unwrap();
        let sum: f64 = row.probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for next in 0..30u32 {
            let c = oracle.get(&(vec![prev], next)).copied().unwrap_or(0);
            assert_eq!(row.probs[next as usize], c as f64 / total as f64);
            assert_eq!(
                m.exact_probability(&[prev], next).unwrap(),
                Some(Ratio::new(c, total))
            );
        }
    }
}

#[test]
fn homogeneous_under_shuffled_transitions() {
    let ids = random_ids(3, 3_000, 9);
    let fitted = NGramModel::fit(&ids, 3, 9, 0.0).unwrap();
    let mut pairs: Vec<(&[u32], u32)> = ids.windows(4).map(|w| (&w[..3], w[3])).collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let shuffled = NGramModel::fit_transitions(pairs, 3, 9, 0.0).unwrap();
    assert_eq!(fitted, shuffled);
}

#[test]
fn stored_contexts_bounded() {
    for (len, vocab, order) in [(50usize, 40u32, 1usize), (2_000, 4, 3), (300, 8, 2)] {
        let ids = random_ids(len as u64, len, vocab);
        let m = NGramModel::fit(&ids, order, vocab as usize, 0.0).unwrap();
        let bound = (len - order).min((vocab as usize).pow(order as u32));
        assert!(m.stored_contexts() <= bound);
    }
}

#[test]
fn generation_is_reproducible() {
    let ids = random_ids(5, 2_000, 10);
    let m = NGramModel::fit(&ids, 2, 10, 0.1).unwrap();
    let a = generate_markov(&m, &[1, 2], 50, 17).unwrap();
    assert_eq!(a, generate_markov(&m, &[1, 2], 50, 17).unwrap());
    assert_eq!(a.len(), 52);
    assert_eq!(&a[..2], &[1, 2]);
    assert_ne!(a, generate_markov(&m, &[1, 2], 50, 18).unwrap());
}

proptest! {
    #[test]
    fn smoothed_rows_are_stochastic(
        seed in any::<u64>(),
        order in 1usize..4,
        k in 0.0f64..3.0,
        probe in proptest::collection::vec(0u32..16, 3),
    ) {
        let ids = random_ids(seed, 400, 16);
        let m = NGramModel::fit(&ids, order, 16, k).unwrap();
        let ctx = &probe[..order];
        match m.next_distribution::<f64>(ctx) {
            Ok(row) => {
                prop_assert!(row.probs.iter().all(|&p| p >= 0.0));
                prop_assert!((row.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            Err(_) => prop_assert!(k == 0.0 && m.counts().get(ctx).is_none()),
        }
    }
}
