use afa_core::corpus::{Batch, MASK, PAD};
use afa_core::masking::{apply_mask, log_policy_prob, select, SelectionMode};
use afa_core::nn::{EncoderDims, Mode};
use afa_core::target::{TargetDims, TargetModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every ordered selection of `k` distinct positions out of `n`.
fn ordered_draws(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for prefix in ordered_draws(n, k - 1) {
        for i in 0..n {
            if !prefix.contains(&i) {
                let mut p = prefix.clone();
                p.push(i);
                out.push(p);
            }
        }
    }
    out
}

/// Top-k by scanning: repeatedly take the first maximum among the remaining positions.
fn brute_top_k(a: &[f64], k: usize) -> Vec<usize> {
    let mut taken = Vec::new();
    for _ in 0..k.min(a.len()) {
        let mut best: Option<usize> = None;
        for i in 0..a.len() {
            if taken.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| a[i] > a[b]) {
                best = Some(i);
            }
        }
        taken.push(best.unwrap());
    }
    taken
}

#[test]
fn ordered_draw_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=6 {
        for k in 1..=n {
            for _ in 0..5 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = ordered_draws(n, k)
                    .iter()
                    .map(|o| log_policy_prob(&a, o).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "n={n} k={k}: {total}");
            }
        }
    }
}

#[test]
fn greedy_matches_brute_force_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut branch = ChaCha8Rng::seed_from_u64(13);
    let mut sample = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=4);
        // coarse values so ties are common
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let sel = select(&a, k, 0.0, &mut branch, &mut sample).unwrap();
        assert_eq!(sel.indices, brute_top_k(&a, k), "a={a:?} k={k}");
        assert_eq!(sel.mode, SelectionMode::Greedy);
        assert_eq!(sel.truncated, k > n);
    }
}

#[test]
fn explore_frequency_matches_epsilon() {
    for &eps in &[0.1, 0.3, 0.5] {
        let mut branch = ChaCha8Rng::seed_from_u64(21);
        let mut sample = ChaCha8Rng::seed_from_u64(22);
        let trials = 10_000;
        let a = [0.4, 0.3, 0.2, 0.1];
        let explored = (0..trials)
            .filter(|_| select(&a, 2, eps, &mut branch, &mut sample).unwrap().mode == SelectionMode::Explore)
            .count();
        // 99% normal-approximation interval for a binomial proportion
        let sd = (eps * (1.0 - eps) / trials as f64).sqrt();
        let freq = explored as f64 / trials as f64;
        assert!((freq - eps).abs() < 2.5758 * sd, "eps={eps} freq={freq}");
    }
}

#[test]
fn explore_subsets_are_uniform() {
    let mut branch = ChaCha8Rng::seed_from_u64(31);
    let mut sample = ChaCha8Rng::seed_from_u64(32);
    let mut counts = [0usize; 5];
    let trials = 20_000;
    for _ in 0..trials {
        let sel = select(&[0.9, 0.05, 0.03, 0.01, 0.01], 1, 1.0, &mut branch, &mut sample).unwrap();
        counts[sel.indices[0]] += 1;
    }
    for c in counts {
        let p = c as f64 / trials as f64;
        assert!((p - 0.2).abs() < 0.015, "{counts:?}");
    }
}

fn model(positional: bool) -> TargetModel {
    let dims = TargetDims {
        encoder: EncoderDims {
            vocab: 30,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            positional,
        },
        num_classes: 2,
    };
    TargetModel::new(dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions_without_pad_mass(
        seqs in prop::collection::vec(prop::collection::vec(3u32..30, 1..9), 1..5)
    ) {
        let labels = vec![0; seqs.len()];
        let batch = Batch::from_sequences(seqs, labels).unwrap();
        let out = model(true).forward(&batch, Mode::Infer).unwrap();
        for b in 0..batch.len() {
            let row = out.attention.row(b);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (i, &v) in row.iter().enumerate() {
                if !batch.pad_mask[b][i] {
                    prop_assert!(v < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masking_changes_exactly_the_selected_positions(
        ids in prop::collection::vec(3u32..30, 1..12),
        k in 1usize..5,
        eps in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let n = ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let sel = select(&a, k, eps, &mut rng.clone(), &mut rng).unwrap();
        let batch = Batch::from_sequences(vec![ids.clone()], vec![0]).unwrap();
        let masked = apply_mask(&batch, &[&sel]).unwrap();
        let changed = (0..n).filter(|&i| masked.token_ids[0][i] != ids[i]).count();
        prop_assert_eq!(changed, sel.indices.len());
        prop_assert_eq!(sel.indices.len(), k.min(n));
        prop_assert!(sel.indices.iter().all(|&i| masked.token_ids[0][i] == MASK));
        prop_assert!(masked.token_ids[0].iter().all(|&t| t != PAD));
    }

    #[test]
    fn permuting_distractors_permutes_attention(
        mut ids in prop::collection::vec(3u32..30, 4..9),
        i in 0usize..3,
        j in 0usize..3,
    ) {
        // the last token is the query; swap two earlier ones
        let n = ids.len();
        ids[n - 1] = 3;
        let m = model(false);
        let mut swapped = ids.clone();
        swapped.swap(i, j);
        let a = m.forward(&Batch::from_sequences(vec![ids], vec![0]).unwrap(), Mode::Infer).unwrap();
        let b = m.forward(&Batch::from_sequences(vec![swapped], vec![0]).unwrap(), Mode::Infer).unwrap();
        let (ra, rb) = (a.attention_row(0), b.attention_row(0));
        // summation order differs, so allow rounding
        prop_assert!((ra[i] - rb[j]).abs() < 1e-12);
        prop_assert!((ra[j] - rb[i]).abs() < 1e-12);
        prop_assert!((ra[n - 1] - rb[n - 1]).abs() < 1e-12);
    }
}
