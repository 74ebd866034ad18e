use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ztrans_core::autodiff::grad_check_many;
use ztrans_core::linalg::cosine;
use ztrans_core::train::{
    cross_entropy_loss, lclr_loss, lclr_loss_graph, lclr_samples, lr_schedule, total_loss, LclrBatchView,
};
use ztrans_core::{Graph, Matrix, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Per-anchor contrastive terms computed directly from the drawn samples.
fn reference_terms(heads: &Matrix, languages: &[usize], ids: &[u64], k: usize, seed: u64) -> Vec<(f64, usize)> {
    lclr_samples(languages, ids, k, seed)
        .iter()
        .map(|s| {
            let sim = |j: usize| cosine(heads.row(s.anchor), heads.row(j)).unwrap();
            let pos = sim(s.positive).exp();
            let neg: f64 = s.negatives.iter().map(|&j| sim(j).exp()).sum();
            (-(pos / (pos + neg)).ln(), s.negatives.len())
        })
        .collect()
}

#[test]
fn uniform_logits_give_log_vocab() {
    for v in [2, 4, 17, 100] {
        let l = cross_entropy_loss(&Matrix::zeros(3, v), &[Some(0), Some(v - 1), Some(1)], 0.0).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothed_cross_entropy_matches_target_distribution_form() {
    // q = (1 − ε)·onehot + ε/V, loss = −Σ q log p
    let logits = Matrix::from_rows(&[vec![4.0, -1.0, 0.5, 0.0], vec![0.0, 9.0, 0.0, -3.0]]).unwrap();
    let targets = [Some(0), Some(1)];
    let eps = 0.1;
    let mut expected = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (j, x) in row.iter().enumerate() {
            let q = eps / 4.0 + if Some(j) == *t { 1.0 - eps } else { 0.0 };
            expected -= q * (x.exp() / z).ln();
        }
    }
    expected /= 2.0;
    let l = cross_entropy_loss(&logits, &targets, eps).unwrap();
    assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
}

#[test]
fn padding_rows_are_ignored() {
    let logits = random(3, 5, 1);
    let with_pad = cross_entropy_loss(&logits, &[Some(2), None, Some(4)], 0.0).unwrap();
    let rows = Matrix::from_rows(&[logits.row(0).to_vec(), logits.row(2).to_vec()]).unwrap();
    let without = cross_entropy_loss(&rows, &[Some(2), Some(4)], 0.0).unwrap();
    assert!((with_pad - without).abs() < 1e-15);
}

#[test]
fn lclr_equal_similarity_is_log_one_plus_k() {
    // 4 languages × 3 examples, k clipped to the 9 other-language examples or to k
    let heads = Matrix::from_rows(&vec![vec![0.3, -0.2, 0.7]; 12]).unwrap();
    let languages: Vec<usize> = (0..12).map(|i| i % 4).collect();
    for k in [1, 5, 9, 30] {
        let view = LclrBatchView {
            heads: heads.clone(),
            languages: languages.clone(),
            ids: (100..112).collect(),
            seed: 3,
        };
        let k_eff = k.min(9);
        let expected = 12.0 * (1.0 + k_eff as f64).ln();
        assert!((lclr_loss(&view, k).unwrap() - expected).abs() < 1e-12, "k={k}");
    }
}

#[test]
fn lclr_single_negative_logistic_case() {
    let heads = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.5, 0.0], vec![-1.0, 0.0], vec![-3.0, 0.0]]).unwrap();
    let view = LclrBatchView {
        heads,
        languages: vec![0, 0, 1, 1],
        ids: vec![5, 6, 7, 8],
        seed: 11,
    };
    let term = (1.0 + (-2f64).exp()).ln();
    assert!((term - 0.12693).abs() < 1e-5);
    assert!((lclr_loss(&view, 1).unwrap() - 4.0 * term).abs() < 1e-12);
}

#[test]
fn lclr_with_unique_languages_is_zero() {
    let view = LclrBatchView {
        heads: random(5, 4, 2),
        languages: vec![0, 1, 2, 3, 4],
        ids: (0..5).collect(),
        seed: 1,
    };
    assert_eq!(lclr_loss(&view, 30).unwrap(), 0.0);
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let heads = random(6, 3, 4);
    let logits = random(6, 5, 5);
    let samples = lclr_samples(&[0, 0, 1, 1, 2, 2], &[1, 2, 3, 4, 5, 6], 30, 9);
    let targets: Vec<Option<usize>> = (0..6).map(|i| Some(i % 5)).collect();
    let to_tensor = |m: &Matrix| Tensor::matrix(m.rows(), m.cols(), m.values().to_vec()).unwrap();
    let report = grad_check_many(
        |g: &mut Graph, v| {
            let ce = g.cross_entropy(v[1], &targets, 0.1)?;
            let ctr = lclr_loss_graph(g, v[0], &samples, false)?;
            total_loss(g, ce, ctr)
        },
        &[to_tensor(&heads), to_tensor(&logits)],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lclr_terms_are_bounded_and_sum_to_the_loss(
        seed in any::<u64>(),
        n in 2usize..24,
        langs in 1usize..5,
        k in 1usize..8,
    ) {
        let heads = random(n, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let languages: Vec<usize> = (0..n).map(|_| rng.random_range(0..langs)).collect();
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        let terms = reference_terms(&heads, &languages, &ids, k, seed);
        let mut total = 0.0;
        for &(t, k_eff) in &terms {
            prop_assert!(k_eff >= 1 && k_eff <= k);
            let lo = (1.0 + k_eff as f64 * (-2f64).exp()).ln();
            let hi = (1.0 + k_eff as f64 * 2f64.exp()).ln();
            prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12, "{} outside [{}, {}]", t, lo, hi);
            total += t;
        }
        let view = LclrBatchView { heads, languages, ids, seed };
        let loss = lclr_loss(&view, k).unwrap();
        prop_assert!((loss - total).abs() < 1e-9 * (1.0 + total));
    }

    #[test]
    fn lclr_is_invariant_to_batch_order(seed in any::<u64>(), n in 2usize..20) {
        let heads = random(n, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let languages: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let ids: Vec<u64> = (0..n as u64).map(|i| 1000 + i).collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let base = lclr_loss(&LclrBatchView { heads: heads.clone(), languages: languages.clone(), ids: ids.clone(), seed }, 4).unwrap();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| heads.row(i).to_vec()).collect();
        let shuffled = LclrBatchView {
            heads: Matrix::from_rows(&rows).unwrap(),
            languages: order.iter().map(|&i| languages[i]).collect(),
            ids: order.iter().map(|&i| ids[i]).collect(),
            seed,
        };
        let moved = lclr_loss(&shuffled, 4).unwrap();
        prop_assert!((base - moved).abs() < 1e-10 * (1.0 + base));
    }

    #[test]
    fn unsmoothed_cross_entropy_is_plain_nll(seed in any::<u64>(), rows in 1usize..6, v in 2usize..12) {
        let logits = random(rows, v, seed);
        let targets: Vec<Option<usize>> = (0..rows).map(|i| Some((i * 5 + seed as usize) % v)).collect();
        let mut nll = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            nll -= (row[t.unwrap()].exp() / z).ln();
        }
        nll /= rows as f64;
        prop_assert!((cross_entropy_loss(&logits, &targets, 0.0).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_warmup_then_inverse_sqrt(step in 1u64..100_000, warmup in 1u64..10_000) {
        let lr = lr_schedule(step, 1.0, warmup);
        let expected = (step as f64 / warmup as f64).min((warmup as f64 / step as f64).sqrt());
        prop_assert!((lr - expected).abs() < 1e-15);
        prop_assert!(lr <= 1.0);
    }
}
