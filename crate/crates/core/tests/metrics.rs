use mret::metrics::{plcc, rank_average_ties, srcc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank of `v` = 1 + #less + (#equal − 1)/2, counted pairwise.
fn brute_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let less = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Stable sort, then an explicit scan over runs of equal values.
fn brute_srcc(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        for end in 1..=idx.len() {
            if end == idx.len() || v[idx[end]] != v[idx[start]] {
                let avg = (start + 1..=end).map(|k| k as f64).sum::<f64>() / (end - start) as f64;
                for &i in &idx[start..end] {
                    r[i] = avg;
                }
                start = end;
            }
        }
        r
    };
    textbook_pearson(&rank(x), &rank(y))
}

#[test]
fn ranks_match_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
    assert_eq!(rank_average_ties(&values), brute_ranks(&values));
}

#[test]
fn srcc_matches_brute_force_on_random_cases_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(2..=20);
        let levels = rng.gen_range(2..=8);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.5).collect();
        let (Ok(fast), true) = (srcc(&x, &y), x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0])) else {
            continue;
        };
        assert!((fast - brute_srcc(&x, &y)).abs() < 1e-12, "{x:?} {y:?}");
        assert_eq!(rank_average_ties(&x), brute_ranks(&x));
        checked += 1;
    }
}

fn distinct_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

proptest! {
    #[test]
    fn srcc_invariant_under_increasing_transforms((x, y) in distinct_pairs()) {
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let base = srcc(&x, &y).unwrap();
        let ex: Vec<f64> = x.iter().map(|v| (v / 10.0).exp()).collect();
        let ay: Vec<f64> = y.iter().map(|v| v * 10.0 + 3.0).collect();
        prop_assert_eq!(srcc(&ex, &y).unwrap(), base);
        prop_assert_eq!(srcc(&x, &ay).unwrap(), base);
    }

    #[test]
    fn plcc_invariant_under_positive_affine((x, y) in distinct_pairs(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let base = plcc(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&tx, &y).unwrap() - base).abs() < 1e-12);
        prop_assert!((plcc(&x, &tx).unwrap() - plcc(&x, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_bounded((x, y) in distinct_pairs()) {
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let (p, s) = (plcc(&x, &y).unwrap(), srcc(&x, &y).unwrap());
        prop_assert_eq!(p, plcc(&y, &x).unwrap());
        prop_assert_eq!(s, srcc(&y, &x).unwrap());
        prop_assert!((-1.0..=1.0).contains(&p) && (-1.0..=1.0).contains(&s));
    }
}
