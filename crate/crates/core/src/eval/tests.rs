use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exhaustive maximum over injections of the shorter side into the longer.
fn brute_force(score: &[f64], rows: usize, cols: usize) -> f64 {
    let n = rows.max(cols);
    let mut best = f64::NEG_INFINITY;
    for p in permutations(n) {
        let s: f64 = (0..rows)
            .filter(|&r| p[r] < cols)
            .map(|r| score[r * cols + p[r]])
            .sum();
        best = best.max(s);
    }
    best
}

#[test]
fn hungarian_small_cases() {
    let a = hungarian(&[5.0, 1.0, 0.0, 4.0], 2, 2).unwrap();
    assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
    assert_eq!(a.score, 9.0);

    let mut m = vec![1.0; 9];
    for i in 0..3 {
        m[i * 3 + i] = 7.0;
    }
    let a = hungarian(&m, 3, 3).unwrap();
    assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);

    assert!(matches!(hungarian(&[], 0, 3), Err(Error::Degenerate(_))));
    assert!(hungarian(&[f64::NAN], 1, 1).is_err());
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let m: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-20..=20) as f64).collect();
        let a = hungarian(&m, r, c).unwrap();
        assert_eq!(a.score, brute_force(&m, r, c), "{r}x{c} {m:?}");
        let used: Vec<usize> = a.row_to_col.iter().flatten().copied().collect();
        assert_eq!(used.len(), r.min(c));
        let mut dedup = used.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), used.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_row_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| m[r * n..(r + 1) * n].to_vec()).collect();
        let a = hungarian(&m, n, n).unwrap();
        let b = hungarian(&permuted, n, n).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
        // Row i of the permuted matrix is row perm[i] of the original.
        let mapped: f64 = (0..n).map(|i| m[perm[i] * n + b.row_to_col[i].unwrap()]).sum();
        prop_assert!((mapped - a.score).abs() < 1e-9);
    }

    #[test]
    fn acc_all_invariant_to_cluster_relabeling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 6;
        let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..40).map(|_| rng.gen_range(0..k)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let seen = [true, true, true, false, false, false];
        let a = gcd_accuracy(&pred, &truth, &seen).unwrap();
        let b = gcd_accuracy(&relabeled, &truth, &seen).unwrap();
        prop_assert!((a.acc_all - b.acc_all).abs() < 1e-12);
        prop_assert!((a.acc_novel - b.acc_novel).abs() < 1e-12);
    }
}

/// Best relabeling accuracy by trying every permutation of `k` labels.
fn brute_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let best = permutations(k)
        .into_iter()
        .map(|p| pred.iter().zip(truth).filter(|&(&a, &t)| p[a] == t).count())
        .max()
        .unwrap();
    best as f64 / pred.len() as f64
}

#[test]
fn gcd_accuracy_cases() {
    let seen = [true, true, false, false];
    let truth = vec![0, 1, 2, 3, 0, 1, 2, 3, 2, 3];
    let r = gcd_accuracy(&truth, &truth, &seen).unwrap();
    assert_eq!((r.acc_all, r.acc_seen, r.acc_novel), (1.0, 1.0, 1.0));

    // Swap the novel labels: Hungarian absorbs it, seen accuracy unchanged.
    let swapped: Vec<usize> = truth
        .iter()
        .map(|&t| match t {
            2 => 3,
            3 => 2,
            x => x,
        })
        .collect();
    let r = gcd_accuracy(&swapped, &truth, &seen).unwrap();
    assert_eq!((r.acc_all, r.acc_seen, r.acc_novel), (1.0, 1.0, 1.0));

    // Swapping seen labels costs seen accuracy but not matched accuracy.
    let swapped: Vec<usize> = truth
        .iter()
        .map(|&t| match t {
            0 => 1,
            1 => 0,
            x => x,
        })
        .collect();
    let r = gcd_accuracy(&swapped, &truth, &seen).unwrap();
    assert_eq!((r.acc_all, r.acc_seen), (1.0, 0.0));

    // Hand-built 10-sample case against exhaustive search.
    let pred = vec![0, 0, 2, 2, 1, 1, 3, 2, 3, 3];
    let r = gcd_accuracy(&pred, &truth, &seen).unwrap();
    assert!((r.acc_all - brute_accuracy(&pred, &truth, 4)).abs() < 1e-15);
    assert_eq!(r.acc_seen, 2.0 / 4.0);
    assert!((r.predicted_seen_ratio - 0.4).abs() < 1e-15);

    assert!(matches!(
        gcd_accuracy(&[4], &[0], &seen),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(
        gcd_accuracy(&[0, 1], &[0], &seen),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn gcd_accuracy_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..30);
        let split = rng.gen_range(1..k);
        let seen: Vec<bool> = (0..k).map(|c| c < split).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let r = gcd_accuracy(&pred, &truth, &seen).unwrap();
        assert!((r.acc_all - brute_accuracy(&pred, &truth, k)).abs() < 1e-12);
        let (np, nt): (Vec<usize>, Vec<usize>) =
            pred.iter().zip(&truth).filter(|&(_, &t)| !seen[t]).unzip();
        if !np.is_empty() {
            assert!((r.acc_novel - brute_accuracy(&np, &nt, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn cluster_accuracy_uses_one_mapping() {
    let seen = [true, false];
    let truth = [0, 0, 1, 1];
    let pred = [1, 1, 0, 0];
    let r = cluster_accuracy(&pred, &truth, &seen).unwrap();
    assert_eq!((r.acc_all, r.acc_seen, r.acc_novel), (1.0, 1.0, 1.0));
    assert_eq!(r.predicted_seen_ratio, 0.5);
    let direct = gcd_accuracy(&pred, &truth, &seen).unwrap();
    assert_eq!(direct.acc_seen, 0.0);
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn kmeans_point_masses_and_duplicates() {
    let x = tensor(&[
        vec![0.0, 0.0],
        vec![0.0, 0.0],
        vec![5.0, 5.0],
        vec![5.0, 5.0],
        vec![0.0, 0.0],
    ]);
    let r = kmeans(&x, 2, 0).unwrap();
    assert_eq!(r.labels[0], r.labels[1]);
    assert_eq!(r.labels[0], r.labels[4]);
    assert_eq!(r.labels[2], r.labels[3]);
    assert_ne!(r.labels[0], r.labels[2]);
    let acc = matched_accuracy(&r.labels, &[0, 0, 1, 1, 0], 2).unwrap().0;
    assert_eq!(acc, 1.0);
    assert_eq!(r, kmeans(&x, 2, 0).unwrap());
    assert!(matches!(kmeans(&x, 6, 0), Err(Error::Config(_))));
}

fn sse(x: &Tensor, labels: &[usize], k: usize) -> f64 {
    let d = x.cols();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..x.rows()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| members.iter().map(|&i| x.at(i, j)).sum::<f64>() / members.len() as f64)
            .collect();
        for &i in &members {
            total += x
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    total
}

#[test]
fn kmeans_blobs_reach_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let c = centers[i % 3];
            vec![
                c[0] + rng.gen_range(-0.5..0.5),
                c[1] + rng.gen_range(-0.5..0.5),
            ]
        })
        .collect();
    let x = tensor(&rows);
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; 12];
    for code in 0..3usize.pow(12) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % 3;
            c /= 3;
        }
        best = best.min(sse(&x, &labels, 3));
    }
    let r = kmeans(&x, 3, 1).unwrap();
    assert!((sse(&x, &r.labels, 3) - best).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_sse_non_increasing(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = kmeans(&tensor(&rows), k, seed).unwrap();
        for w in r.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.sse_history);
        }
        prop_assert!(r.iterations <= KMEANS_MAX_ITER);
    }
}

#[test]
fn similarity_cases() {
    let a = tensor(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
    assert!((feature_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    let b = tensor(&[vec![0.0, 3.0], vec![0.0, 1.0]]);
    assert!((feature_similarity(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    assert!(feature_similarity(&a, &tensor(&[vec![1.0, 0.0]])).is_err());
}

#[test]
fn bias_report_cases() {
    let seen = [false, true, false, true];
    let uniform = [0, 1, 2, 3, 0, 1, 2, 3];
    let r = bias_report(&uniform, &seen).unwrap();
    assert_eq!(r.predicted_seen_ratio, 0.5);
    assert_eq!(r.class_order, vec![1, 3, 0, 2]);
    assert_eq!(r.mass, vec![0.25; 4]);
    let r = bias_report(&[1, 3, 3], &seen).unwrap();
    assert_eq!(r.predicted_seen_ratio, 1.0);
    assert_eq!(
        r.to_csv(&seen).lines().nth(1),
        Some("0,1,1,0.3333333333333333")
    );
}
