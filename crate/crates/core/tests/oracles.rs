//! Library clustering and metrics against brute-force references, plus
//! their invariants.

mod common;

use std::collections::BTreeSet;

use common::oracle::*;
use gcl::clustering::{dbscan, k_reciprocal_jaccard, NOISE};
use gcl::eval::{fid, map_cmc, ssim};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dbscan_matches_union_find_oracle() {
    dbscan_cases().unwrap();
}

#[test]
fn jaccard_matches_brute_force() {
    let worst = jaccard_cases().unwrap();
    println!("jaccard worst abs err {worst:.1e}");
}

#[test]
fn map_cmc_match_counting_oracle() {
    map_cmc_cases().unwrap();
}

#[test]
fn map_cmc_hand_computed() {
    // Gallery order by similarity: 0 (id 1), 1 (id 2), 2 (id 1), 3 (id 2).
    let g = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.5, 0.5], vec![0.0, 1.0]];
    let gi = [1, 2, 1, 2];
    let q = vec![vec![1.0, 0.0]];
    let r = map_cmc(&q, &[2], &g, &gi, &[1, 2]).unwrap();
    assert_eq!(r.map, (1.0 / 2.0 + 2.0 / 4.0) / 2.0);
    assert_eq!(r.cmc, vec![(1, 0.0), (2, 1.0)]);
}

#[test]
fn fid_with_equal_covariances_is_mean_distance() {
    fid_closed_form_cases().unwrap();
}

#[test]
fn fid_matches_product_eigenvalues() {
    fid_alternate_cases().unwrap();
}

#[test]
fn ssim_matches_direct_windows() {
    ssim_cases().unwrap();
}

/// Dense blobs 10 apart, so no border point can touch two clusters.
fn planted_blobs(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    for c in 0..5 {
        let count = rng.random_range(1..30);
        for _ in 0..count {
            points.push(vec![c as f64 * 10.0 + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
        }
    }
    points
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dbscan_partition_ignores_point_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = planted_blobs(&mut rng);
        let n = points.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&p| points[p].clone()).collect();
        let a = dbscan(&euclidean(&points), 0.6, 4).labels;
        let b = dbscan(&euclidean(&shuffled), 0.6, 4).labels;
        let mut back = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            back[p] = b[k];
        }
        prop_assert!(same_partition(&a, &back));
    }

    #[test]
    fn larger_eps_never_adds_noise(seed in any::<u64>(), lo in 0.05f64..1.0, extra in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = euclidean(&planted_blobs(&mut rng));
        let small = dbscan(&d, lo, 4).noise_count();
        let large = dbscan(&d, lo + extra, 4).noise_count();
        prop_assert!(large <= small, "noise {small} at eps {lo}, {large} at {}", lo + extra);
    }

    #[test]
    fn core_points_grow_with_eps(seed in any::<u64>(), lo in 0.05f64..1.0, extra in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = euclidean(&random_points(&mut rng, 60, 2, 0.8));
        let cores = |eps: f64| -> BTreeSet<usize> {
            (0..d.len()).filter(|&i| (0..d.len()).filter(|&j| d.get(i, j) <= eps).count() >= 4).collect()
        };
        prop_assert!(cores(lo).is_subset(&cores(lo + extra)));
        prop_assert!(dbscan(&d, lo, 1).labels.iter().all(|&l| l != NOISE));
    }

    #[test]
    fn dbscan_with_huge_eps_is_one_cluster(seed in any::<u64>(), m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = dbscan(&euclidean(&random_points(&mut rng, 30, 3, 1.0)), 1e9, m).labels;
        prop_assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn jaccard_is_a_bounded_symmetric_dissimilarity(seed in any::<u64>(), n in 4usize..20, k1_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = euclidean(&random_points(&mut rng, n, 4, 1.0));
        let k1 = 1 + ((n - 2) as f64 * k1_frac) as usize;
        let j = k_reciprocal_jaccard(&d, k1, 1, 0.0).unwrap();
        for a in 0..n {
            prop_assert_eq!(j.get(a, a), 0.0);
            for b in 0..n {
                prop_assert!((0.0..=1.0).contains(&j.get(a, b)));
                prop_assert_eq!(j.get(a, b), j.get(b, a));
            }
        }
    }

    #[test]
    fn map_ignores_feature_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [(qf, qi), (gf, gi)] = retrieval_case(&mut rng, 8, 30, 5, 6);
        let a = map_cmc(&qf, &qi, &gf, &gi, &[1, 5, 10]).unwrap();
        let scaled: Vec<Vec<f64>> = gf.iter().map(|g| g.iter().map(|v| v * scale).collect()).collect();
        let b = map_cmc(&qf, &qi, &scaled, &gi, &[1, 5, 10]).unwrap();
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [(qf, qi), (gf, gi)] = retrieval_case(&mut rng, 10, 25, 6, 4);
        let r = map_cmc(&qf, &qi, &gf, &gi, &[1, 5, 10]).unwrap();
        prop_assume!(r.evaluated > 0);
        prop_assert!(r.rank(1) <= r.rank(5) && r.rank(5) <= r.rank(10) && r.rank(10) <= 1.0);
        prop_assert!((0.0..=1.0).contains(&r.map));
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in any::<u64>(), d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_rows(&mut rng, 40, d);
        let y = gaussian_rows(&mut rng, 50, d);
        let (a, b) = (fid(&x, &y).unwrap(), fid(&y, &x).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a));
        prop_assert!(fid(&x, &x).unwrap() < 1e-8);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(&mut rng, 16, 12);
        let y = random_image(&mut rng, 16, 12);
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }
}
