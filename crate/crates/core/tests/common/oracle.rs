//! Brute-force reference implementations and the case generators that
//! compare them with the library.

use std::collections::BTreeSet;

use gcl::clustering::{dbscan, k_reciprocal_jaccard, DistanceMatrix, NOISE};
use gcl::eval::{fid, map_cmc, ssim};
use nalgebra::DMatrix;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FID_EPS: f64 = 1e-6;

pub fn euclidean(points: &[Vec<f64>]) -> DistanceMatrix {
    DistanceMatrix::from_fn(points.len(), |i, j| {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    })
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> Vec<Vec<f64>> {
    // A few blobs plus uniform clutter so every label kind shows up.
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                (0..dim).map(|_| rng.random_range(0.0..10.0)).collect()
            } else {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter().map(|v| v + rng.random_range(-spread..spread)).collect()
            }
        })
        .collect()
}

pub fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Core points joined by union-find; each border point takes the component
/// whose smallest core index is lowest among its core neighbors; components
/// are numbered by smallest core index. Components below `min_samples`
/// become noise and the survivors are renumbered by first member.
pub fn dbscan_oracle(d: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<i64> {
    let n = d.len();
    let near = |i: usize, j: usize| d.get(i, j) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // With smaller-root linking every root is the component's smallest index.
    let root: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        owner[i] = if core[i] {
            Some(root[i])
        } else {
            (0..n).filter(|&j| core[j] && near(i, j)).map(|j| root[j]).min()
        };
    }
    let mut size = vec![0usize; n];
    for r in owner.iter().flatten() {
        size[*r] += 1;
    }
    let mut number = vec![None; n];
    let mut next = 0;
    owner
        .iter()
        .map(|o| match o {
            Some(r) if size[*r] >= min_samples => *number[*r].get_or_insert_with(|| {
                next += 1;
                next - 1
            }),
            _ => NOISE,
        })
        .collect()
}

pub fn reciprocal_set(order: &[Vec<usize>], i: usize, k: usize) -> BTreeSet<usize> {
    order[i][..=k].iter().copied().filter(|j| order[*j][..=k].contains(&i)).collect()
}

/// Set-based k-reciprocal encoding with dense weight vectors.
pub fn jaccard_oracle(d: &DistanceMatrix, k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = d.len();
    let order: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| d.get(i, a).partial_cmp(&d.get(i, b)).unwrap().then(a.cmp(&b)));
            idx
        })
        .collect();
    let half = (k1 + 1) / 2;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = reciprocal_set(&order, i, k1);
        let mut star = r.clone();
        for &c in &r {
            let rc = reciprocal_set(&order, c, half);
            if 3 * rc.intersection(&r).count() > 2 * rc.len() {
                star.extend(rc);
            }
        }
        let z: f64 = star.iter().map(|&j| (-d.get(i, j)).exp()).sum();
        for &j in &star {
            v[i][j] = (-d.get(i, j)).exp() / z;
        }
    }
    if k2 > 1 {
        v = (0..n)
            .map(|i| (0..n).map(|l| order[i][..k2].iter().map(|&j| v[j][l]).sum::<f64>() / k2 as f64).collect())
            .collect();
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mins: f64 = (0..n).map(|l| v[i][l].min(v[j][l])).sum();
            let maxs: f64 = (0..n).map(|l| v[i][l].max(v[j][l])).sum();
            out[i][j] = lambda * d.get(i, j) + (1.0 - lambda) * (1.0 - mins / maxs);
        }
    }
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 0.5 * (out[i][j] + out[j][i]) }).collect())
        .collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Position of every gallery item found by counting the items that beat it.
pub fn map_cmc_oracle(qf: &[Vec<f64>], qi: &[u32], gf: &[Vec<f64>], gi: &[u32], ranks: &[usize]) -> (f64, Vec<f64>) {
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for (q, &id) in qf.iter().zip(qi) {
        let s: Vec<f64> = gf.iter().map(|g| cos(q, g)).collect();
        let pos: Vec<usize> =
            (0..gf.len()).map(|g| (0..gf.len()).filter(|&h| s[h] > s[g] || (s[h] == s[g] && h < g)).count()).collect();
        let mut hit_pos: Vec<usize> = (0..gf.len()).filter(|&g| gi[g] == id).map(|g| pos[g]).collect();
        if hit_pos.is_empty() {
            continue;
        }
        hit_pos.sort_unstable();
        let precisions: Vec<f64> = hit_pos.iter().enumerate().map(|(r, &p)| (r + 1) as f64 / (p + 1) as f64).collect();
        aps.push(precisions.iter().sum::<f64>() / precisions.len() as f64);
        firsts.push(hit_pos[0]);
    }
    let m = aps.len() as f64;
    let cmc = ranks.iter().map(|&k| firsts.iter().filter(|&&f| f < k).count() as f64 / m).collect();
    (aps.iter().sum::<f64>() / m, cmc)
}

pub fn retrieval_case(rng: &mut ChaCha8Rng, nq: usize, ng: usize, ids: u32, dim: usize) -> [(Vec<Vec<f64>>, Vec<u32>); 2] {
    let protos: Vec<Vec<f64>> = (0..ids).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<u32>) {
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let feats = labels
            .iter()
            .map(|&l| protos[l as usize].iter().map(|v| v + rng.random_range(-0.8..0.8)).collect())
            .collect();
        (feats, labels)
    };
    [draw(nq), draw(ng)]
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..m)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d).map(|a| (0..d).map(|b| mix[a][b] * z[b]).sum()).collect()
        })
        .collect()
}

pub fn moments(x: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (m, d) = (x.len(), x[0].len());
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        x.iter().map(|r| (r[a] - mu[a]) * (r[b] - mu[b])).sum::<f64>() / (m - 1) as f64 + if a == b { FID_EPS } else { 0.0 }
    });
    (mu, cov)
}

pub fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (m1, c1) = moments(a);
    let (m2, c2) = moments(b);
    let diff: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).powi(2)).sum();
    // tr sqrt(C1 C2) from the Schur eigenvalues of the unsymmetrized product.
    let cross: f64 = (&c1 * &c2).complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
    diff + c1.trace() + c2.trace() - 2.0 * cross
}

/// Mean SSIM with an explicit 2-D Gaussian window at every valid position.
pub fn ssim_oracle(x: &Array3<f32>, y: &Array3<f32>) -> f64 {
    let (_, h, w) = x.dim();
    let size = 7;
    let sigma: f64 = 1.5;
    let luma = |im: &Array3<f32>, r: usize, c: usize| {
        0.299 * im[[0, r, c]] as f64 + 0.587 * im[[1, r, c]] as f64 + 0.114 * im[[2, r, c]] as f64
    };
    let mut window = vec![vec![0.0; size]; size];
    let mut total_w = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = window[i][j] / total_w;
                    let (a, b) = (luma(x, r + i, c + j), luma(y, r + i, c + j));
                    ma += g * a;
                    mb += g * b;
                    aa += g * a * a;
                    bb += g * b * b;
                    ab += g * a * b;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0))
}

pub fn same_partition(a: &[i64], b: &[i64]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j] && a[i] != NOISE) == (b[i] == b[j] && b[i] != NOISE)))
        && a.iter().zip(b).all(|(x, y)| (*x == NOISE) == (*y == NOISE))
}

/// Random blob and clutter layouts plus integer grids with exact ties.
/// Returns the number of cases compared.
pub fn dbscan_cases() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut kinds = BTreeSet::new();
    let mut count = 0;
    for case in 0..60 {
        let n = rng.random_range(20..=200);
        let spread = rng.random_range(0.2..1.5);
        let points = random_points(&mut rng, n, 2, spread);
        let d = euclidean(&points);
        let eps = rng.random_range(0.2..1.2);
        let min_samples = rng.random_range(1..=6);
        let got = dbscan(&d, eps, min_samples).labels;
        if got != dbscan_oracle(&d, eps, min_samples) {
            return Err(format!("case {case}: n {n} eps {eps} min_samples {min_samples}"));
        }
        kinds.extend(got.iter().map(|&l| l == NOISE));
        count += 1;
    }
    if kinds.len() != 2 {
        return Err("cases never produced both noise and clusters".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..40 {
        let n = rng.random_range(10..=120);
        let points: Vec<Vec<f64>> =
            (0..n).map(|_| vec![rng.random_range(0..12) as f64, rng.random_range(0..12) as f64]).collect();
        let d = euclidean(&points);
        for (eps, m) in [(1.0, 3), (1.0, 2), (2.0, 5), (0.0, 2)] {
            if dbscan(&d, eps, m).labels != dbscan_oracle(&d, eps, m) {
                return Err(format!("grid case {case}: eps {eps} min_samples {m}"));
            }
            count += 1;
        }
    }
    Ok(count)
}

/// Largest absolute difference from the set-based oracle; cases up to 20
/// points.
pub fn jaccard_cases() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(4..=20);
        let d = euclidean(&random_points(&mut rng, n, 3, 1.0));
        let k1 = rng.random_range(1..n);
        let k2 = rng.random_range(1..=k1);
        let lambda = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) };
        let got = k_reciprocal_jaccard(&d, k1, k2, lambda).map_err(|e| e.to_string())?;
        let want = jaccard_oracle(&d, k1, k2, lambda);
        for i in 0..n {
            for j in 0..n {
                let e = (got.get(i, j) - want[i][j]).abs();
                if e >= 1e-12 {
                    return Err(format!("n {n} k1 {k1} k2 {k2} ({i},{j}): {} vs {}", got.get(i, j), want[i][j]));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

/// Galleries of at most 20 items; mAP and CMC must agree bit for bit.
pub fn map_cmc_cases() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ranks = [1, 3, 5, 10];
    let mut count = 0;
    for case in 0..200 {
        let nq = rng.random_range(1..15);
        let ng = rng.random_range(1..=20);
        let ids = rng.random_range(1..8);
        let [(qf, qi), (gf, gi)] = retrieval_case(&mut rng, nq, ng, ids, 6);
        let (want_map, want_cmc) = map_cmc_oracle(&qf, &qi, &gf, &gi, &ranks);
        let got = map_cmc(&qf, &qi, &gf, &gi, &ranks).map_err(|e| e.to_string())?;
        if got.evaluated == 0 {
            if !want_map.is_nan() {
                return Err(format!("case {case}: library skipped every query"));
            }
            continue;
        }
        let cmc: Vec<f64> = got.cmc.iter().map(|&(_, v)| v).collect();
        if got.map != want_map || cmc != want_cmc {
            return Err(format!("case {case}: mAP {} vs {want_map}, CMC {cmc:?} vs {want_cmc:?}", got.map));
        }
        count += 1;
    }
    Ok(count)
}

/// Shifted copies share one covariance, so the distance is `|shift|^2`.
pub fn fid_closed_form_cases() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(2..12);
        let x = gaussian_rows(&mut rng, 200, d);
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect();
        let want: f64 = shift.iter().map(|s| s * s).sum();
        let got = fid(&x, &y).map_err(|e| e.to_string())?;
        if (got - want).abs() >= 1e-3 {
            return Err(format!("d {d}: {got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

pub fn fid_alternate_cases() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(2..10);
        let x = gaussian_rows(&mut rng, 150, d);
        let y: Vec<Vec<f64>> =
            gaussian_rows(&mut rng, 120, d).into_iter().map(|r| r.iter().map(|v| 1.5 * v + 0.3).collect()).collect();
        let got = fid(&x, &y).map_err(|e| e.to_string())?;
        let want = fid_oracle(&x, &y);
        if (got - want).abs() >= 1e-6 {
            return Err(format!("d {d}: {got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

pub fn ssim_cases() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(7..24), rng.random_range(7..24));
        let x = random_image(&mut rng, h, w);
        let noise = random_image(&mut rng, h, w);
        let t: f32 = rng.random_range(0.0..1.0);
        let y = &x * (1.0 - t) + &noise * t;
        let got = ssim(&x, &y).map_err(|e| e.to_string())?;
        let want = ssim_oracle(&x, &y);
        if (got - want).abs() >= 1e-10 {
            return Err(format!("{got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}
