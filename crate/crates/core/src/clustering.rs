//! Pseudo labels: cosine distances, k-reciprocal Jaccard re-ranking and
//! DBSCAN over a precomputed distance matrix.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::contrastive::MemoryBank;
use crate::error::{Error, Result};

pub const NOISE: i64 = -1;

/// Dense symmetric distance matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = if i == j { 0.0 } else { f(i, j) };
            }
        }
        DistanceMatrix { n, data }
    }

    /// Wraps a row-major matrix after checking the distance invariants.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("distance matrix must be square"));
        }
        let m = DistanceMatrix {
            n,
            data: rows.concat(),
        };
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(Error::invalid(format!("d({i},{i}) must be zero")));
            }
            for j in 0..i {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if !(a >= 0.0) || (a - b).abs() > 1e-9 {
                    return Err(Error::invalid(format!("d({i},{j}) breaks symmetry or sign")));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Indices of row `i` sorted by distance; ties keep index order.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        idx
    }
}

/// `1 - cos(f_i, f_j)`, clamped to [0, 2].
pub fn cosine_distance_matrix(features: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let mut unit = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(format!("feature row {i} has norm {n}")));
        }
        unit.push(f.iter().map(|v| v / n).collect::<Vec<_>>());
    }
    Ok(DistanceMatrix::from_fn(features.len(), |i, j| {
        let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
        (1.0 - dot).clamp(0.0, 2.0)
    }))
}

fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    ranks[i][..=k]
        .iter()
        .copied()
        .filter(|&j| ranks[j][..=k].contains(&i))
        .collect()
}

/// k-reciprocal Jaccard distance blended with the input distance:
/// `lambda * dist + (1 - lambda) * jaccard`.
///
/// Each point's k1-reciprocal set is expanded with the ceil(k1/2)-reciprocal
/// sets of its members that overlap it by more than two thirds. Members get
/// weights `exp(-d)` normalized to sum to one; with `k2 > 1` each weight
/// vector is replaced by the mean over the point's k2 nearest neighbors.
/// The Jaccard distance is `1 - sum(min) / sum(max)` over weight vectors.
pub fn k_reciprocal_jaccard(dist: &DistanceMatrix, k1: usize, k2: usize, lambda: f64) -> Result<DistanceMatrix> {
    let n = dist.len();
    if k1 == 0 || k1 >= n {
        return Err(Error::invalid(format!("k1 = {k1} must lie in 1..{n}")));
    }
    if k2 == 0 || k2 > k1 {
        return Err(Error::invalid(format!("k2 = {k2} must lie in 1..={k1}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must lie in [0, 1]"));
    }
    let ranks: Vec<Vec<usize>> = (0..n).map(|i| dist.ranking(i)).collect();
    let half = k1.div_ceil(2);

    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let base = k_reciprocal(&ranks, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = k_reciprocal(&ranks, c, half);
            let shared = cand.iter().filter(|j| base.contains(j)).count();
            if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let w: Vec<f64> = expanded.iter().map(|&j| (-dist.get(i, j)).exp()).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in expanded.iter().zip(w) {
            weights[i * n + j] = wj / total;
        }
    }

    if k2 > 1 {
        let mut qe = vec![0.0; n * n];
        for i in 0..n {
            for &j in &ranks[i][..k2] {
                for l in 0..n {
                    qe[i * n + l] += weights[j * n + l];
                }
            }
            for l in 0..n {
                qe[i * n + l] /= k2 as f64;
            }
        }
        weights = qe;
    }

    // Inverted index over nonzero weights keeps the pairwise pass sparse.
    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for l in 0..n {
            if weights[i * n + l] != 0.0 {
                columns[l].push(i);
            }
        }
    }
    let mass: Vec<f64> = (0..n).map(|i| weights[i * n..(i + 1) * n].iter().sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut shared = vec![0.0; n];
        for l in 0..n {
            let wi = weights[i * n + l];
            if wi == 0.0 {
                continue;
            }
            for &j in &columns[l] {
                shared[j] += wi.min(weights[j * n + l]);
            }
        }
        for j in 0..n {
            let union = mass[i] + mass[j] - shared[j];
            let jaccard = if union > 0.0 { (1.0 - shared[j] / union).clamp(0.0, 1.0) } else { 1.0 };
            out[i * n + j] = lambda * dist.get(i, j) + (1.0 - lambda) * jaccard;
        }
    }
    Ok(DistanceMatrix::from_fn(n, |i, j| 0.5 * (out[i * n + j] + out[j * n + i])))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub labels: Vec<i64>,
    pub epoch: usize,
    pub num_clusters: usize,
}

impl PseudoLabeling {
    /// Wraps raw labels; clusters are counted, not validated.
    pub fn from_labels(labels: Vec<i64>, epoch: usize) -> Self {
        let num_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        PseudoLabeling {
            labels,
            epoch,
            num_clusters,
        }
    }

    /// Every instance is its own class.
    pub fn instances(n: usize) -> Self {
        Self::from_labels((0..n as i64).collect(), 0)
    }

    pub fn is_noise(&self, i: usize) -> bool {
        self.labels[i] == NOISE
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// Demotes clusters smaller than `min_size` to noise and renumbers the rest
/// in order of first appearance.
pub fn drop_small_clusters(labels: &mut [i64], min_size: usize) {
    let k = labels.iter().copied().max().unwrap_or(-1) + 1;
    let mut sizes = vec![0usize; k.max(0) as usize];
    for &l in labels.iter() {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    let mut remap = vec![NOISE; sizes.len()];
    let mut next = 0;
    for l in labels.iter_mut() {
        if *l < 0 {
            continue;
        }
        let old = *l as usize;
        if sizes[old] < min_size {
            *l = NOISE;
            continue;
        }
        if remap[old] == NOISE {
            remap[old] = next;
            next += 1;
        }
        *l = remap[old];
    }
}

/// DBSCAN over a precomputed matrix. Points are visited in ascending index
/// order; `d <= eps` counts as a neighbor and a point counts itself. Border
/// points join the first cluster that reaches them. Clusters left with
/// fewer than `min_samples` members become noise.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> PseudoLabeling {
    const UNVISITED: i64 = -2;
    let n = dist.len();
    let neighbors = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist.get(i, j) <= eps).collect() };
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i64;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let seeds = neighbors(i);
        if seeds.len() < min_samples {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: VecDeque<usize> = seeds.into_iter().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster;
                continue;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let nj = neighbors(j);
            if nj.len() >= min_samples {
                queue.extend(nj.into_iter().filter(|&k| labels[k] == UNVISITED || labels[k] == NOISE));
            }
        }
        cluster += 1;
    }
    drop_small_clusters(&mut labels, min_samples);
    PseudoLabeling::from_labels(labels, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the cosine distance in the blend; 0 is pure Jaccard.
    pub lambda: f64,
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k1: 20,
            k2: 6,
            lambda: 0.0,
            eps: 0.55,
            min_samples: 4,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k1 == 0 || self.k1 >= n || self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::Config(format!(
                "need 1 <= k2 <= k1 < {n}, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(self.eps > 0.0) || self.min_samples == 0 {
            return Err(Error::Config("eps and min_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine distances on the memory rows, re-ranked, then clustered.
pub fn refresh_labels(bank: &MemoryBank, cfg: &ClusterConfig, epoch: usize) -> Result<PseudoLabeling> {
    let dist = cosine_distance_matrix(&bank.to_rows())?;
    let reranked = k_reciprocal_jaccard(&dist, cfg.k1, cfg.k2, cfg.lambda)?;
    let mut labels = dbscan(&reranked, cfg.eps, cfg.min_samples);
    labels.epoch = epoch;
    log::info!(
        "epoch {epoch}: {} clusters, {} noise of {}",
        labels.num_clusters,
        labels.noise_count(),
        labels.labels.len()
    );
    Ok(labels)
}
