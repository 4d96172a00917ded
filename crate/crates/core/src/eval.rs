//! Retrieval metrics, generation metrics and cluster-count series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;
use image::{GrayImage, Luma};
use imageproc::contrast::otsu_level;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nets::layers::{leaky_relu, Conv2d, Initializer};
use crate::nets::{batch_tensor, unbatch, NetworkBundle};
use crate::world::{Dataset, AZIMUTHS};

pub const ROTATIONS: [u32; 7] = [45, 90, 135, 180, 225, 270, 315];
pub const FID_DIM: usize = 64;
const FID_SEED: u64 = 0x00f1_d5ee_d000_0001;
const FID_EPS: f64 = 1e-6;

/// Unit-norm contrast vectors for every sample, in dataset order.
pub fn extract_all(bundle: &NetworkBundle, dataset: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(batch) {
        let x = batch_tensor(chunk.iter().map(|s| &s.image), bundle.dtype)?;
        let f = bundle.encode_identity(&x)?.f.detach();
        out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

/// Queries and gallery as dataset indices. An item is never compared with
/// itself; the two sets are disjoint by construction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl RetrievalProtocol {
    /// One query per (identity, camera style), at an azimuth that rotates
    /// with both so every view appears among the queries.
    pub fn standard(dataset: &Dataset) -> Self {
        let ids = dataset.identity_labels();
        let mut keys: Vec<(u32, usize)> = dataset
            .samples
            .iter()
            .zip(ids)
            .map(|(s, &id)| (id, s.camera_style))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut queries = Vec::new();
        for (id, style) in keys {
            let want = 45 * ((id as usize + 3 * style) % 8) as u32;
            let candidates: Vec<usize> = (0..dataset.len())
                .filter(|&i| ids[i] == id && dataset.samples[i].camera_style == style)
                .collect();
            let pick = candidates
                .iter()
                .copied()
                .find(|&i| dataset.samples[i].azimuth_deg == want)
                .unwrap_or(candidates[0]);
            queries.push(pick);
        }
        queries.sort_unstable();
        let gallery = (0..dataset.len()).filter(|i| queries.binary_search(i).is_err()).collect();
        RetrievalProtocol { queries, gallery }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(k, fraction of queries with a match in the top k)`.
    pub cmc: Vec<(usize, f64)>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl RetrievalMetrics {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.iter().find(|(r, _)| *r == k).map_or(f64::NAN, |(_, v)| *v)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Gallery positions sorted by decreasing cosine similarity; ties keep the
/// lower gallery position first.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// mAP and CMC over cosine rankings. Queries whose identity is absent from
/// the gallery are skipped.
pub fn map_cmc(
    query_feats: &[Vec<f64>],
    query_ids: &[u32],
    gallery_feats: &[Vec<f64>],
    gallery_ids: &[u32],
    ranks: &[usize],
) -> Result<RetrievalMetrics> {
    map_cmc_filtered(query_feats, query_ids, gallery_feats, gallery_ids, ranks, |_, _| true)
}

/// [`map_cmc`] where gallery item `g` takes part in query `q`'s ranking only
/// if `keep(q, g)`; removed items count neither as hits nor as misses.
pub fn map_cmc_filtered(
    query_feats: &[Vec<f64>],
    query_ids: &[u32],
    gallery_feats: &[Vec<f64>],
    gallery_ids: &[u32],
    ranks: &[usize],
    keep: impl Fn(usize, usize) -> bool,
) -> Result<RetrievalMetrics> {
    if query_feats.len() != query_ids.len() || gallery_feats.len() != gallery_ids.len() {
        return Err(Error::invalid("features and identities disagree in length"));
    }
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ranks.len()];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (qi, (q, &qid)) in query_feats.iter().zip(query_ids).enumerate() {
        let order: Vec<usize> = rank_gallery(q, gallery_feats).into_iter().filter(|&g| keep(qi, g)).collect();
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == qid).collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            log::warn!("query identity {qid} has no gallery match, skipped");
            skipped += 1;
            continue;
        };
        ap_sum += average_precision(&relevant);
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if first < k {
                *h += 1;
            }
        }
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / denom,
        cmc: ranks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / denom)).collect(),
        evaluated,
        skipped,
    })
}

fn protocol_split(features: &[Vec<f64>], dataset: &Dataset) -> (RetrievalProtocol, [(Vec<Vec<f64>>, Vec<u32>); 2]) {
    let p = RetrievalProtocol::standard(dataset);
    let ids = dataset.identity_labels();
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<u32>) {
        (idx.iter().map(|&i| features[i].clone()).collect(), idx.iter().map(|&i| ids[i]).collect())
    };
    let split = [pick(&p.queries), pick(&p.gallery)];
    (p, split)
}

/// Retrieval on a dataset under the standard protocol.
pub fn retrieval(features: &[Vec<f64>], dataset: &Dataset) -> Result<RetrievalMetrics> {
    let (_, [(qf, qi), (gf, gi)]) = protocol_split(features, dataset);
    map_cmc(&qf, &qi, &gf, &gi, &[1, 5, 10])
}

/// Retrieval where, for each query, gallery images of the same identity at
/// the query's azimuth are removed, so every match must bridge a change of
/// viewpoint.
pub fn cross_view_retrieval(features: &[Vec<f64>], dataset: &Dataset) -> Result<RetrievalMetrics> {
    let (p, [(qf, qi), (gf, gi)]) = protocol_split(features, dataset);
    let az = |i: usize| dataset.samples[i].azimuth_deg;
    map_cmc_filtered(&qf, &qi, &gf, &gi, &[1, 5, 10], |q, g| {
        gi[g] != qi[q] || az(p.gallery[g]) != az(p.queries[q])
    })
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = x.len();
    let d = x.first().map_or(0, Vec::len);
    if m < 2 || d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("need at least two equally sized feature rows"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite features"));
    }
    let data = DMatrix::from_fn(m, d, |i, j| x[i][j]);
    let mu = data.row_mean().transpose();
    let centered = DMatrix::from_fn(m, d, |i, j| data[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (m - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets, with `1e-6`
/// added to both covariance diagonals.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (mu1, c1) = mean_cov(real)?;
    let (mu2, c2) = mean_cov(generated)?;
    if mu1.len() != mu2.len() {
        return Err(Error::invalid("feature dimensions differ"));
    }
    let eye = DMatrix::<f64>::identity(mu1.len(), mu1.len()) * FID_EPS;
    let (c1, c2) = (c1 + &eye, c2 + &eye);
    let r1 = sym_sqrt(&c1);
    let inner = &r1 * &c2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&mu1 - &mu2).norm_squared();
    Ok((diff + c1.trace() + c2.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn luma(image: &Array3<f32>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[[0, y, x]] as f64 + 0.587 * image[[1, y, x]] as f64 + 0.114 * image[[2, y, x]] as f64
    })
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(a: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * a[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Mean SSIM of the luma channels, Gaussian window 7 with sigma 1.5,
/// C1 = 0.01², C2 = 0.03², dynamic range 1.
pub fn ssim(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    if x.dim() != y.dim() || x.dim().0 != 3 {
        return Err(Error::invalid(format!("ssim needs equal RGB images, got {:?} and {:?}", x.dim(), y.dim())));
    }
    let (_, h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("image smaller than the ssim window"));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (a, b) = (luma(x), luma(y));
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let saa = filter_valid(&(&a * &a), &k);
    let sbb = filter_valid(&(&b * &b), &k);
    let sab = filter_valid(&(&a * &b), &k);
    let mut total = 0.0;
    for ((((&ma, &mb), &aa), &bb), &ab) in mu_a.iter().zip(&mu_b).zip(&saa).zip(&sbb).zip(&sab) {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Frozen, seeded random convolutional encoder used as the FID feature map.
pub struct FidEncoder {
    convs: Vec<Conv2d>,
    dtype: DType,
}

impl FidEncoder {
    pub fn new() -> Result<Self> {
        let dtype = DType::F32;
        let mut init = Initializer::new(FID_SEED, dtype);
        let convs = vec![
            Conv2d::new(&mut init, 3, 16, 3, 2)?,
            Conv2d::new(&mut init, 16, 32, 3, 2)?,
            Conv2d::new(&mut init, 32, FID_DIM, 3, 2)?,
        ];
        Ok(FidEncoder { convs, dtype })
    }

    pub fn features(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut h = batch_tensor(chunk, self.dtype)?;
            for c in &self.convs {
                h = leaky_relu(&c.forward(&h)?)?;
            }
            let pooled = h.mean(3)?.mean(2)?;
            out.extend(pooled.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Images generated from every sample at azimuth offset `delta`.
pub fn generate_views(bundle: &NetworkBundle, dataset: &Dataset, delta: u32, batch: usize) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = batch_tensor(chunk.iter().map(|&i| &dataset.samples[i].image), bundle.dtype)?;
        let maps = chunk
            .iter()
            .map(|&i| Ok(dataset.structure(i, (dataset.samples[i].azimuth_deg + delta) % 360)?.grid))
            .collect::<Result<Vec<_>>>()?;
        let s = batch_tensor(&maps, bundle.dtype)?;
        let id = bundle.encode_identity(&x)?;
        let g = bundle.decode(&id.f_id, &bundle.encode_structure(&s)?)?.detach();
        out.extend(unbatch(&g)?);
    }
    Ok(out)
}

/// FID between the real images and each generated offset, in `ROTATIONS`
/// order, computed with a caller-supplied generator of views.
pub fn per_view_fid_with(
    encoder: &FidEncoder,
    real: &[Array3<f32>],
    mut views: impl FnMut(u32) -> Result<Vec<Array3<f32>>>,
) -> Result<Vec<(u32, f64)>> {
    let real_f = encoder.features(real)?;
    ROTATIONS
        .iter()
        .map(|&d| Ok((d, fid(&real_f, &encoder.features(&views(d)?)?)?)))
        .collect()
}

pub fn per_view_fid(encoder: &FidEncoder, bundle: &NetworkBundle, dataset: &Dataset) -> Result<Vec<(u32, f64)>> {
    let real: Vec<Array3<f32>> = dataset.samples.iter().map(|s| s.image.clone()).collect();
    per_view_fid_with(encoder, &real, |d| generate_views(bundle, dataset, d, 32))
}

/// `(epoch, cluster count)` from the `labels` records of a metrics log.
pub fn cluster_curve(records: &[Value]) -> Vec<(usize, usize)> {
    records
        .iter()
        .filter(|r| r["kind"] == "labels")
        .filter_map(|r| Some((r["epoch"].as_u64()? as usize, r["clusters"].as_u64()? as usize)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// mAP and rank-1 with same-identity, same-azimuth gallery images removed.
    pub cross_view_map: f64,
    pub cross_view_rank1: f64,
    pub fid: Option<f64>,
    pub ssim: Option<f64>,
    pub per_view_fid: Vec<(u32, f64)>,
    pub cluster_curve: Vec<(usize, usize)>,
}

/// Generation metrics for a bundle: pooled FID over all offsets, mean SSIM
/// between each real image and the generated images of the same identity,
/// and the per-offset FID table.
pub fn generation_metrics(bundle: &NetworkBundle, dataset: &Dataset) -> Result<(f64, f64, Vec<(u32, f64)>)> {
    let encoder = FidEncoder::new()?;
    let real: Vec<Array3<f32>> = dataset.samples.iter().map(|s| s.image.clone()).collect();
    let real_f = encoder.features(&real)?;
    let ids = dataset.identity_labels();
    let mut pooled = Vec::new();
    let mut table = Vec::new();
    let mut ssim_sum = 0.0;
    let mut ssim_n = 0usize;
    for &d in &ROTATIONS {
        let gen = generate_views(bundle, dataset, d, 32)?;
        let gf = encoder.features(&gen)?;
        table.push((d, fid(&real_f, &gf)?));
        for (gi, g) in gen.iter().enumerate() {
            for (ri, r) in real.iter().enumerate() {
                if ids[ri] == ids[gi] {
                    ssim_sum += ssim(r, g)?;
                    ssim_n += 1;
                }
            }
        }
        pooled.extend(gf);
    }
    Ok((fid(&real_f, &pooled)?, ssim_sum / ssim_n.max(1) as f64, table))
}

pub fn evaluate(bundle: &NetworkBundle, dataset: &Dataset, records: &[Value], with_generation: bool) -> Result<MetricsReport> {
    let feats = extract_all(bundle, dataset, 32)?;
    let r = retrieval(&feats, dataset)?;
    let cv = cross_view_retrieval(&feats, dataset)?;
    let (fid_v, ssim_v, table) = if with_generation {
        let (f, s, t) = generation_metrics(bundle, dataset)?;
        (Some(f), Some(s), t)
    } else {
        (None, None, Vec::new())
    };
    Ok(MetricsReport {
        map: r.map,
        rank1: r.rank(1),
        rank5: r.rank(5),
        rank10: r.rank(10),
        cross_view_map: cv.map,
        cross_view_rank1: cv.rank(1),
        fid: fid_v,
        ssim: ssim_v,
        per_view_fid: table,
        cluster_curve: cluster_curve(records),
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "metric      value");
        let _ = writeln!(s, "mAP         {:.4}", self.map);
        let _ = writeln!(s, "rank-1      {:.4}", self.rank1);
        let _ = writeln!(s, "rank-5      {:.4}", self.rank5);
        let _ = writeln!(s, "rank-10     {:.4}", self.rank10);
        let _ = writeln!(s, "xv mAP      {:.4}", self.cross_view_map);
        let _ = writeln!(s, "xv rank-1   {:.4}", self.cross_view_rank1);
        let _ = writeln!(s, "FID         {}", opt(self.fid));
        let _ = writeln!(s, "SSIM        {}", opt(self.ssim));
        if !self.per_view_fid.is_empty() {
            let _ = writeln!(s, "\noffset      FID");
            for (d, f) in &self.per_view_fid {
                let _ = writeln!(s, "{d:<11} {f:.4}");
            }
        }
        if !self.cluster_curve.is_empty() {
            let _ = writeln!(s, "\nepoch       clusters");
            for (e, j) in &self.cluster_curve {
                let _ = writeln!(s, "{e:<11} {j}");
            }
        }
        s
    }

    /// Writes `report.json`, `report.txt`, `per_view_fid.csv` and
    /// `cluster_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.json", serde_json::to_string_pretty(self)?)?;
        put("report.txt", self.to_text())?;
        let mut csv = String::from("offset,fid\n");
        for (d, f) in &self.per_view_fid {
            let _ = writeln!(csv, "{d},{f}");
        }
        put("per_view_fid.csv", csv)?;
        let mut csv = String::from("epoch,clusters\n");
        for (e, j) in &self.cluster_curve {
            let _ = writeln!(csv, "{e},{j}");
        }
        put("cluster_curve.csv", csv)
    }
}

/// Largest per-channel distance of each pixel from the median corner color.
fn background_distance(image: &Array3<f32>) -> Array2<f32> {
    let (_, h, w) = image.dim();
    let corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)];
    let bg: Vec<f32> = (0..3)
        .map(|c| {
            let mut v: Vec<f32> = corners.iter().map(|&(y, x)| image[[c, y, x]]).collect();
            v.sort_by(f32::total_cmp);
            0.5 * (v[1] + v[2])
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|c| (image[[c, y, x]] - bg[c]).abs()).fold(0.0, f32::max))
}

/// Binary foreground: pixels farther than `threshold` from the background.
pub fn foreground(image: &Array3<f32>, threshold: f32) -> Array2<f32> {
    background_distance(image).mapv(|d| if d > threshold { 1.0 } else { 0.0 })
}

/// Binary foreground with an Otsu threshold on the background distance.
/// Generated views have soft edges and a noisy background, where any fixed
/// threshold either keeps the halo or erodes the figure.
pub fn adaptive_foreground(image: &Array3<f32>) -> Array2<f32> {
    let d = background_distance(image);
    let (h, w) = d.dim();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let level = otsu_level(&gray);
    Array2::from_shape_fn((h, w), |(y, x)| if gray.get_pixel(x as u32, y as u32)[0] > level { 1.0 } else { 0.0 })
}

/// Soft intersection over union of two masks in [0, 1].
pub fn mask_iou(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y) as f64).sum();
    let union: f64 = a.iter().zip(b).map(|(x, y)| x.max(*y) as f64).sum();
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Azimuth in `AZIMUTHS` whose silhouette best overlaps `image`'s foreground.
pub fn best_matching_azimuth(image: &Array3<f32>, dataset: &Dataset, index: usize) -> Result<u32> {
    let fg = adaptive_foreground(image);
    let mut best = (f64::NEG_INFINITY, 0);
    for &az in &AZIMUTHS {
        let sil = dataset.structure(index, az)?.silhouette().to_owned();
        let iou = mask_iou(&fg, &sil);
        if iou > best.0 {
            best = (iou, az);
        }
    }
    Ok(best.1)
}

/// Generated views of one sample at every offset in [`ROTATIONS`].
pub struct RenderSheet {
    pub index: usize,
    /// Target azimuth of each generated view.
    pub requested: Vec<u32>,
    pub generated: Vec<Array3<f32>>,
    pub structures: Vec<Array3<f32>>,
    /// Best-overlapping azimuth of each generated view's foreground.
    pub matched: Vec<u32>,
    /// Top row: the original then the generated views; bottom row: `s_ori`
    /// then the rotated structures.
    pub sheet: Array3<f32>,
}

impl RenderSheet {
    pub fn hits(&self) -> usize {
        self.requested.iter().zip(&self.matched).filter(|(a, b)| a == b).count()
    }
}

pub fn render_sheet(bundle: &NetworkBundle, dataset: &Dataset, index: usize) -> Result<RenderSheet> {
    let sample = dataset
        .samples
        .get(index)
        .ok_or_else(|| Error::invalid(format!("instance {index} out of range")))?;
    let base = sample.azimuth_deg;
    let requested: Vec<u32> = ROTATIONS.iter().map(|d| (base + d) % 360).collect();
    let structures = requested
        .iter()
        .map(|&az| Ok(dataset.structure(index, az)?.grid))
        .collect::<Result<Vec<_>>>()?;
    let x = batch_tensor(std::iter::repeat_n(&sample.image, requested.len()), bundle.dtype)?;
    let f_id = bundle.encode_identity(&x)?.f_id;
    let f_str = bundle.encode_structure(&batch_tensor(&structures, bundle.dtype)?)?;
    let generated = unbatch(&bundle.decode(&f_id, &f_str)?.detach())?;
    let matched = generated
        .iter()
        .map(|g| best_matching_azimuth(g, dataset, index))
        .collect::<Result<Vec<_>>>()?;
    let s_ori = dataset.structure(index, base)?.grid;
    let top: Vec<Array3<f32>> = std::iter::once(sample.image.clone()).chain(generated.iter().cloned()).collect();
    let bottom: Vec<Array3<f32>> = std::iter::once(s_ori).chain(structures.iter().cloned()).collect();
    let (top, bottom) = (strip(&top)?, strip(&bottom)?);
    let sheet = ndarray::concatenate(ndarray::Axis(1), &[top.view(), bottom.view()]).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(RenderSheet {
        index,
        requested,
        generated,
        structures,
        matched,
        sheet,
    })
}

/// Stacks images into one (C, H, W * n) strip.
pub fn strip(images: &[Array3<f32>]) -> Result<Array3<f32>> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::concatenate(ndarray::Axis(2), &views).map_err(|e| Error::invalid(e.to_string()))
}
