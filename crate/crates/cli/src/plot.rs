//! Line charts and CSV tables from `metrics.jsonl`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde_json::Value;

use gcl::eval::cluster_curve;
use gcl::trainer::{read_metrics, Phase, METRICS_FILE};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 16;
const COLORS: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

/// One polyline per series, each scaled to its own range. Returns the image
/// and each series' (min, max) so a legend can be written alongside.
fn chart(series: &[Vec<f64>]) -> (RgbImage, Vec<(f64, f64)>) {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN);
    for x in x0..=x1 {
        img.put_pixel(x, y1, Rgb([0, 0, 0]));
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, Rgb([0, 0, 0]));
    }
    let mut ranges = Vec::new();
    for (k, s) in series.iter().enumerate() {
        let finite: Vec<f64> = s.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ranges.push((lo, hi));
        if finite.is_empty() {
            continue;
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = s.len().max(2) - 1;
        let point = |i: usize, v: f64| {
            let x = x0 as f64 + (x1 - x0) as f64 * i as f64 / n as f64;
            let y = y1 as f64 - (y1 - y0) as f64 * (v - lo) / span;
            (x, y)
        };
        let color = Rgb(COLORS[k % COLORS.len()]);
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = point(i, v);
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            } else {
                line(&mut img, p, p, color);
            }
            prev = Some(p);
        }
    }
    (img, ranges)
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for t in 0..=steps {
        let f = t as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * f).round() as u32;
        let y = (a.1 + (b.1 - a.1) * f).round() as u32;
        if x < img.width() && y < img.height() {
            img.put_pixel(x, y, color);
        }
    }
}

const LOSS_KEYS: [&str; 9] = ["l_all", "l_gan", "l_vi", "l_vi_prime", "l_vi_prime2", "l_vi_wogan", "l_img", "l_feat", "l_disc"];

fn epoch_rows(records: &[Value]) -> Vec<&Value> {
    let mut rows: Vec<&Value> = records.iter().filter(|r| r["kind"] == "epoch").collect();
    rows.sort_by_key(|r| {
        let phase = r["phase"].as_str().and_then(Phase::parse).unwrap_or(Phase::Joint);
        (phase, r["epoch"].as_u64().unwrap_or(0))
    });
    rows
}

pub fn plot(run_dir: &Path) -> gcl::Result<()> {
    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    let out = run_dir.join("plots");
    fs::create_dir_all(&out).map_err(|e| gcl::Error::Io { path: out.clone(), source: e })?;
    let put = |name: &str, body: String| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| gcl::Error::Io { path: p, source: e })
    };

    let rows = epoch_rows(&records);
    let mut csv = String::from("phase,epoch");
    for k in LOSS_KEYS {
        let _ = write!(csv, ",{k}");
    }
    csv.push('\n');
    for r in &rows {
        let _ = write!(csv, "{},{}", r["phase"].as_str().unwrap_or(""), r["epoch"]);
        for k in LOSS_KEYS {
            match r[k].as_f64() {
                Some(v) => {
                    let _ = write!(csv, ",{v}");
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    put("losses.csv", csv)?;

    let shown: Vec<&str> = LOSS_KEYS
        .into_iter()
        .filter(|k| rows.iter().any(|r| r[*k].as_f64().is_some_and(|v| v != 0.0)))
        .collect();
    let series: Vec<Vec<f64>> = shown
        .iter()
        .map(|k| rows.iter().map(|r| r[*k].as_f64().unwrap_or(f64::NAN)).collect())
        .collect();
    let (img, ranges) = chart(&series);
    img.save(out.join("losses.png"))?;
    let mut legend = String::from("series,color,min,max\n");
    for ((k, (lo, hi)), c) in shown.iter().zip(&ranges).zip(COLORS.iter().cycle()) {
        let _ = writeln!(legend, "{k},#{:02x}{:02x}{:02x},{lo},{hi}", c[0], c[1], c[2]);
    }
    put("losses_legend.csv", legend)?;

    let curve = cluster_curve(&records);
    let mut csv = String::from("epoch,clusters\n");
    for (e, j) in &curve {
        let _ = writeln!(csv, "{e},{j}");
    }
    put("cluster_curve.csv", csv)?;
    let (img, _) = chart(&[curve.iter().map(|&(_, j)| j as f64).collect()]);
    img.save(out.join("clusters.png"))?;
    log::info!("plots written to {}", out.display());
    Ok(())
}
