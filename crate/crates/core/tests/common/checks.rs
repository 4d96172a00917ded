//! Checks shared by the per-module tests and the acceptance binary. Each
//! returns a one-line summary on success and the first violation otherwise.

use candle_core::{DType, Device, Tensor};
use gcl::clustering::ClusterConfig;
use gcl::contrastive::{
    loss_vi, loss_vi_batch, loss_vi_prime, loss_vi_prime2, loss_vi_prime2_batch, loss_vi_prime_batch, loss_vi_wogan,
    loss_vi_wogan_batch, ContrastConfig, MemoryBank,
};
use gcl::nets::ShapeConfig;
use gcl::trainer::{RunState, TrainConfig};
use gcl::world::{Dataset, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Repeating one update `t` times on an unnormalized bank gives
/// `a^t m0 + (1 - a^t) f`; other rows never change.
pub fn ema_closed_form() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let (n, d) = (rng.random_range(2..20), rng.random_range(1..16));
        let alpha = match case % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let mut bank = MemoryBank::from_rows(rows.clone(), alpha).map_err(|e| e.to_string())?;
        bank.normalize = false;
        let i = rng.random_range(0..n);
        let f = unit(&mut rng, d);
        let t = rng.random_range(1..60);
        for _ in 0..t {
            let before = bank.clone();
            bank.update(i, &f).map_err(|e| e.to_string())?;
            for j in (0..n).filter(|&j| j != i) {
                if bank.row(j) != before.row(j) {
                    return Err(format!("case {case}: update of row {i} changed row {j}"));
                }
            }
        }
        let at = alpha.powi(t);
        for (k, &m) in bank.row(i).iter().enumerate() {
            let want = at * rows[i][k] + (1.0 - at) * f[k];
            let e = (m - want).abs();
            if e >= 1e-10 {
                return Err(format!("case {case}: alpha {alpha} t {t} coord {k}: {m} vs {want}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("200 cases, worst abs err {worst:.1e}, untouched rows bit-identical"))
}

/// Every loss is exactly zero with no negatives, scalar and batched.
pub fn empty_negatives_cost_nothing() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let d = rng.random_range(2..32);
        let tau = rng.random_range(0.01..2.0);
        let (f, p, g) = (unit(&mut rng, d), unit(&mut rng, d), unit(&mut rng, d));
        let values = [
            loss_vi(&f, &p, &g, &[], tau),
            loss_vi_prime(&f, &g, &[], tau),
            loss_vi_prime2(&p, &g, &[], tau),
            loss_vi_wogan(&f, &p, &[], tau),
        ];
        for v in values {
            let v = v.map_err(|e| e.to_string())?;
            if v != 0.0 {
                return Err(format!("case {case}: scalar loss {v} with K = 0"));
            }
        }
        let b = rng.random_range(1..5);
        let t = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..b).flat_map(|_| unit(rng, d)).collect();
            Tensor::from_vec(v, (b, d), &Device::Cpu).unwrap()
        };
        let (tf, tp, tg) = (t(&mut rng), t(&mut rng), t(&mut rng));
        let none = Tensor::zeros((b, 0, d), DType::F64, &Device::Cpu).unwrap();
        let batched = [
            loss_vi_batch(&tf, &tp, &tg, &none, None, tau),
            loss_vi_prime_batch(&tf, &tg, &none, None, tau),
            loss_vi_prime2_batch(&tp, &tg, &none, None, tau),
            loss_vi_wogan_batch(&tf, &tp, &none, None, tau),
        ];
        for v in batched {
            let v = v.and_then(|l| Ok(l.to_scalar::<f64>()?)).map_err(|e| e.to_string())?;
            if v != 0.0 {
                return Err(format!("case {case}: batched loss {v} with K = 0"));
            }
        }
    }
    Ok("50 cases, 4 scalar and 4 batched losses each exactly 0".into())
}

/// At tau = 0.04 the extreme similarity configurations stay finite and
/// match their closed forms, in 64 and 32 bit.
pub fn low_temperature_is_stable() -> Result<String, String> {
    let tau = 0.04;
    let e = [1.0, 0.0];
    let anti = [-1.0, 0.0];
    let mut checked = 0;
    for k in [1usize, 10, 1000, 8192] {
        // Positive pair anti-aligned, every negative aligned with the query:
        // the loss is log(1 + k e^{50}) computed without overflow.
        let negs = vec![e.to_vec(); k];
        let want_hi = (k as f64).ln() + 2.0 / tau + (-(k as f64).ln() - 2.0 / tau).exp().ln_1p();
        let hi = loss_vi(&e, &anti, &e, &negs, tau).map_err(|x| x.to_string())?;
        // Positive aligned, negatives opposite: log(1 + k e^{-50}).
        let negs_far = vec![anti.to_vec(); k];
        let want_lo = (k as f64 * (-2.0 / tau).exp()).ln_1p();
        let lo = loss_vi(&e, &e, &e, &negs_far, tau).map_err(|x| x.to_string())?;
        for (got, want) in [(hi, want_hi), (lo, want_lo)] {
            if !got.is_finite() || (got - want).abs() > 1e-10 * want.abs().max(1e-300) {
                return Err(format!("K {k}: {got} vs {want}"));
            }
        }
        for dtype in [DType::F64, DType::F32] {
            let row = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, 2), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
            let negs_t = |v: &[f64]| {
                Tensor::from_vec(v.repeat(k), (1, k, 2), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
            };
            let cases = [(row(&anti), negs_t(&e), want_hi), (row(&e), negs_t(&anti), want_lo)];
            for (pos, negs, want) in cases {
                let l = loss_vi_batch(&row(&e), &pos, &row(&e), &negs, None, tau)
                    .and_then(|l| Ok(l.to_dtype(DType::F64)?.to_scalar::<f64>()?))
                    .map_err(|x| x.to_string())?;
                let tol = if dtype == DType::F32 { 1e-5 } else { 1e-10 };
                if !l.is_finite() || (l - want).abs() > tol * want.max(1.0) {
                    return Err(format!("{dtype:?} K {k}: batched {l} vs {want}"));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("extreme configurations at tau 0.04 finite and exact for K up to 8192 ({checked} batched checks)"))
}

pub fn small_world() -> Dataset {
    Dataset::from_world(&WorldConfig {
        n_identities: 4,
        views_per_identity: 4,
        camera_styles: 2,
        ..WorldConfig::default()
    })
    .unwrap()
}

pub fn small_config(joint_epochs: usize) -> TrainConfig {
    TrainConfig {
        warmup_id_epochs: 1,
        warmup_gan_epochs: 1,
        joint_epochs,
        batch_size: 8,
        contrast: ContrastConfig {
            negatives: 8,
            ..ContrastConfig::default()
        },
        cluster: ClusterConfig {
            k1: 6,
            k2: 2,
            ..ClusterConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Full schedule on the small world; returns the metric records.
pub fn small_run(config: TrainConfig, data: &Dataset) -> gcl::Result<Vec<Value>> {
    let mut s = RunState::new(config, &ShapeConfig::default(), DType::F32)?;
    s.warmup_identity(data)?;
    s.warmup_gan(data)?;
    s.joint_train(data)?;
    Ok(s.log.records)
}

/// `l_all` of every joint batch equals the sum of its logged terms.
pub fn objective_is_sum_of_terms(records: &[Value]) -> Result<String, String> {
    let mut batches = 0;
    let mut contrastive = 0;
    for r in records.iter().filter(|r| r["kind"] == "batch" && r["phase"] == "joint") {
        let get = |k: &str| r[k].as_f64().ok_or_else(|| format!("batch record without {k}: {r}"));
        let all = get("l_all")?;
        let sum = get("l_gan")? + get("l_vi")? + get("l_vi_prime")? + get("l_vi_prime2")?;
        // Terms are f32 scalars; their f64 sum may differ from the f32 total
        // by rounding of the three additions.
        if (all - sum).abs() > 1e-5 * all.abs().max(1.0) {
            return Err(format!("epoch {} batch {}: l_all {all} vs sum {sum}", r["epoch"], r["batch"]));
        }
        if get("l_vi")? > 0.0 {
            contrastive += 1;
        }
        batches += 1;
    }
    if batches == 0 || contrastive == 0 {
        return Err(format!("{batches} joint batches, {contrastive} with contrastive terms"));
    }
    Ok(format!("{batches} joint batches ({contrastive} with contrastive terms)"))
}

/// Numeric fields of two metric logs agree to f32 precision.
pub fn logs_agree(a: &[Value], b: &[Value]) -> Result<usize, String> {
    if a.len() != b.len() {
        return Err(format!("{} vs {} records", a.len(), b.len()));
    }
    let mut compared = 0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        compare(x, y, &mut compared).map_err(|e| format!("record {i}: {e}"))?;
    }
    Ok(compared)
}

fn compare(x: &Value, y: &Value, n: &mut usize) -> Result<(), String> {
    match (x, y) {
        (Value::Number(p), Value::Number(q)) => {
            let (p, q) = (p.as_f64().unwrap(), q.as_f64().unwrap());
            *n += 1;
            if (p - q).abs() > 1e-6 * p.abs().max(1.0) {
                return Err(format!("{p} vs {q}"));
            }
            Ok(())
        }
        (Value::Array(p), Value::Array(q)) if p.len() == q.len() => p.iter().zip(q).try_for_each(|(a, b)| compare(a, b, n)),
        (Value::Object(p), Value::Object(q)) if p.len() == q.len() => p.iter().try_for_each(|(k, v)| {
            let w = q.get(k).ok_or_else(|| format!("missing key {k}"))?;
            compare(v, w, n).map_err(|e| format!("{k}: {e}"))
        }),
        _ if x == y => Ok(()),
        _ => Err(format!("{x} vs {y}")),
    }
}
