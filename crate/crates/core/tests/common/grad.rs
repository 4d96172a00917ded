//! Central finite differences against autograd, in 64-bit on the reduced
//! network shapes.

use candle_core::{DType, Device, Tensor, Var};
use gcl::contrastive::{loss_vi_batch, loss_vi_prime2_batch, loss_vi_prime_batch, loss_vi_wogan_batch};
use gcl::generative::{disc_loss, gen_adv_loss, loss_feat, loss_img, synth_cycle, CycleOutputs, GanLossConfig};
use gcl::nets::{Net, NetworkBundle, ShapeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
/// Small enough that no ReLU kink is crossed.
const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates drawn per parameter tensor per instance.
const COORDS: usize = 1;
/// Gradients below FLOOR * max(|L|, 1) are compared absolutely; the
/// difference quotient carries roundoff of about 1e-10 * |L| at STEP.
const FLOOR: f64 = 1e-5;

pub struct Instance {
    pub bundle: NetworkBundle,
    pub x: Tensor,
    pub s_ori: Tensor,
    pub s_new: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    pub mask: Option<Tensor>,
    pub tau: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn instance(seed: u64) -> Instance {
    let shapes = ShapeConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, k, d) = (2, 4, shapes.embed_dim);
    let img = [b, 3, shapes.image_height, shapes.image_width];
    let mask = if seed % 2 == 0 {
        let mut m = vec![0.0; b * k];
        m[k - 1] = -1e4;
        Some(Tensor::from_vec(m, (b, k), &Device::Cpu).unwrap())
    } else {
        None
    };
    Instance {
        bundle: NetworkBundle::init(seed, &shapes, DType::F64).unwrap(),
        x: uniform(&mut rng, &img),
        s_ori: uniform(&mut rng, &img),
        s_new: uniform(&mut rng, &img),
        positives: normal(&mut rng, &[b, d]),
        negatives: normal(&mut rng, &[b, k, d]),
        mask,
        tau: rng.random_range(0.04..0.5),
    }
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn cycle(i: &Instance) -> CycleOutputs {
    synth_cycle(&i.bundle, &i.x, &i.s_ori, &i.s_new).unwrap()
}

fn set_coord(var: &Var, idx: usize, v: f64) {
    let mut data: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    data[idx] = v;
    var.set(&Tensor::from_vec(data, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

pub struct GradReport {
    pub name: &'static str,
    pub instances: u64,
    pub coordinates: usize,
    pub worst: f64,
    /// First coordinate over tolerance, if any.
    pub failure: Option<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.worst < TOLERANCE
    }
}

/// Worst relative error over sampled coordinates of every variable in `nets`.
pub fn check(name: &'static str, nets: &[Net], loss: impl Fn(&Instance) -> Tensor) -> GradReport {
    let mut failure = None;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..INSTANCES {
        let inst = instance(1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = loss(&inst);
        let floor = FLOOR * value(&l).abs().max(1.0);
        let grads = l.backward().unwrap();
        for &net in nets {
            for (pname, var) in inst.bundle.vars(net) {
                let n = var.elem_count();
                let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
                    Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
                    None => vec![0.0; n],
                };
                for _ in 0..COORDS.min(n) {
                    let idx = rng.random_range(0..n);
                    let orig: f64 = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
                    let mut at = |h: f64| {
                        set_coord(&var, idx, orig + h);
                        value(&loss(&inst))
                    };
                    let (up, down) = (at(STEP), at(-STEP));
                    set_coord(&var, idx, orig);
                    let numeric = (up - down) / (2.0 * STEP);
                    let a = analytic[idx];
                    let scale = a.abs().max(numeric.abs());
                    let err = if scale < floor { (a - numeric).abs() / floor } else { (a - numeric).abs() / scale };
                    if err >= TOLERANCE && failure.is_none() {
                        failure = Some(format!("instance {seed} {pname}[{idx}] analytic {a:e} numeric {numeric:e} rel err {err:e}"));
                    }
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    GradReport {
        name,
        instances: INSTANCES,
        coordinates: checked,
        worst,
        failure,
    }
}

const GEN_SIDE: [Net; 3] = [Net::IdentityEncoder, Net::StructureEncoder, Net::Generator];
const ALL_NETS: [Net; 4] = [Net::IdentityEncoder, Net::StructureEncoder, Net::Generator, Net::Discriminator];

pub const CASES: [&str; 8] = ["L_img", "L_feat", "L_adv", "L_disc", "L_vi", "L_vi'", "L_vi''", "L_vi_wogan"];

pub fn run_case(name: &str) -> GradReport {
    match name {
        "L_img" => check("L_img", &GEN_SIDE, |i| {
            let c = cycle(i);
            loss_img(&i.x, &c.x_ori1, &c.x_ori2).unwrap()
        }),
        "L_feat" => check("L_feat", &GEN_SIDE, |i| {
            let c = cycle(i);
            loss_feat(&c.f_id, &c.f_id_new, &c.f_id_ori2).unwrap()
        }),
        "L_adv" => check("L_adv", &ALL_NETS, |i| {
            let c = cycle(i);
            gen_adv_loss(&i.bundle, &[&c.x_ori1, &c.x_new1, &c.x_ori2]).unwrap()
        }),
        "L_disc" => check("L_disc", &[Net::Discriminator], |i| {
            let c = cycle(i);
            disc_loss(&i.bundle, &GanLossConfig::default(), &i.x, &[&c.x_ori1, &c.x_new1, &c.x_ori2]).unwrap()
        }),
        "L_vi" => check("L_vi", &GEN_SIDE, |i| {
            let c = cycle(i);
            loss_vi_batch(&c.f, &i.positives, &c.f_new, &i.negatives, i.mask.as_ref(), i.tau).unwrap()
        }),
        "L_vi'" => check("L_vi'", &GEN_SIDE, |i| {
            let c = cycle(i);
            loss_vi_prime_batch(&c.f, &c.f_new, &i.negatives, i.mask.as_ref(), i.tau).unwrap()
        }),
        "L_vi''" => check("L_vi''", &GEN_SIDE, |i| {
            let c = cycle(i);
            loss_vi_prime2_batch(&i.positives, &c.f_new, &i.negatives, i.mask.as_ref(), i.tau).unwrap()
        }),
        "L_vi_wogan" => check("L_vi_wogan", &[Net::IdentityEncoder], |i| {
            let f = i.bundle.encode_identity(&i.x).unwrap().f;
            loss_vi_wogan_batch(&f, &i.positives, &i.negatives, i.mask.as_ref(), i.tau).unwrap()
        }),
        other => panic!("unknown gradient case {other}"),
    }
}
