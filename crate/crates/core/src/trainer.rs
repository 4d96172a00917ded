//! Three-phase schedule: identity warm-up, GAN warm-up with a frozen
//! identity encoder, then joint training with per-epoch pseudo labels.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::{augment, AugmentConfig};
use crate::clustering::{refresh_labels, ClusterConfig, PseudoLabeling};
use crate::contrastive::{
    eligible, loss_vi_batch, loss_vi_prime2_batch, loss_vi_prime_batch, loss_vi_wogan_batch, sample_pairs, ContrastConfig,
    MemoryBank, Sampled,
};
use crate::error::{Error, Result};
use crate::eval::extract_all;
use crate::generative::{draw_rotation, gen_adv_loss, disc_loss, loss_feat, loss_img, synth_cycle, GanLossConfig};
use crate::nets::archive::ParamArchive;
use crate::nets::{batch_tensor, Net, NetworkBundle, ShapeConfig};
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::world::Dataset;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.jsonl";
const PAD_LOGIT: f64 = -1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmupId,
    WarmupGan,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::WarmupId, Phase::WarmupGan, Phase::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::WarmupId => "warmup_id",
            Phase::WarmupGan => "warmup_gan",
            Phase::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

/// Which terms enter the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSet {
    pub gan: bool,
    pub vi: bool,
    pub vi_prime: bool,
    pub vi_prime2: bool,
    /// Contrast without generation; excludes the three terms above.
    pub vi_wogan: bool,
    /// Traditional augmentation of the anchor image.
    pub tda: bool,
}

impl Default for LossSet {
    fn default() -> Self {
        LossSet::full()
    }
}

impl LossSet {
    pub const fn full() -> Self {
        LossSet {
            gan: true,
            vi: true,
            vi_prime: true,
            vi_prime2: true,
            vi_wogan: false,
            tda: false,
        }
    }

    pub const fn none() -> Self {
        LossSet {
            gan: false,
            vi: false,
            vi_prime: false,
            vi_prime2: false,
            vi_wogan: false,
            tda: false,
        }
    }

    pub fn needs_generation(&self) -> bool {
        self.gan || self.vi || self.vi_prime || self.vi_prime2
    }

    pub fn contrastive(&self) -> bool {
        self.vi || self.vi_prime || self.vi_prime2 || self.vi_wogan
    }

    pub fn validate(&self) -> Result<()> {
        if self.vi_wogan && (self.vi || self.vi_prime || self.vi_prime2) {
            return Err(Error::Config("vi_wogan cannot be combined with generated-view terms".into()));
        }
        if !self.gan && !self.contrastive() {
            return Err(Error::Config("joint objective has no terms".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set from the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub warmup_id_epochs: usize,
    pub warmup_gan_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr_id: f64,
    pub lr_gen: f64,
    pub lr_warmup_id: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub decay_after: usize,
    pub decay_factor: f64,
    /// Augment images during the identity warm-up.
    pub warmup_tda: bool,
    pub losses: LossSet,
    pub contrast: ContrastConfig,
    pub gan: GanLossConfig,
    pub cluster: ClusterConfig,
    pub augment: AugmentConfig,
    /// Keep every per-epoch checkpoint instead of only the newest per phase.
    pub keep_all_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            warmup_id_epochs: 60,
            warmup_gan_epochs: 12,
            joint_epochs: 12,
            batch_size: 16,
            lr_id: 3.5e-4,
            lr_gen: 1e-4,
            lr_warmup_id: 3.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            decay_after: 10,
            decay_factor: 0.1,
            warmup_tda: true,
            losses: LossSet::full(),
            contrast: ContrastConfig::default(),
            gan: GanLossConfig::default(),
            cluster: ClusterConfig::default(),
            augment: AugmentConfig::default(),
            keep_all_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_instances: usize) -> Result<()> {
        if n_instances == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if self.warmup_id_epochs == 0 || self.warmup_gan_epochs == 0 || self.joint_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_instances {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={n_instances}",
                self.batch_size
            )));
        }
        for (name, v) in [("lr_id", self.lr_id), ("lr_gen", self.lr_gen), ("lr_warmup_id", self.lr_warmup_id)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("momentum terms must lie in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_factor must be positive".into()));
        }
        self.losses.validate()?;
        self.contrast.validate(n_instances)?;
        self.gan.validate()?;
        self.cluster.validate(n_instances)
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_gen,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    /// Learning-rate multiplier for a zero-based joint epoch.
    pub fn lr_scale(&self, joint_epoch: usize) -> f64 {
        if joint_epoch >= self.decay_after {
            self.decay_factor
        } else {
            1.0
        }
    }

    pub fn phase_epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::WarmupId => self.warmup_id_epochs,
            Phase::WarmupGan => self.warmup_gan_epochs,
            Phase::Joint => self.joint_epochs,
        }
    }
}

/// In-memory copy of every record, mirrored to `metrics.jsonl` when a run
/// directory is attached.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub records: Vec<Value>,
}

impl MetricsLog {
    pub fn attach(path: PathBuf) -> Self {
        MetricsLog {
            path: Some(path),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Value) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{record}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r["kind"] == kind)
    }
}

/// Reads a metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub warmup_id: usize,
    pub warmup_gan: usize,
    pub joint: usize,
}

impl Progress {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::WarmupId => self.warmup_id,
            Phase::WarmupGan => self.warmup_gan,
            Phase::Joint => self.joint,
        }
    }

    fn bump(&mut self, phase: Phase) {
        match phase {
            Phase::WarmupId => self.warmup_id += 1,
            Phase::WarmupGan => self.warmup_gan += 1,
            Phase::Joint => self.joint += 1,
        }
    }
}

struct Optimizers {
    id: Sgd,
    gen: Adam,
    disc: Adam,
}

pub struct RunState {
    pub config: TrainConfig,
    pub bundle: NetworkBundle,
    pub bank: Option<MemoryBank>,
    pub labels: Option<PseudoLabeling>,
    pub progress: Progress,
    pub log: MetricsLog,
    run_dir: Option<PathBuf>,
    optim: Optimizers,
    structures: HashMap<(usize, u32), Array3<f32>>,
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::WarmupId => 1u64,
        Phase::WarmupGan => 2,
        Phase::Joint => 3,
    };
    let mut h = seed ^ 0x5851_f42d_4c95_7f2d;
    for v in [tag, epoch as u64] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29) ^ (h >> 31);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Memory positives and padded negatives for the anchors of one batch.
struct ContrastBatch {
    /// Positions within the batch that take part.
    rows: Tensor,
    positives: Tensor,
    negatives: Tensor,
    mask: Option<Tensor>,
}

fn contrast_batch(
    bank: &MemoryBank,
    labels: &PseudoLabeling,
    anchors: &[usize],
    k: usize,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ContrastBatch>> {
    let mut picks = Vec::new();
    for (pos, &anchor) in anchors.iter().enumerate() {
        let available = eligible(labels, anchor).1.len();
        if let Sampled::Pair(p) = sample_pairs(labels, anchor, k.min(available), rng)? {
            picks.push((pos, p));
        }
    }
    if picks.is_empty() {
        return Ok(None);
    }
    let width = picks.iter().map(|(_, p)| p.negatives.len()).max().unwrap_or(0);
    let dim = bank.dim();
    let mut pos_rows = Vec::with_capacity(picks.len() * dim);
    let mut neg_rows = Vec::with_capacity(picks.len() * width * dim);
    let mut mask = Vec::with_capacity(picks.len() * width);
    let mut padded = false;
    for (_, p) in &picks {
        pos_rows.extend_from_slice(bank.row(p.positive));
        for slot in 0..width {
            match p.negatives.get(slot) {
                Some(&j) => {
                    neg_rows.extend_from_slice(bank.row(j));
                    mask.push(0.0);
                }
                None => {
                    neg_rows.extend_from_slice(bank.row(p.anchor));
                    mask.push(PAD_LOGIT);
                    padded = true;
                }
            }
        }
    }
    let b = picks.len();
    let dev = Device::Cpu;
    let rows: Vec<u32> = picks.iter().map(|(pos, _)| *pos as u32).collect();
    Ok(Some(ContrastBatch {
        rows: Tensor::new(rows.as_slice(), &dev)?,
        positives: Tensor::from_vec(pos_rows, (b, dim), &dev)?.to_dtype(dtype)?,
        negatives: Tensor::from_vec(neg_rows, (b, width, dim), &dev)?.to_dtype(dtype)?,
        mask: if padded {
            Some(Tensor::from_vec(mask, (b, width), &dev)?.to_dtype(dtype)?)
        } else {
            None
        },
    }))
}

impl RunState {
    pub fn new(config: TrainConfig, shapes: &ShapeConfig, dtype: DType) -> Result<Self> {
        let bundle = NetworkBundle::init(config.seed, shapes, dtype)?;
        let optim = Optimizers {
            id: Sgd::new(bundle.vars(Net::IdentityEncoder), config.sgd(config.lr_warmup_id)),
            gen: Adam::new(
                [bundle.vars(Net::StructureEncoder), bundle.vars(Net::Generator)].concat(),
                config.adam(),
            ),
            disc: Adam::new(bundle.vars(Net::Discriminator), config.adam()),
        };
        Ok(RunState {
            config,
            bundle,
            bank: None,
            labels: None,
            progress: Progress::default(),
            log: MetricsLog::default(),
            run_dir: None,
            optim,
            structures: HashMap::new(),
        })
    }

    /// Mirrors metrics to `<dir>/metrics.jsonl` and checkpoints every epoch
    /// under `<dir>/checkpoints`.
    pub fn attach_run_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        let records = std::mem::take(&mut self.log.records);
        self.log = MetricsLog::attach(dir.join(METRICS_FILE));
        self.log.records = records;
        self.run_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    fn reset_optimizers(&mut self, phase: Phase) {
        let lr = match phase {
            Phase::WarmupId => self.config.lr_warmup_id,
            _ => self.config.lr_id,
        };
        self.optim.id = Sgd::new(self.bundle.vars(Net::IdentityEncoder), self.config.sgd(lr));
        self.optim.gen = Adam::new(
            [self.bundle.vars(Net::StructureEncoder), self.bundle.vars(Net::Generator)].concat(),
            self.config.adam(),
        );
        self.optim.disc = Adam::new(self.bundle.vars(Net::Discriminator), self.config.adam());
    }

    fn structure(&mut self, dataset: &Dataset, index: usize, azimuth: u32) -> Result<&Array3<f32>> {
        let key = (index, azimuth % 360);
        if !self.structures.contains_key(&key) {
            let grid = dataset.structure(index, key.1)?.grid;
            self.structures.insert(key, grid);
        }
        Ok(&self.structures[&key])
    }

    fn structure_batch(&mut self, dataset: &Dataset, picks: &[(usize, u32)]) -> Result<Tensor> {
        let mut maps = Vec::with_capacity(picks.len());
        for &(i, az) in picks {
            maps.push(self.structure(dataset, i, az)?.clone());
        }
        batch_tensor(&maps, self.bundle.dtype)
    }

    fn image_batch(&self, dataset: &Dataset, indices: &[usize], tda: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if tda {
            let imgs: Vec<Array3<f32>> = indices
                .iter()
                .map(|&i| augment(&dataset.samples[i].image, &self.config.augment, rng))
                .collect();
            batch_tensor(&imgs, self.bundle.dtype)
        } else {
            batch_tensor(indices.iter().map(|&i| &dataset.samples[i].image), self.bundle.dtype)
        }
    }

    fn update_memory(&mut self, anchors: &[usize], f: &Tensor) -> Result<()> {
        let rows: Vec<Vec<f64>> = f.detach().to_dtype(DType::F64)?.to_vec2()?;
        let bank = self.bank.as_mut().ok_or_else(|| Error::State("memory bank missing".into()))?;
        for (&i, row) in anchors.iter().zip(&rows) {
            bank.update(i, row)?;
        }
        Ok(())
    }

    fn fill_bank(&mut self, dataset: &Dataset) -> Result<()> {
        let rows = extract_all(&self.bundle, dataset, self.config.batch_size)?;
        let mut bank = MemoryBank::from_rows(rows, self.config.contrast.memory_momentum)?;
        bank.epoch = self.progress.warmup_id + self.progress.joint;
        self.bank = Some(bank);
        Ok(())
    }

    fn batches(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.config.validate(dataset.len())?;
        if let Some(bank) = &self.bank {
            if bank.len() != dataset.len() {
                return Err(Error::State(format!(
                    "memory bank has {} rows, dataset {} samples",
                    bank.len(),
                    dataset.len()
                )));
            }
        }
        Ok(())
    }

    /// Instance discrimination against the memory bank: every image is its
    /// own class. Runs the remaining warm-up epochs.
    pub fn warmup_identity(&mut self, dataset: &Dataset) -> Result<()> {
        self.check_dataset(dataset)?;
        if self.progress.warmup_id == 0 {
            self.reset_optimizers(Phase::WarmupId);
        }
        if self.bank.is_none() {
            self.fill_bank(dataset)?;
        }
        let labels = PseudoLabeling::instances(dataset.len());
        while self.progress.warmup_id < self.config.warmup_id_epochs {
            let epoch = self.progress.warmup_id;
            let mut rng = epoch_rng(self.config.seed, Phase::WarmupId, epoch);
            let mut total = 0.0;
            let batches = self.batches(dataset.len(), &mut rng);
            for (b, anchors) in batches.iter().enumerate() {
                let x = self.image_batch(dataset, anchors, self.config.warmup_tda, &mut rng)?;
                let f = self.bundle.encode_identity(&x)?.f;
                let bank = self.bank.as_ref().expect("filled above");
                let cb = contrast_batch(bank, &labels, anchors, self.config.contrast.negatives, self.bundle.dtype, &mut rng)?
                    .expect("instance labels have no noise");
                let loss = loss_vi_wogan_batch(&f, &cb.positives, &cb.negatives, cb.mask.as_ref(), self.config.contrast.temperature)?;
                let grads = loss.backward()?;
                self.optim.id.step(&grads)?;
                self.update_memory(anchors, &f)?;
                let l = scalar(&loss)?;
                total += l;
                self.log.push(json!({
                    "kind": "batch", "phase": "warmup_id", "epoch": epoch, "batch": b,
                    "l_vi_wogan": l,
                }))?;
            }
            self.finish_epoch(Phase::WarmupId, json!({ "l_vi_wogan": total / batches.len() as f64 }))?;
            if self.progress.warmup_id == self.config.warmup_id_epochs {
                self.fill_bank(dataset)?;
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Trains E_str, G and D with the GAN objective; E_id stays frozen.
    pub fn warmup_gan(&mut self, dataset: &Dataset) -> Result<()> {
        self.check_dataset(dataset)?;
        if self.progress.warmup_id < self.config.warmup_id_epochs {
            return Err(Error::State("identity warm-up has not finished".into()));
        }
        if self.progress.warmup_gan == 0 {
            self.reset_optimizers(Phase::WarmupGan);
        }
        while self.progress.warmup_gan < self.config.warmup_gan_epochs {
            let epoch = self.progress.warmup_gan;
            let mut rng = epoch_rng(self.config.seed, Phase::WarmupGan, epoch);
            let mut sums = [0.0; 5];
            let batches = self.batches(dataset.len(), &mut rng);
            for (b, anchors) in batches.iter().enumerate() {
                let terms = self.gan_step(dataset, anchors, &mut rng, None)?;
                let vals = [terms.img, terms.feat, terms.adv, terms.gan, terms.disc];
                for (s, v) in sums.iter_mut().zip(vals) {
                    *s += v;
                }
                self.log.push(json!({
                    "kind": "batch", "phase": "warmup_gan", "epoch": epoch, "batch": b,
                    "l_img": terms.img, "l_feat": terms.feat, "l_adv": terms.adv,
                    "l_gan": terms.gan, "l_disc": terms.disc,
                }))?;
            }
            let n = batches.len() as f64;
            self.finish_epoch(
                Phase::WarmupGan,
                json!({
                    "l_img": sums[0] / n, "l_feat": sums[1] / n, "l_adv": sums[2] / n,
                    "l_gan": sums[3] / n, "l_disc": sums[4] / n,
                }),
            )?;
        }
        Ok(())
    }

    /// One batch of the generative side. With `joint` set, the identity
    /// encoder is also updated and the contrastive terms are added.
    fn gan_step(
        &mut self,
        dataset: &Dataset,
        anchors: &[usize],
        rng: &mut ChaCha8Rng,
        joint: Option<&PseudoLabeling>,
    ) -> Result<BatchTerms> {
        let losses = self.config.losses;
        let x = self.image_batch(dataset, anchors, joint.is_some() && losses.tda, rng)?;
        let picks: Vec<(usize, u32)> = anchors.iter().map(|&i| (i, dataset.samples[i].azimuth_deg)).collect();
        let new_picks: Vec<(usize, u32)> = picks.iter().map(|&(i, az)| (i, (az + draw_rotation(rng)) % 360)).collect();
        let s_ori = self.structure_batch(dataset, &picks)?;
        let s_new = self.structure_batch(dataset, &new_picks)?;
        let cycle = synth_cycle(&self.bundle, &x, &s_ori, &s_new)?;
        let generated = [&cycle.x_ori1, &cycle.x_new1, &cycle.x_ori2];

        let mut terms = BatchTerms::default();
        let gan_active = joint.is_none() || losses.gan;
        if gan_active {
            let d_loss = disc_loss(&self.bundle, &self.config.gan, &x, &generated)?;
            let grads = d_loss.backward()?;
            self.optim.disc.step(&grads)?;
            terms.disc = scalar(&d_loss)?;
        }

        let zero = Tensor::zeros((), self.bundle.dtype, &Device::Cpu)?;
        let mut total = zero.clone();
        if gan_active {
            let img = loss_img(&x, &cycle.x_ori1, &cycle.x_ori2)?;
            let feat = loss_feat(&cycle.f_id, &cycle.f_id_new, &cycle.f_id_ori2)?;
            let adv = gen_adv_loss(&self.bundle, &generated)?;
            let gan = self.config.gan.combine_tensors(&img, &feat, &adv)?;
            terms.img = scalar(&img)?;
            terms.feat = scalar(&feat)?;
            terms.adv = scalar(&adv)?;
            terms.gan = scalar(&gan)?;
            total = gan;
        }

        if let Some(labels) = joint {
            if losses.contrastive() {
                let bank = self.bank.as_ref().ok_or_else(|| Error::State("memory bank missing".into()))?;
                let cb = contrast_batch(bank, labels, anchors, self.config.contrast.negatives, self.bundle.dtype, rng)?;
                if let Some(cb) = cb {
                    let tau = self.config.contrast.temperature;
                    let f = cycle.f.index_select(&cb.rows, 0)?;
                    let f_new = cycle.f_new.index_select(&cb.rows, 0)?;
                    let (negs, mask) = (&cb.negatives, cb.mask.as_ref());
                    if losses.vi {
                        let l = loss_vi_batch(&f, &cb.positives, &f_new, negs, mask, tau)?;
                        terms.vi = scalar(&l)?;
                        total = (total + l)?;
                    }
                    if losses.vi_prime {
                        let l = loss_vi_prime_batch(&f, &f_new, negs, mask, tau)?;
                        terms.vi_prime = scalar(&l)?;
                        total = (total + l)?;
                    }
                    if losses.vi_prime2 {
                        let l = loss_vi_prime2_batch(&cb.positives, &f_new, negs, mask, tau)?;
                        terms.vi_prime2 = scalar(&l)?;
                        total = (total + l)?;
                    }
                    terms.anchors = cb.rows.dim(0)?;
                }
            }
        }
        terms.all = scalar(&total)?;

        let grads = total.backward()?;
        if joint.is_some() {
            self.optim.id.step(&grads)?;
            self.update_memory(anchors, &cycle.f)?;
        }
        self.optim.gen.step(&grads)?;
        Ok(terms)
    }

    /// Contrast-only batch: no generation, one encoder pass.
    fn contrast_only_step(
        &mut self,
        dataset: &Dataset,
        anchors: &[usize],
        rng: &mut ChaCha8Rng,
        labels: &PseudoLabeling,
    ) -> Result<BatchTerms> {
        let x = self.image_batch(dataset, anchors, self.config.losses.tda, rng)?;
        let f = self.bundle.encode_identity(&x)?.f;
        let mut terms = BatchTerms::default();
        let bank = self.bank.as_ref().ok_or_else(|| Error::State("memory bank missing".into()))?;
        let cb = contrast_batch(bank, labels, anchors, self.config.contrast.negatives, self.bundle.dtype, rng)?;
        if let Some(cb) = cb {
            let fa = f.index_select(&cb.rows, 0)?;
            let l = loss_vi_wogan_batch(&fa, &cb.positives, &cb.negatives, cb.mask.as_ref(), self.config.contrast.temperature)?;
            terms.vi_wogan = scalar(&l)?;
            terms.all = terms.vi_wogan;
            terms.anchors = cb.rows.dim(0)?;
            let grads = l.backward()?;
            self.optim.id.step(&grads)?;
        }
        self.update_memory(anchors, &f)?;
        Ok(terms)
    }

    /// Joint training with pseudo labels refreshed at every epoch start.
    pub fn joint_train(&mut self, dataset: &Dataset) -> Result<()> {
        self.check_dataset(dataset)?;
        if self.progress.warmup_id < self.config.warmup_id_epochs {
            return Err(Error::State("identity warm-up has not finished".into()));
        }
        if self.config.losses.needs_generation() && self.progress.warmup_gan < self.config.warmup_gan_epochs {
            return Err(Error::State("GAN warm-up has not finished".into()));
        }
        if self.bank.is_none() {
            return Err(Error::State("memory bank missing".into()));
        }
        if self.progress.joint == 0 {
            self.reset_optimizers(Phase::Joint);
        }
        while self.progress.joint < self.config.joint_epochs {
            let epoch = self.progress.joint;
            let mut rng = epoch_rng(self.config.seed, Phase::Joint, epoch);
            let scale = self.config.lr_scale(epoch);
            self.optim.id.set_lr(self.config.lr_id * scale);
            self.optim.gen.set_lr(self.config.lr_gen * scale);
            self.optim.disc.set_lr(self.config.lr_gen * scale);

            let bank = self.bank.as_mut().expect("checked above");
            bank.epoch = epoch;
            let labels = refresh_labels(bank, &self.config.cluster, epoch)?;
            self.log.push(json!({
                "kind": "labels", "epoch": epoch, "clusters": labels.num_clusters,
                "noise": labels.noise_count(), "labels": labels.labels,
            }))?;
            if labels.noise_count() == labels.labels.len() && self.config.losses.contrastive() {
                log::warn!("joint epoch {epoch}: every instance is noise, contrastive terms skipped");
            }

            let mut sum = BatchTerms::default();
            let batches = self.batches(dataset.len(), &mut rng);
            for (b, anchors) in batches.iter().enumerate() {
                let terms = if self.config.losses.needs_generation() {
                    self.gan_step(dataset, anchors, &mut rng, Some(&labels))?
                } else {
                    self.contrast_only_step(dataset, anchors, &mut rng, &labels)?
                };
                sum.accumulate(&terms);
                let mut record = terms.to_json();
                record["kind"] = json!("batch");
                record["phase"] = json!("joint");
                record["epoch"] = json!(epoch);
                record["batch"] = json!(b);
                self.log.push(record)?;
            }
            self.labels = Some(labels);
            let mut record = sum.scaled(1.0 / batches.len() as f64).to_json();
            record["lr_scale"] = json!(scale);
            self.finish_epoch(Phase::Joint, record)?;
        }
        Ok(())
    }

    fn finish_epoch(&mut self, phase: Phase, mut record: Value) -> Result<()> {
        record["kind"] = json!("epoch");
        record["phase"] = json!(phase.as_str());
        record["epoch"] = json!(self.progress.get(phase));
        self.log.push(record)?;
        self.progress.bump(phase);
        self.save_checkpoint()?;
        Ok(())
    }

    /// Everything needed to resume: parameters, optimizer slots, memory,
    /// labels and progress counters.
    pub fn to_archive(&self) -> Result<ParamArchive> {
        let mut a = self.bundle.to_archive()?;
        self.optim.id.export("opt_id", &mut a);
        self.optim.gen.export("opt_gen", &mut a);
        self.optim.disc.export("opt_disc", &mut a);
        if let Some(bank) = &self.bank {
            a.insert("memory_bank".into(), Tensor::from_slice(bank.flat(), (bank.len(), bank.dim()), &Device::Cpu)?);
            a.set_meta("memory_momentum", bank.momentum);
            a.set_meta("memory_epoch", bank.epoch);
        }
        if let Some(labels) = &self.labels {
            a.insert("labels".into(), Tensor::new(labels.labels.as_slice(), &Device::Cpu)?);
            a.set_meta("labels_epoch", labels.epoch);
        }
        a.set_meta("seed", self.config.seed);
        a.set_meta("progress.warmup_id", self.progress.warmup_id);
        a.set_meta("progress.warmup_gan", self.progress.warmup_gan);
        a.set_meta("progress.joint", self.progress.joint);
        Ok(a)
    }

    pub fn from_archive(config: TrainConfig, shapes: &ShapeConfig, dtype: DType, mut archive: ParamArchive) -> Result<Self> {
        let mut state = RunState::new(config, shapes, dtype)?;
        let seed: u64 = archive.meta_value("seed")?;
        if seed != state.config.seed {
            return Err(Error::State(format!("checkpoint seed {seed} differs from config seed {}", state.config.seed)));
        }
        state.progress = Progress {
            warmup_id: archive.meta_value("progress.warmup_id")?,
            warmup_gan: archive.meta_value("progress.warmup_gan")?,
            joint: archive.meta_value("progress.joint")?,
        };
        if let Some(t) = archive.remove("memory_bank") {
            let (n, d) = t.dims2()?;
            let mut bank = MemoryBank::from_flat(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?, d, archive.meta_value("memory_momentum")?)?;
            bank.epoch = archive.meta_value("memory_epoch")?;
            debug_assert_eq!(bank.len(), n);
            state.bank = Some(bank);
        }
        if let Some(t) = archive.remove("labels") {
            state.labels = Some(PseudoLabeling::from_labels(t.to_vec1()?, archive.meta_value("labels_epoch")?));
        }
        state.optim.id.import("opt_id", &mut archive)?;
        state.optim.gen.import("opt_gen", &mut archive)?;
        state.optim.disc.import("opt_disc", &mut archive)?;
        state.bundle.load_archive(&archive)?;
        Ok(state)
    }

    fn checkpoint_name(&self) -> String {
        let p = self.progress;
        let phase = if p.joint > 0 {
            Phase::Joint
        } else if p.warmup_gan > 0 {
            Phase::WarmupGan
        } else {
            Phase::WarmupId
        };
        format!("{}-{:04}", phase.as_str(), p.get(phase))
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(run) = &self.run_dir else {
            return Ok(None);
        };
        let root = run.join(CHECKPOINT_DIR);
        let name = self.checkpoint_name();
        let dir = root.join(&name);
        self.to_archive()?.save(&dir)?;
        if !self.config.keep_all_checkpoints {
            let phase = name.split('-').next().unwrap_or_default().to_string();
            for (p, epoch, path) in list_checkpoints(&root)? {
                let finished = epoch == self.config.phase_epochs(p);
                if p.as_str() == phase && path != dir && !finished {
                    fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        Ok(Some(dir))
    }

    /// Restores the newest checkpoint under `run_dir` and reattaches it.
    pub fn resume(config: TrainConfig, shapes: &ShapeConfig, dtype: DType, run_dir: &Path) -> Result<Self> {
        let path = latest_checkpoint(&run_dir.join(CHECKPOINT_DIR))?
            .ok_or_else(|| Error::State(format!("no checkpoint under {}", run_dir.display())))?;
        let mut state = RunState::from_archive(config, shapes, dtype, ParamArchive::load(&path)?)?;
        state.attach_run_dir(run_dir)?;
        Ok(state)
    }
}

/// `(phase, epochs completed, path)` for every checkpoint directory.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(Phase, usize, PathBuf)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some((phase, epoch)) = name.rsplit_once('-') else {
            continue;
        };
        if let (Some(phase), Ok(epoch)) = (Phase::parse(phase), epoch.parse()) {
            out.push((phase, epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(root)?.pop().map(|(_, _, p)| p))
}

/// Scalar terms of one batch; `all` is the optimized objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchTerms {
    pub img: f64,
    pub feat: f64,
    pub adv: f64,
    pub gan: f64,
    pub disc: f64,
    pub vi: f64,
    pub vi_prime: f64,
    pub vi_prime2: f64,
    pub vi_wogan: f64,
    pub all: f64,
    pub anchors: usize,
}

impl BatchTerms {
    fn accumulate(&mut self, o: &BatchTerms) {
        self.img += o.img;
        self.feat += o.feat;
        self.adv += o.adv;
        self.gan += o.gan;
        self.disc += o.disc;
        self.vi += o.vi;
        self.vi_prime += o.vi_prime;
        self.vi_prime2 += o.vi_prime2;
        self.vi_wogan += o.vi_wogan;
        self.all += o.all;
        self.anchors += o.anchors;
    }

    fn scaled(&self, c: f64) -> BatchTerms {
        BatchTerms {
            img: self.img * c,
            feat: self.feat * c,
            adv: self.adv * c,
            gan: self.gan * c,
            disc: self.disc * c,
            vi: self.vi * c,
            vi_prime: self.vi_prime * c,
            vi_prime2: self.vi_prime2 * c,
            vi_wogan: self.vi_wogan * c,
            all: self.all * c,
            anchors: self.anchors,
        }
    }

    fn to_json(self) -> Value {
        json!({
            "l_img": self.img, "l_feat": self.feat, "l_adv": self.adv, "l_gan": self.gan,
            "l_disc": self.disc, "l_vi": self.vi, "l_vi_prime": self.vi_prime,
            "l_vi_prime2": self.vi_prime2, "l_vi_wogan": self.vi_wogan, "l_all": self.all,
            "anchors": self.anchors,
        })
    }
}
