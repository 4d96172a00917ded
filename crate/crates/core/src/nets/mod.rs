//! The four networks: identity encoder, structure encoder, decoder and the
//! multi-scale patch discriminator.

pub mod archive;
pub mod conv;
pub mod layers;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{
    adaptive_instance_norm, l2_normalize, leaky_relu, sigmoid, Conv2d, Initializer, Linear, Parameters,
};

pub use archive::ParamArchive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub structure_channels: usize,
    /// Widths of the four stride-2 identity blocks; the last is `C_id`.
    pub id_widths: [usize; 4],
    pub id_parts: usize,
    /// Dimension of the contrast vector `f`.
    pub embed_dim: usize,
    /// Widths of the four structure convolutions (strides 1, 2, 2, 1).
    pub str_widths: [usize; 4],
    pub str_residual_layers: usize,
    pub adain_blocks: usize,
    /// Widths after each 2x upsampling stage of the decoder.
    pub gen_widths: Vec<usize>,
    pub disc_widths: [usize; 2],
    pub disc_scales: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            image_height: 64,
            image_width: 32,
            structure_channels: 3,
            id_widths: [16, 32, 64, 128],
            id_parts: 4,
            embed_dim: 64,
            str_widths: [8, 16, 32, 32],
            str_residual_layers: 4,
            adain_blocks: 2,
            gen_widths: vec![16, 8],
            disc_widths: [16, 32],
            disc_scales: 3,
        }
    }
}

impl ShapeConfig {
    /// A reduced configuration (32x16 images) for gradient checks.
    pub fn tiny() -> Self {
        ShapeConfig {
            image_height: 32,
            image_width: 16,
            structure_channels: 3,
            id_widths: [4, 4, 6, 8],
            id_parts: 2,
            embed_dim: 6,
            str_widths: [3, 4, 4, 4],
            str_residual_layers: 2,
            adain_blocks: 2,
            gen_widths: vec![4, 3],
            disc_widths: [3, 4],
            disc_scales: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be divisible by 16")));
        }
        if (h / 16) % self.id_parts != 0 || self.id_parts == 0 {
            return Err(Error::Config(format!(
                "{} part rows cannot be split into {} parts",
                h / 16,
                self.id_parts
            )));
        }
        if self.gen_widths.len() != 2 {
            return Err(Error::Config(
                "decoder needs exactly two upsampling stages to undo the structure encoder".into(),
            ));
        }
        let min_side = h.min(w) >> (self.disc_scales.saturating_sub(1));
        if self.disc_scales == 0 || min_side < 4 {
            return Err(Error::Config(format!(
                "{} discriminator scales leave a side of {min_side} pixels",
                self.disc_scales
            )));
        }
        let widths = self
            .id_widths
            .iter()
            .chain(&self.str_widths)
            .chain(&self.gen_widths)
            .chain(&self.disc_widths);
        if widths.copied().any(|c| c == 0) || self.embed_dim == 0 || self.structure_channels == 0 {
            return Err(Error::Config("all widths must be positive".into()));
        }
        Ok(())
    }

    pub fn id_channels(&self) -> usize {
        self.id_widths[3]
    }

    pub fn identity_map_dims(&self) -> (usize, usize, usize) {
        (self.id_channels(), self.id_parts, 1)
    }

    pub fn structure_feature_dims(&self) -> (usize, usize, usize) {
        (self.str_widths[3], self.image_height / 4, self.image_width / 4)
    }

    fn check_image(&self, x: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != channels || dims[2] != self.image_height || dims[3] != self.image_width {
            return Err(Error::invalid(format!(
                "{what} expects (B, {channels}, {}, {}), got {dims:?}",
                self.image_height, self.image_width
            )));
        }
        Ok(dims[0])
    }
}

/// Identity encoder output for a batch.
#[derive(Clone, Debug)]
pub struct IdentityOutput {
    /// Unit-norm contrast vectors, (B, D_f).
    pub f: Tensor,
    /// Part-pooled identity feature maps, (B, C_id, P, 1).
    pub f_id: Tensor,
}

#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    blocks: Vec<Conv2d>,
    res1: Conv2d,
    res2: Conv2d,
    embed: Linear,
    parts: usize,
}

impl IdentityEncoder {
    fn new(init: &mut Initializer, cfg: &ShapeConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = 3;
        for &c in &cfg.id_widths {
            blocks.push(Conv2d::new(init, c_in, c, 3, 2)?);
            c_in = c;
        }
        let c = cfg.id_channels();
        Ok(IdentityEncoder {
            blocks,
            res1: Conv2d::new(init, c, c, 3, 1)?,
            res2: Conv2d::new(init, c, c, 3, 1)?,
            embed: Linear::new(init, c, cfg.embed_dim, 1.0)?,
            parts: cfg.id_parts,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<IdentityOutput> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = leaky_relu(&block.forward(&h)?)?;
        }
        let r = self.res2.forward(&leaky_relu(&self.res1.forward(&h)?)?)?;
        let h = leaky_relu(&(h + r)?)?;
        let (b, c, rows, cols) = h.dims4()?;
        let f_id = h
            .reshape((b, c, self.parts, rows / self.parts, cols))?
            .mean(D::Minus1)?
            .mean(D::Minus1)?
            .unsqueeze(3)?;
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let f = l2_normalize(&self.embed.forward(&pooled)?)?;
        Ok(IdentityOutput { f, f_id })
    }
}

impl Parameters for IdentityEncoder {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        self.res1.visit(&format!("{prefix}.res1"), out);
        self.res2.visit(&format!("{prefix}.res2"), out);
        self.embed.visit(&format!("{prefix}.embed"), out);
    }
}

#[derive(Clone, Debug)]
pub struct StructureEncoder {
    convs: Vec<Conv2d>,
    residual: Vec<Conv2d>,
}

impl StructureEncoder {
    fn new(init: &mut Initializer, cfg: &ShapeConfig) -> Result<Self> {
        let strides = [1, 2, 2, 1];
        let mut convs = Vec::with_capacity(4);
        let mut c_in = cfg.structure_channels;
        for (&c, &s) in cfg.str_widths.iter().zip(&strides) {
            convs.push(Conv2d::new(init, c_in, c, 3, s)?);
            c_in = c;
        }
        let residual = (0..cfg.str_residual_layers)
            .map(|_| Conv2d::new(init, c_in, c_in, 3, 1))
            .collect::<Result<_>>()?;
        Ok(StructureEncoder { convs, residual })
    }

    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        let mut h = s.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        for conv in &self.residual {
            h = (&h + conv.forward(&leaky_relu(&h)?)?)?;
        }
        Ok(h)
    }
}

impl Parameters for StructureEncoder {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), out);
        }
        for (i, c) in self.residual.iter().enumerate() {
            c.visit(&format!("{prefix}.res{i}"), out);
        }
    }
}

/// Decoder: AdaIN residual blocks driven by `f_id`, then upsampling.
#[derive(Clone, Debug)]
pub struct Generator {
    style: Linear,
    blocks: Vec<(Conv2d, Conv2d)>,
    ups: Vec<Conv2d>,
    out: Conv2d,
    channels: usize,
}

impl Generator {
    fn new(init: &mut Initializer, cfg: &ShapeConfig) -> Result<Self> {
        let c = cfg.str_widths[3];
        let (cid, parts, _) = cfg.identity_map_dims();
        let blocks = (0..cfg.adain_blocks)
            .map(|_| Ok((Conv2d::without_bias(init, c, c, 3, 1)?, Conv2d::without_bias(init, c, c, 3, 1)?)))
            .collect::<Result<_>>()?;
        let mut ups = Vec::new();
        let mut c_in = c;
        for &w in &cfg.gen_widths {
            ups.push(Conv2d::new(init, c_in, w, 3, 1)?);
            c_in = w;
        }
        Ok(Generator {
            style: Linear::new(init, cid * parts, 4 * cfg.adain_blocks * c, 0.5)?,
            blocks,
            ups,
            out: Conv2d::new(init, c_in, 3, 3, 1)?,
            channels: c,
        })
    }

    pub fn forward(&self, f_id: &Tensor, f_str: &Tensor) -> Result<Tensor> {
        let b = f_id.dim(0)?;
        let code = self.style.forward(&f_id.flatten_from(1)?)?;
        let c = self.channels;
        let mut h = f_str.clone();
        for (i, (conv1, conv2)) in self.blocks.iter().enumerate() {
            let at = |k: usize| code.narrow(1, (4 * i + k) * c, c);
            let y = adaptive_instance_norm(&conv1.forward(&h)?, &at(0)?, &at(1)?)?;
            let y = leaky_relu(&y)?;
            let y = adaptive_instance_norm(&conv2.forward(&y)?, &at(2)?, &at(3)?)?;
            h = (h + y)?;
        }
        for conv in &self.ups {
            let (_, _, rows, cols) = h.dims4()?;
            h = leaky_relu(&conv.forward(&h.upsample_nearest2d(rows * 2, cols * 2)?)?)?;
        }
        debug_assert_eq!(h.dim(0)?, b);
        sigmoid(&self.out.forward(&h)?)
    }
}

impl Parameters for Generator {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.style.visit(&format!("{prefix}.style"), out);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&format!("{prefix}.block{i}.conv1"), out);
            b.visit(&format!("{prefix}.block{i}.conv2"), out);
        }
        for (i, c) in self.ups.iter().enumerate() {
            c.visit(&format!("{prefix}.up{i}"), out);
        }
        self.out.visit(&format!("{prefix}.out"), out);
    }
}

/// One PatchGAN per scale; scale `k` sees the image average-pooled `k` times.
#[derive(Clone, Debug)]
pub struct Discriminator {
    scales: Vec<[Conv2d; 3]>,
}

impl Discriminator {
    fn new(init: &mut Initializer, cfg: &ShapeConfig) -> Result<Self> {
        let [w1, w2] = cfg.disc_widths;
        let scales = (0..cfg.disc_scales)
            .map(|_| {
                Ok([
                    Conv2d::new(init, 3, w1, 3, 2)?,
                    Conv2d::new(init, w1, w2, 3, 2)?,
                    Conv2d::new(init, w2, 1, 3, 1)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Discriminator { scales })
    }

    /// Raw patch logits, one (B, 1, h, w) map per scale, finest first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut input = x.clone();
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, [c1, c2, c3]) in self.scales.iter().enumerate() {
            if k > 0 {
                input = input.avg_pool2d(2)?;
            }
            let h = leaky_relu(&c1.forward(&input)?)?;
            let h = leaky_relu(&c2.forward(&h)?)?;
            out.push(c3.forward(&h)?);
        }
        Ok(out)
    }
}

impl Parameters for Discriminator {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (k, convs) in self.scales.iter().enumerate() {
            for (i, c) in convs.iter().enumerate() {
                c.visit(&format!("{prefix}.scale{k}.conv{i}"), out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    IdentityEncoder,
    StructureEncoder,
    Generator,
    Discriminator,
}

impl Net {
    pub const ALL: [Net; 4] = [
        Net::IdentityEncoder,
        Net::StructureEncoder,
        Net::Generator,
        Net::Discriminator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::IdentityEncoder => "e_id",
            Net::StructureEncoder => "e_str",
            Net::Generator => "gen",
            Net::Discriminator => "disc",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkBundle {
    pub shapes: ShapeConfig,
    pub dtype: DType,
    pub e_id: IdentityEncoder,
    pub e_str: StructureEncoder,
    pub gen: Generator,
    pub disc: Discriminator,
}

impl NetworkBundle {
    pub fn init(seed: u64, shapes: &ShapeConfig, dtype: DType) -> Result<Self> {
        shapes.validate()?;
        let init = |k: u64| Initializer::new(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(k), dtype);
        Ok(NetworkBundle {
            shapes: shapes.clone(),
            dtype,
            e_id: IdentityEncoder::new(&mut init(1), shapes)?,
            e_str: StructureEncoder::new(&mut init(2), shapes)?,
            gen: Generator::new(&mut init(3), shapes)?,
            disc: Discriminator::new(&mut init(4), shapes)?,
        })
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    pub fn vars(&self, net: Net) -> Vec<(String, Var)> {
        let prefix = net.prefix();
        match net {
            Net::IdentityEncoder => self.e_id.named_vars(prefix),
            Net::StructureEncoder => self.e_str.named_vars(prefix),
            Net::Generator => self.gen.named_vars(prefix),
            Net::Discriminator => self.disc.named_vars(prefix),
        }
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        Net::ALL.iter().flat_map(|&n| self.vars(n)).collect()
    }

    pub fn parameter_count(&self, net: Net) -> usize {
        self.vars(net).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Sum of all parameter values of one network, for freeze checks.
    pub fn checksum(&self, net: Net) -> Result<f64> {
        let mut total = 0.0;
        for (_, v) in self.vars(net) {
            total += v.as_tensor().to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total)
    }

    pub fn encode_identity(&self, image: &Tensor) -> Result<IdentityOutput> {
        self.shapes.check_image(image, 3, "identity encoder")?;
        self.e_id.forward(&image.to_dtype(self.dtype)?)
    }

    pub fn encode_structure(&self, s: &Tensor) -> Result<Tensor> {
        self.shapes
            .check_image(s, self.shapes.structure_channels, "structure encoder")?;
        self.e_str.forward(&s.to_dtype(self.dtype)?)
    }

    pub fn decode(&self, f_id: &Tensor, f_str: &Tensor) -> Result<Tensor> {
        let (cid, parts, one) = self.shapes.identity_map_dims();
        let (cs, hs, ws) = self.shapes.structure_feature_dims();
        let (a, b) = (f_id.dims(), f_str.dims());
        if a.len() != 4 || a[1..] != [cid, parts, one] {
            return Err(Error::invalid(format!("f_id expects (B, {cid}, {parts}, 1), got {a:?}")));
        }
        if b.len() != 4 || b[1..] != [cs, hs, ws] || b[0] != a[0] {
            return Err(Error::invalid(format!(
                "f_str expects ({}, {cs}, {hs}, {ws}), got {b:?}",
                a[0]
            )));
        }
        self.gen.forward(f_id, f_str)
    }

    pub fn discriminate(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.shapes.check_image(image, 3, "discriminator")?;
        self.disc.forward(&image.to_dtype(self.dtype)?)
    }

    pub fn to_archive(&self) -> Result<ParamArchive> {
        let mut archive = ParamArchive::default();
        for (name, var) in self.all_vars() {
            archive.insert(name, var.as_tensor().copy()?);
        }
        Ok(archive)
    }

    /// Copies every network tensor out of `archive`. Names under a network
    /// prefix that this bundle does not own are rejected, as are missing ones.
    pub fn load_archive(&self, archive: &ParamArchive) -> Result<()> {
        let vars = self.all_vars();
        let prefixes: Vec<String> = Net::ALL.iter().map(|n| format!("{}.", n.prefix())).collect();
        for name in archive.names() {
            if prefixes.iter().any(|p| name.starts_with(p)) && !vars.iter().any(|(n, _)| n == name) {
                return Err(Error::invalid(format!("unknown parameter {name}")));
            }
        }
        for (name, var) in &vars {
            let t = archive
                .get(name)
                .ok_or_else(|| Error::invalid(format!("archive lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Converts a (C, H, W) host array batch into a (B, C, H, W) tensor.
pub fn batch_tensor<'a>(
    images: impl IntoIterator<Item = &'a ndarray::Array3<f32>>,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = img.dim();
        if *dims.get_or_insert(d) != d {
            return Err(Error::invalid("images in a batch must share a shape"));
        }
        data.extend(img.iter().copied());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a (B, C, H, W) tensor back into host arrays.
pub fn unbatch(t: &Tensor) -> Result<Vec<ndarray::Array3<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(c * h * w)
        .take(b)
        .map(|chunk| ndarray::Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}
