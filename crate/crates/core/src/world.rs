//! Synthetic articulated-figure world.
//!
//! Each identity is a small 3D body built from axis-aligned boxes (head,
//! torso, arms, legs, feet) plus two fixed accessories: a backpack behind
//! the torso and a bag hanging at the right hip. A view orbits the camera
//! around the vertical axis in 45 degree steps and projects orthographically,
//! so the structure of any rotated view is known exactly. This replaces
//! mesh recovery: `project_structure` is the rotated-projection oracle.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight azimuths a view can take.
pub const AZIMUTHS: [u32; 8] = [0, 45, 90, 135, 180, 225, 270, 315];

/// Number of entries in the global camera-style table.
pub const MAX_CAMERA_STYLES: usize = 8;

/// Structure channels: silhouette, visible upper body, visible lower body.
pub const STRUCTURE_CHANNELS: usize = 3;

const CAMERA_TABLE_SEED: u64 = 0x5eed_ca3e;
const BACKPACK_COLOR: [f32; 3] = [0.38, 0.40, 0.46];
const BAG_COLOR: [f32; 3] = [0.62, 0.42, 0.22];
const HEAD_HEIGHT: f32 = 0.14;

const HEAD_COLORS: [[f32; 3]; 4] = [
    [0.92, 0.74, 0.60],
    [0.72, 0.52, 0.38],
    [0.52, 0.36, 0.24],
    [0.95, 0.86, 0.42],
];

const TORSO_COLORS: [[f32; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.20, 0.72, 0.25],
    [0.20, 0.30, 0.88],
    [0.88, 0.82, 0.20],
    [0.92, 0.92, 0.90],
    [0.55, 0.55, 0.55],
    [0.62, 0.25, 0.72],
    [0.92, 0.52, 0.15],
];

const LEG_COLORS: [[f32; 3]; 5] = [
    [0.25, 0.32, 0.65],
    [0.30, 0.30, 0.48],
    [0.72, 0.62, 0.40],
    [0.58, 0.58, 0.58],
    [0.90, 0.90, 0.86],
];

const MARKER_COLORS: [[f32; 3]; 4] = [
    [1.00, 0.95, 0.10],
    [0.10, 0.95, 0.95],
    [1.00, 0.20, 0.80],
    [0.20, 1.00, 0.30],
];

/// Body proportions, relative to a unit figure height. This is the
/// mesh-recovery analogue: structure maps depend only on it and the azimuth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    pub torso_height: f32,
    pub leg_length: f32,
    pub shoulder_width: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryMarker {
    pub color: [f32; 3],
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity_id: u32,
    /// Head, torso and legs colors.
    pub palette: [[f32; 3]; 3],
    pub body: BodyShape,
    pub marker: AsymmetryMarker,
}

impl PersonSpec {
    /// Generates the first `n` identities of the world defined by `seed`.
    ///
    /// Identities are drawn from a small clothing vocabulary, so distinct
    /// identities often share one or two garment colors; no two identities
    /// share all three.
    pub fn generate(seed: u64, n: u32) -> Vec<PersonSpec> {
        let canvas = Canvas::default();
        let views = |spec: &PersonSpec| -> Vec<Array3<f32>> {
            AZIMUTHS.iter().map(|&az| paint(&canvas, spec, az).0).collect()
        };
        let mut out: Vec<PersonSpec> = Vec::with_capacity(n as usize);
        let mut rendered: Vec<Vec<Array3<f32>>> = Vec::with_capacity(n as usize);
        for id in 0..n {
            let mut attempt = 0u64;
            loop {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id as u64, attempt));
                let candidate = Self::draw(id, &mut rng);
                let palettes_ok = out
                    .iter()
                    .all(|other| palette_separation(&candidate.palette, &other.palette) >= 0.1);
                // Past the budget only the palette rule is enforced.
                let strict = attempt < SEPARATION_ATTEMPTS;
                if palettes_ok {
                    let mine = views(&candidate);
                    let images_ok = !strict
                        || rendered.iter().all(|theirs| {
                            mine.iter().zip(theirs).all(|(a, b)| {
                                (a - b).mapv(f32::abs).mean().unwrap_or(0.0) >= MIN_RENDERED_SEPARATION
                            })
                        });
                    if images_ok {
                        out.push(candidate);
                        rendered.push(mine);
                        break;
                    }
                }
                attempt += 1;
            }
        }
        out
    }

    pub fn for_identity(identity_id: u32, seed: u64) -> PersonSpec {
        Self::generate(seed, identity_id + 1)
            .pop()
            .expect("generate returns identity_id + 1 specs")
    }

    fn draw(identity_id: u32, rng: &mut ChaCha8Rng) -> PersonSpec {
        let jitter = |c: [f32; 3], rng: &mut ChaCha8Rng| {
            c.map(|v| (v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0))
        };
        let head = HEAD_COLORS[rng.random_range(0..HEAD_COLORS.len())];
        let torso = TORSO_COLORS[rng.random_range(0..TORSO_COLORS.len())];
        let legs = LEG_COLORS[rng.random_range(0..LEG_COLORS.len())];
        let palette = [jitter(head, rng), jitter(torso, rng), jitter(legs, rng)];
        let body = BodyShape {
            torso_height: rng.random_range(0.30..0.36),
            leg_length: rng.random_range(0.40..0.48),
            shoulder_width: rng.random_range(0.22..0.30),
        };
        let marker = AsymmetryMarker {
            color: MARKER_COLORS[rng.random_range(0..MARKER_COLORS.len())],
            side: if rng.random_bool(0.5) {
                Side::Left
            } else {
                Side::Right
            },
        };
        PersonSpec {
            identity_id,
            palette,
            body,
            marker,
        }
    }
}

/// Largest per-channel difference between two palettes.
pub fn palette_separation(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> f32 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Clean-render floor between identities, with headroom for camera gain
/// down to 0.8 and clamping.
const MIN_RENDERED_SEPARATION: f32 = 0.03;
const SEPARATION_ATTEMPTS: u64 = 2000;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewParams {
    pub azimuth_deg: u32,
    pub camera_style: usize,
    pub noise_seed: u64,
}

impl ViewParams {
    pub fn new(azimuth_deg: u32, camera_style: usize, noise_seed: u64) -> Self {
        ViewParams {
            azimuth_deg,
            camera_style,
            noise_seed,
        }
    }
}

/// Per-channel gain and bias applied to the whole image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraStyle {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
}

pub fn camera_style_table() -> [CameraStyle; MAX_CAMERA_STYLES] {
    let mut rng = ChaCha8Rng::seed_from_u64(CAMERA_TABLE_SEED);
    std::array::from_fn(|_| CameraStyle {
        gain: std::array::from_fn(|_| rng.random_range(0.8f32..1.2)),
        bias: std::array::from_fn(|_| rng.random_range(-0.06f32..0.06)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureMap {
    pub grid: Array3<f32>,
}

impl StructureMap {
    pub fn silhouette(&self) -> ndarray::ArrayView2<'_, f32> {
        self.grid.index_axis(Axis(0), 0)
    }

    /// Number of columns with any silhouette coverage above `threshold`.
    pub fn support_width(&self, threshold: f32) -> usize {
        let sil = self.silhouette();
        sil.axis_iter(Axis(1))
            .filter(|col| col.iter().any(|&v| v > threshold))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub image: Array3<f32>,
    pub structure: StructureMap,
    pub view: ViewParams,
    /// Evaluation-only ground truth.
    pub identity_id: u32,
    pub instance_index: usize,
}

/// Pixel grid geometry. The figure's unit height spans 7/8 of the rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            height: 64,
            width: 32,
        }
    }
}

impl Canvas {
    fn scale(&self) -> f32 {
        self.height as f32 * 0.875
    }

    fn ground(&self) -> f32 {
        self.height as f32 * 0.9375
    }

    fn center(&self) -> f32 {
        self.width as f32 * 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PartKind {
    Upper,
    Lower,
    Accessory,
}

#[derive(Clone, Copy, Debug)]
struct BoxPart {
    x: f32,
    z: f32,
    width: f32,
    depth: f32,
    y0: f32,
    y1: f32,
    kind: PartKind,
    color: [f32; 3],
}

fn body_parts(body: &BodyShape, palette: &[[f32; 3]; 3]) -> Vec<BoxPart> {
    let s = body.shoulder_width;
    let l = body.leg_length;
    let t = body.torso_height;
    let [head, torso, legs] = *palette;
    let part = |x, z, width, depth, y0, y1, kind, color| BoxPart {
        x,
        z,
        width,
        depth,
        y0,
        y1,
        kind,
        color,
    };
    vec![
        part(0.0, 0.06, 0.7 * s, 0.22, 0.0, 0.04, PartKind::Lower, legs),
        part(0.0, 0.0, 0.75 * s, 0.12, 0.03, l, PartKind::Lower, legs),
        part(0.0, 0.0, s, 0.14, l, l + t, PartKind::Upper, torso),
        part(0.0, 0.0, 0.12, 0.13, l + t, l + t + HEAD_HEIGHT, PartKind::Upper, head),
        part(-(s / 2.0 + 0.035), 0.0, 0.06, 0.07, l + 0.25 * t, l + t, PartKind::Upper, torso),
        part(s / 2.0 + 0.035, 0.0, 0.06, 0.07, l + 0.25 * t, l + t, PartKind::Upper, torso),
        part(0.0, -0.11, 0.65 * s, 0.08, l + 0.2 * t, l + 0.9 * t, PartKind::Accessory, BACKPACK_COLOR),
        part(s / 2.0 + 0.12, 0.0, 0.08, 0.07, l - 0.06, l + 0.2 * t, PartKind::Accessory, BAG_COLOR),
    ]
}

fn check_azimuth(azimuth_deg: u32) -> Result<()> {
    if azimuth_deg % 45 != 0 {
        return Err(Error::invalid(format!(
            "azimuth {azimuth_deg} is not a multiple of 45 degrees"
        )));
    }
    Ok(())
}

/// A projected part: pixel-space rectangle, depth toward the camera.
struct Projected {
    u0: f32,
    u1: f32,
    v0: f32,
    v1: f32,
    depth: f32,
    kind: PartKind,
    color: [f32; 3],
}

fn project_parts(canvas: &Canvas, parts: &[BoxPart], azimuth_deg: u32) -> Vec<Projected> {
    let theta = ((azimuth_deg % 360) as f32).to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    // Snap tiny values so 0/90/180/270 project exactly.
    let snap = |v: f32| if v.abs() < 1e-6 { 0.0 } else { v };
    let (sin, cos) = (snap(sin), snap(cos));
    let mut out: Vec<Projected> = parts
        .iter()
        .map(|p| {
            let xc = p.x * cos + p.z * sin;
            let depth = -p.x * sin + p.z * cos;
            let half = 0.5 * (p.width * cos.abs() + p.depth * sin.abs());
            let (scale, ground, center) = (canvas.scale(), canvas.ground(), canvas.center());
            Projected {
                u0: center + (xc - half) * scale,
                u1: center + (xc + half) * scale,
                v0: ground - p.y1 * scale,
                v1: ground - p.y0 * scale,
                depth,
                kind: p.kind,
                color: p.color,
            }
        })
        .collect();
    // Far parts first; stable sort keeps declaration order on ties.
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    out
}

fn overlap(lo: f32, hi: f32, cell: usize) -> f32 {
    let c0 = cell as f32;
    (hi.min(c0 + 1.0) - lo.max(c0)).max(0.0)
}

fn coverage(p: &Projected, row: usize, col: usize) -> f32 {
    overlap(p.v0, p.v1, row) * overlap(p.u0, p.u1, col)
}

fn composite_structure(canvas: &Canvas, projected: &[Projected]) -> StructureMap {
    let mut grid = Array3::<f32>::zeros((STRUCTURE_CHANNELS, canvas.height, canvas.width));
    for p in projected {
        for row in 0..canvas.height {
            for col in 0..canvas.width {
                let a = coverage(p, row, col);
                if a <= 0.0 {
                    continue;
                }
                for ch in 0..STRUCTURE_CHANNELS {
                    let target = match (ch, p.kind) {
                        (0, _) => 1.0,
                        (1, PartKind::Upper) | (2, PartKind::Lower) => 1.0,
                        _ => 0.0,
                    };
                    let v = &mut grid[[ch, row, col]];
                    *v = *v * (1.0 - a) + target * a;
                }
            }
        }
    }
    StructureMap { grid }
}

/// Structure map of `body` seen at `azimuth_deg`.
pub fn project_body(canvas: &Canvas, body: &BodyShape, azimuth_deg: u32) -> Result<StructureMap> {
    check_azimuth(azimuth_deg)?;
    let parts = body_parts(body, &[[0.0; 3]; 3]);
    Ok(composite_structure(
        canvas,
        &project_parts(canvas, &parts, azimuth_deg),
    ))
}

/// Rotated-projection oracle on the default canvas.
pub fn project_structure(spec: &PersonSpec, azimuth_deg: u32) -> Result<StructureMap> {
    project_body(&Canvas::default(), &spec.body, azimuth_deg)
}

/// Back-facing views show the marker.
pub fn marker_visible(azimuth_deg: u32) -> bool {
    (180..360).contains(&(azimuth_deg % 360))
}

pub fn render_person(spec: &PersonSpec, view: &ViewParams) -> Result<RenderedSample> {
    render_person_on(&Canvas::default(), spec, view, DEFAULT_NOISE)
}

pub const DEFAULT_NOISE: f32 = 0.02;

/// Unstyled, noise-free image together with its structure map.
fn paint(canvas: &Canvas, spec: &PersonSpec, azimuth_deg: u32) -> (Array3<f32>, StructureMap) {
    let parts = body_parts(&spec.body, &spec.palette);
    let projected = project_parts(canvas, &parts, azimuth_deg);
    let structure = composite_structure(canvas, &projected);

    let (h, w) = (canvas.height, canvas.width);
    let mut image = Array3::<f32>::zeros((3, h, w));
    for p in &projected {
        for row in 0..h {
            for col in 0..w {
                let a = coverage(p, row, col);
                if a <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    let v = &mut image[[ch, row, col]];
                    *v = *v * (1.0 - a) + p.color[ch] * a;
                }
            }
        }
    }

    if marker_visible(azimuth_deg) {
        let b = &spec.body;
        let sign = match spec.marker.side {
            Side::Left => -1.0,
            Side::Right => 1.0,
        };
        let arm = BoxPart {
            x: sign * (b.shoulder_width / 2.0 + 0.035),
            z: 0.0,
            width: 0.05,
            depth: 0.05,
            y0: b.leg_length + 0.5 * b.torso_height,
            y1: b.leg_length + 0.5 * b.torso_height + 0.07,
            kind: PartKind::Upper,
            color: spec.marker.color,
        };
        for p in project_parts(canvas, &[arm], azimuth_deg) {
            // Widen to at least two pixels so it survives foreshortening.
            let mid = 0.5 * (p.u0 + p.u1);
            let p = Projected {
                u0: p.u0.min(mid - 1.0),
                u1: p.u1.max(mid + 1.0),
                ..p
            };
            for row in 0..h {
                for col in 0..w {
                    let a = coverage(&p, row, col);
                    for ch in 0..3 {
                        let v = &mut image[[ch, row, col]];
                        *v = *v * (1.0 - a) + p.color[ch] * a;
                    }
                }
            }
        }
    }
    (image, structure)
}

pub fn render_person_on(
    canvas: &Canvas,
    spec: &PersonSpec,
    view: &ViewParams,
    noise: f32,
) -> Result<RenderedSample> {
    check_azimuth(view.azimuth_deg)?;
    if view.camera_style >= MAX_CAMERA_STYLES {
        return Err(Error::invalid(format!(
            "camera style {} outside table of {MAX_CAMERA_STYLES}",
            view.camera_style
        )));
    }
    let (mut image, structure) = paint(canvas, spec, view.azimuth_deg);
    let style = camera_style_table()[view.camera_style];
    let mut rng = ChaCha8Rng::seed_from_u64(view.noise_seed);
    for ch in 0..3 {
        for v in image.index_axis_mut(Axis(0), ch).iter_mut() {
            let n = if noise > 0.0 {
                rng.random_range(-noise..noise)
            } else {
                0.0
            };
            *v = (style.gain[ch] * *v + style.bias[ch] + n).clamp(0.0, 1.0);
        }
    }

    Ok(RenderedSample {
        image,
        structure,
        view: *view,
        identity_id: spec.identity_id,
        instance_index: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_identities: u32,
    pub views_per_identity: u32,
    pub camera_styles: u32,
    pub noise: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            n_identities: 16,
            views_per_identity: 8,
            camera_styles: 2,
            noise: DEFAULT_NOISE,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 {
            return Err(Error::Config("n_identities must be positive".into()));
        }
        if self.views_per_identity == 0 || self.views_per_identity > AZIMUTHS.len() as u32 {
            return Err(Error::Config(format!(
                "views_per_identity must lie in 1..={}",
                AZIMUTHS.len()
            )));
        }
        if self.camera_styles == 0 || self.camera_styles as usize > MAX_CAMERA_STYLES {
            return Err(Error::Config(format!(
                "camera_styles must lie in 1..={MAX_CAMERA_STYLES}"
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub instance_index: usize,
    pub path: String,
    pub identity_id: u32,
    pub azimuth_deg: u32,
    pub camera_style: usize,
    pub noise_seed: u64,
    /// Recovered body shape, the input for every structure projection.
    pub mesh: BodyShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldConfig,
    pub records: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const WORLD_FILE: &str = "world.json";
pub const IMAGE_DIR: &str = "images";

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let world_path = root.join(WORLD_FILE);
        fs::write(&world_path, serde_json::to_string_pretty(&self.world)?)
            .map_err(|e| Error::io(&world_path, e))?;
        let path = root.join(MANIFEST_FILE);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for rec in &self.records {
            writeln!(file, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let world_path = root.join(WORLD_FILE);
        let text = fs::read_to_string(&world_path).map_err(|e| Error::io(&world_path, e))?;
        let world: WorldConfig = serde_json::from_str(&text)?;
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<SampleRecord>(&line)?);
        }
        let manifest = DatasetManifest { world, records };
        manifest.check_indices(&path)?;
        Ok(manifest)
    }

    fn check_indices(&self, path: &Path) -> Result<()> {
        let mut seen = vec![false; self.records.len()];
        for rec in &self.records {
            match seen.get_mut(rec.instance_index) {
                Some(flag) if !*flag => *flag = true,
                _ => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: format!("instance_index {} duplicated or out of range", rec.instance_index),
                    })
                }
            }
        }
        Ok(())
    }
}

/// Samples of the world described by `config`, in manifest order.
pub fn render_world(config: &WorldConfig) -> Result<Vec<(PersonSpec, RenderedSample)>> {
    config.validate()?;
    let specs = PersonSpec::generate(config.seed, config.n_identities);
    let mut out = Vec::new();
    for spec in &specs {
        for &azimuth in &AZIMUTHS[..config.views_per_identity as usize] {
            for style in 0..config.camera_styles as usize {
                let index = out.len();
                let view = ViewParams::new(azimuth, style, mix(config.seed, 0xface, index as u64));
                let canvas = Canvas::default();
                let mut sample = render_person_on(&canvas, spec, &view, config.noise)?;
                sample.instance_index = index;
                out.push((spec.clone(), sample));
            }
        }
    }
    Ok(out)
}

/// Renders the world into `root/images/*.png` plus `root/manifest.jsonl`.
pub fn generate_dataset(config: &WorldConfig, root: &Path) -> Result<DatasetManifest> {
    let samples = render_world(config)?;
    let image_dir = root.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (spec, sample) in &samples {
        let rel = format!("{IMAGE_DIR}/{:05}.png", sample.instance_index);
        save_png(&sample.image, &root.join(&rel))?;
        records.push(SampleRecord {
            instance_index: sample.instance_index,
            path: rel,
            identity_id: spec.identity_id,
            azimuth_deg: sample.view.azimuth_deg,
            camera_style: sample.view.camera_style,
            noise_seed: sample.view.noise_seed,
            mesh: spec.body,
        });
    }
    let manifest = DatasetManifest {
        world: config.clone(),
        records,
    };
    manifest.save(root)?;
    Ok(manifest)
}

pub fn save_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb(std::array::from_fn(|ch| to_u8(image[[ch, y, x]])));
    }
    buf.save(path)?;
    Ok(())
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// An in-memory training set. Identity labels are kept apart from the
/// samples and exposed only for evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub canvas: Canvas,
    pub samples: Vec<TrainSample>,
    identity_labels: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub instance_index: usize,
    pub image: Array3<f32>,
    pub mesh: BodyShape,
    pub azimuth_deg: u32,
    pub camera_style: usize,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::load(root)?;
        let mut records = manifest.records.clone();
        records.sort_by_key(|r| r.instance_index);
        let mut samples = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for rec in &records {
            let image = load_png(&root.join(&rec.path))?;
            samples.push(TrainSample {
                instance_index: rec.instance_index,
                image,
                mesh: rec.mesh,
                azimuth_deg: rec.azimuth_deg,
                camera_style: rec.camera_style,
            });
            labels.push(rec.identity_id);
        }
        Self::from_parts(Canvas::default(), samples, labels)
    }

    /// Builds a dataset directly from rendered samples, quantized to 8 bits
    /// exactly as a PNG round trip would.
    pub fn from_world(config: &WorldConfig) -> Result<Dataset> {
        let rendered = render_world(config)?;
        let mut samples = Vec::with_capacity(rendered.len());
        let mut labels = Vec::with_capacity(rendered.len());
        for (spec, s) in rendered {
            samples.push(TrainSample {
                instance_index: s.instance_index,
                image: s.image.mapv(|v| to_u8(v) as f32 / 255.0),
                mesh: spec.body,
                azimuth_deg: s.view.azimuth_deg,
                camera_style: s.view.camera_style,
            });
            labels.push(spec.identity_id);
        }
        Self::from_parts(Canvas::default(), samples, labels)
    }

    pub fn from_parts(canvas: Canvas, samples: Vec<TrainSample>, identity_labels: Vec<u32>) -> Result<Dataset> {
        if samples.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if samples.len() != identity_labels.len() {
            return Err(Error::invalid("one identity label per sample required"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.instance_index != i {
                return Err(Error::invalid("samples must be ordered by instance_index"));
            }
            if s.image.dim() != (3, canvas.height, canvas.width) {
                return Err(Error::invalid(format!(
                    "sample {i} has shape {:?}, canvas is {}x{}",
                    s.image.dim(),
                    canvas.height,
                    canvas.width
                )));
            }
        }
        Ok(Dataset {
            canvas,
            samples,
            identity_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth identities, for evaluation code only.
    pub fn identity_labels(&self) -> &[u32] {
        &self.identity_labels
    }

    pub fn structure(&self, index: usize, azimuth_deg: u32) -> Result<StructureMap> {
        let s = &self.samples[index];
        project_body(&self.canvas, &s.mesh, azimuth_deg % 360)
    }

    /// A subset, re-indexed from zero.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (new, &old) in indices.iter().enumerate() {
            let mut s = self.samples[old].clone();
            s.instance_index = new;
            samples.push(s);
            labels.push(self.identity_labels[old]);
        }
        Self::from_parts(self.canvas, samples, labels)
    }
}

pub fn default_manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}
