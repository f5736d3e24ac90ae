//! Procedural class-conditional image sets and their on-disk layout.
//!
//! A dataset directory holds `images/<id>.png`, `labels.json`, and for the
//! tight-mode set a `modes.json` manifest splitting ids into the tight mode
//! and the off-mode remainder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.json";
pub const MODES_FILE: &str = "modes.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Generic class-conditional shapes.
    Shapes,
    /// Per class, a sub-population sharing one global layout that differs
    /// only in high-frequency texture, plus a broad off-mode remainder.
    Tightmode,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(DatasetKind::Shapes),
            "tightmode" => Ok(DatasetKind::Tightmode),
            other => Err(Error::Usage(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Load from this directory instead of generating in memory.
    pub dir: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub tight_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            dir: String::new(),
            num_classes: 10,
            per_class: 64,
            image_size: 32,
            tight_fraction: 0.5,
            seed: 0,
        }
    }
}

/// One minibatch handed to the trainer.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Images in `[-1, 1]`, quantized to 8-bit levels so that a dataset reloaded
/// from PNG is bit-identical to the generated one.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
    /// `Some(true)` for tight-mode members (tight-mode sets only).
    pub tight: Option<Vec<bool>>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelEntry {
    id: String,
    label: u32,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelsFile {
    num_classes: usize,
    image_size: usize,
    channels: usize,
    samples: Vec<LabelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeManifest {
    pub tight: BTreeMap<u32, Vec<String>>,
    pub off: BTreeMap<u32, Vec<String>>,
}

fn to_level(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_level(l: u8) -> f32 {
    l as f32 / 255.0 * 2.0 - 1.0
}

const PALETTE: [[f64; 3]; 10] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.8, -0.5],
    [-0.5, -0.4, 0.9],
    [0.9, 0.8, -0.7],
    [0.8, -0.5, 0.8],
    [-0.6, 0.8, 0.8],
    [0.95, 0.2, -0.8],
    [0.1, 0.5, -0.2],
    [0.9, 0.9, 0.9],
    [-0.1, -0.1, 0.4],
];

/// Geometry of one drawn shape, in pixel units.
#[derive(Debug, Clone, Copy)]
struct Layout {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
    background: f64,
}

/// Whether pixel `(x, y)` falls inside shape `kind` with the given layout.
fn inside(kind: usize, l: &Layout, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - l.cx, y - l.cy);
    let r = l.radius;
    match kind % 10 {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        4 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        5 => dx.abs() <= r && dy.abs() <= r && ((dy + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        6 => dx.abs() <= r && dy.abs() <= r && ((dx + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        7 => dx.abs() + dy.abs() <= r,
        8 => {
            dx.abs() <= r
                && dy.abs() <= r
                && (((dx + r) / (r * 0.5)).floor() as i64 + ((dy + r) / (r * 0.5)).floor() as i64) % 2 == 0
        }
        _ => dx.abs() <= r && dy.abs() <= r && (dx - dy).abs() <= r * 0.35,
    }
}

fn render(kind: usize, l: &Layout, size: usize, texture: &dyn Fn(usize, usize, usize) -> f64) -> Vec<u8> {
    let mut out = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let hit = inside(kind, l, x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                let base = if hit { l.color[c] } else { l.background };
                out[(c * size + y) * size + x] = to_level(base + texture(c, y, x));
            }
        }
    }
    out
}

fn class_color(class: usize) -> [f64; 3] {
    let mut c = PALETTE[class % PALETTE.len()];
    // Classes beyond the palette reuse it with a brightness shift.
    let shift = 0.15 * (class / PALETTE.len()) as f64;
    for v in &mut c {
        *v = (*v - shift).clamp(-1.0, 1.0);
    }
    c
}

fn random_layout(rng: &mut ChaCha8Rng, class: usize, size: usize) -> Layout {
    let s = size as f64;
    let mut color = class_color(class);
    for v in &mut color {
        *v = (*v + rng.random_range(-0.15..0.15)).clamp(-1.0, 1.0);
    }
    Layout {
        cx: s / 2.0 + rng.random_range(-s / 6.0..s / 6.0),
        cy: s / 2.0 + rng.random_range(-s / 6.0..s / 6.0),
        radius: rng.random_range(s / 5.0..s / 3.0),
        color,
        background: rng.random_range(-0.9..-0.3),
    }
}

fn canonical_layout(class: usize, size: usize) -> Layout {
    let s = size as f64;
    Layout {
        cx: s / 2.0,
        cy: s / 2.0,
        radius: s * 0.3,
        color: class_color(class),
        background: -0.6,
    }
}

/// A zero-mean, pixel-scale pattern: checkerboard, 1-px stripes, or noise.
fn high_frequency_texture(rng: &mut ChaCha8Rng, size: usize, amplitude: f64) -> Vec<f64> {
    let kind = rng.random_range(0..4);
    let phase = rng.random_range(0..2usize);
    let mut tex = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let sign = match kind {
                0 => ((x + y + phase) % 2) as f64,
                1 => ((x + phase) % 2) as f64,
                2 => ((y + phase) % 2) as f64,
                _ => rng.random_range(0..2) as f64,
            };
            tex[y * size + x] = amplitude * (2.0 * sign - 1.0);
        }
    }
    tex
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.dims()[1]
    }

    pub fn generate(config: &DataConfig) -> Result<Self> {
        if config.num_classes == 0 || config.per_class == 0 || config.image_size < 4 {
            return Err(Error::Config(
                "dataset needs num_classes, per_class >= 1 and image_size >= 4".into(),
            ));
        }
        match config.kind {
            DatasetKind::Shapes => Ok(Self::shapes(config)),
            DatasetKind::Tightmode => {
                if !(0.0..=1.0).contains(&config.tight_fraction) {
                    return Err(Error::Config("data.tight_fraction outside [0, 1]".into()));
                }
                Ok(Self::tightmode(config))
            }
        }
    }

    fn from_levels(levels: Vec<u8>, labels: Vec<u32>, tight: Option<Vec<bool>>, num_classes: usize, size: usize) -> Self {
        let n = labels.len();
        let data: Vec<f32> = levels.into_iter().map(from_level).collect();
        let images = Tensor::from_vec(data, (n, 3, size, size), &Device::Cpu)
            .expect("level buffer matches image shape");
        let ids = (0..n).map(|i| format!("{i:06}")).collect();
        Self {
            images,
            labels,
            ids,
            tight,
            num_classes,
        }
    }

    fn shapes(config: &DataConfig) -> Self {
        let size = config.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut levels = Vec::new();
        let mut labels = Vec::new();
        for class in 0..config.num_classes {
            for _ in 0..config.per_class {
                let layout = random_layout(&mut rng, class, size);
                let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-0.03..0.03)).collect();
                levels.extend(render(class, &layout, size, &|c, y, x| noise[(c * size + y) * size + x]));
                labels.push(class as u32);
            }
        }
        Self::from_levels(levels, labels, None, config.num_classes, size)
    }

    fn tightmode(config: &DataConfig) -> Self {
        let size = config.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_tight = (config.tight_fraction * config.per_class as f64).round() as usize;
        let mut levels = Vec::new();
        let mut labels = Vec::new();
        let mut tight = Vec::new();
        for class in 0..config.num_classes {
            for i in 0..config.per_class {
                let is_tight = i < n_tight;
                let img = if is_tight {
                    let tex = high_frequency_texture(&mut rng, size, 0.25);
                    render(class, &canonical_layout(class, size), size, &|_, y, x| tex[y * size + x])
                } else {
                    let layout = random_layout(&mut rng, class, size);
                    render(class, &layout, size, &|_, _, _| 0.0)
                };
                levels.extend(img);
                labels.push(class as u32);
                tight.push(is_tight);
            }
        }
        Self::from_levels(levels, labels, Some(tight), config.num_classes, size)
    }

    /// Generate, or load when `config.dir` is set.
    pub fn from_config(config: &DataConfig) -> Result<Self> {
        if config.dir.is_empty() {
            Self::generate(config)
        } else {
            Self::load_dir(Path::new(&config.dir))
        }
    }

    pub fn mode_manifest(&self) -> Option<ModeManifest> {
        let tight = self.tight.as_ref()?;
        let mut m = ModeManifest {
            tight: BTreeMap::new(),
            off: BTreeMap::new(),
        };
        for (i, &is_tight) in tight.iter().enumerate() {
            let side = if is_tight { &mut m.tight } else { &mut m.off };
            side.entry(self.labels[i]).or_default().push(self.ids[i].clone());
        }
        Some(m)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join(IMAGES_DIR);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let size = self.image_size();
        let mut samples = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let file = format!("{IMAGES_DIR}/{}.png", self.ids[i]);
            let img = self.images.get(i)?;
            write_png(&dir.join(&file), &img)?;
            samples.push(LabelEntry {
                id: self.ids[i].clone(),
                label: self.labels[i],
                file,
            });
        }
        let labels = LabelsFile {
            num_classes: self.num_classes,
            image_size: size,
            channels: self.channels(),
            samples,
        };
        let path = dir.join(LABELS_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&labels)?).map_err(|e| Error::io(&path, e))?;
        if let Some(m) = self.mode_manifest() {
            let path = dir.join(MODES_FILE);
            fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(LABELS_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let labels: LabelsFile =
            serde_json::from_slice(&raw).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        let size = labels.image_size;
        let mut data = Vec::with_capacity(labels.samples.len() * 3 * size * size);
        for s in &labels.samples {
            let p = dir.join(&s.file);
            let img = image::open(&p)?.to_rgb8();
            if img.width() as usize != size || img.height() as usize != size {
                return Err(Error::corrupt(p, format!("expected {size}x{size} image")));
            }
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        data.push(from_level(img.get_pixel(x as u32, y as u32)[c]));
                    }
                }
            }
        }
        let n = labels.samples.len();
        let images = Tensor::from_vec(data, (n, 3, size, size), &Device::Cpu)?;
        let ids: Vec<String> = labels.samples.iter().map(|s| s.id.clone()).collect();
        let tight = match fs::read(dir.join(MODES_FILE)) {
            Ok(raw) => {
                let m: ModeManifest = serde_json::from_slice(&raw)
                    .map_err(|e| Error::corrupt(dir.join(MODES_FILE), e.to_string()))?;
                let members: std::collections::HashSet<&String> = m.tight.values().flatten().collect();
                Some(ids.iter().map(|id| members.contains(id)).collect())
            }
            Err(_) => None,
        };
        Ok(Self {
            images,
            labels: labels.samples.iter().map(|s| s.label).collect(),
            ids,
            tight,
            num_classes: labels.num_classes,
        })
    }

    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!("sample index {bad} out of range")));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(Batch {
            images: self.images.index_select(&idx, 0)?.to_dtype(dtype)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    /// The selected samples as a new dataset.
    pub fn take(&self, indices: &[usize]) -> Result<Dataset> {
        let b = self.batch(indices, DType::F32)?;
        Ok(Dataset {
            images: b.images,
            labels: b.labels,
            ids: b.ids,
            tight: self
                .tight
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            num_classes: self.num_classes,
        })
    }

    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Write one `[C, H, W]` image in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    let data = image.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|k| to_level(data[((k.min(c - 1)) * h + y) * w + x]));
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Tile a `[B, C, H, W]` batch into one PNG, `cols` images per row.
pub fn write_png_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let (b, c, h, w) = images.dims4()?;
    let cols = cols.clamp(1, b.max(1));
    let rows = b.div_ceil(cols);
    let data = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut buf = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..b {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|k| to_level(data[((i * c + k.min(c - 1)) * h + y) * w + x]));
                buf.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, image::Rgb(px));
            }
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
