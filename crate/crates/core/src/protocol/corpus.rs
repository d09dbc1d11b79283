//! Deterministic synthetic shapes corpus and its on-disk layout.
//!
//! Each foreground class is a fixed (shape, colour) pair painted over a grey
//! textured background. Layout on disk:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<id>.bin   tensor blob (3×H×W, f64)
//! <dir>/labels/<id>.bin   b"EDLL", u32 height, u32 width, height·width u8 labels
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, LabelMap, LabeledSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Tensor};

const CHANNELS: usize = 3;
const MIN_FG: f64 = 0.05;
const MAX_FG: f64 = 0.5;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeProfile {
    /// All classes drawn with similar size and frequency.
    #[default]
    Balanced,
    /// Size and frequency shrink with the class id: class 1 is the largest.
    Imbalanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub size_profile: SizeProfile,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_classes: 10,
            images: 200,
            height: 64,
            width: 64,
            min_shapes: 1,
            max_shapes: 3,
            size_profile: SizeProfile::Balanced,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::InvalidArgument(format!(
                "corpus needs 2..=254 classes, got {}",
                self.num_classes
            )));
        }
        if self.images == 0 {
            return Err(Error::InvalidArgument("corpus needs at least one image".into()));
        }
        if self.min_shapes == 0 || self.max_shapes < self.min_shapes {
            return Err(Error::InvalidArgument(format!(
                "shapes per image range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} too small to place a shape (minimum 16x16)",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<LabeledSample>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        self.samples.iter().position(|s| s.id == id).map(|i| self.splits[i])
    }

    pub fn train(&self) -> Vec<LabeledSample> {
        self.subset(Split::Train)
    }

    pub fn test(&self) -> Vec<LabeledSample> {
        self.subset(Split::Test)
    }

    fn subset(&self, split: Split) -> Vec<LabeledSample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let k = self.config.num_classes;
        let mut histogram: Vec<ClassStat> = (1..=k)
            .map(|c| ClassStat {
                class: c as ClassId,
                images: 0,
                pixels: 0,
            })
            .collect();
        let mut background_pixels = 0;
        let image_ids = self
            .samples
            .iter()
            .zip(&self.splits)
            .map(|(s, &split)| {
                for &v in s.labels.data() {
                    match v {
                        0 => background_pixels += 1,
                        IGNORE_LABEL => {}
                        c => histogram[c as usize - 1].pixels += 1,
                    }
                }
                let present = s.labels.classes_present();
                for &c in &present {
                    histogram[c as usize - 1].images += 1;
                }
                ManifestEntry {
                    id: s.id,
                    split,
                    classes_present: present.into_iter().collect(),
                }
            })
            .collect();
        Manifest {
            seed: self.config.seed,
            num_classes: k,
            generator: self.config.clone(),
            background_pixels,
            class_histogram: histogram,
            image_ids,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: ClassId,
    pub images: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub classes_present: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub generator: CorpusConfig,
    pub background_pixels: usize,
    pub class_histogram: Vec<ClassStat>,
    pub image_ids: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disc,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    fn of_class(class: usize) -> Self {
        [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Diamond, Shape::Cross][(class - 1) % 5]
    }

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Triangle => {
                let t = (dy + r) / (1.7 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
        }
    }
}

/// Saturated colour for a class: hues spread around the wheel, brightness alternating.
fn class_colour(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = (class - 1) as f64 / num_classes as f64 * 6.0;
    let value = if class % 2 == 0 { 0.95 } else { 0.75 };
    let saturation = 0.9;
    let chroma = value * saturation;
    let x = chroma * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = value - chroma;
    [r + m, g + m, b + m]
}

fn radius_range(class: usize, cfg: &CorpusConfig) -> (f64, f64) {
    let unit = cfg.height.min(cfg.width) as f64 / 64.0;
    let scale = match cfg.size_profile {
        SizeProfile::Balanced => 1.0,
        SizeProfile::Imbalanced => {
            1.25 - 0.65 * (class - 1) as f64 / (cfg.num_classes - 1) as f64
        }
    };
    (6.0 * unit * scale, 10.0 * unit * scale)
}

/// Foreground classes guaranteed for each image so that every class appears
/// in at least `ceil(images / classes)` images.
fn mandatory_classes(cfg: &CorpusConfig) -> Vec<Vec<usize>> {
    let (n, k) = (cfg.images, cfg.num_classes);
    let per_class = n.div_ceil(k);
    let mut out = vec![Vec::new(); n];
    for slot in 0..k * per_class {
        let class = slot % k + 1;
        let image = slot % n;
        if !out[image].contains(&class) {
            out[image].push(class);
        }
    }
    out
}

struct Canvas<'a> {
    cfg: &'a CorpusConfig,
    labels: Vec<u8>,
    pixels: Vec<[f64; 3]>,
    foreground: usize,
}

impl Canvas<'_> {
    fn fg_fraction(&self) -> f64 {
        self.foreground as f64 / self.labels.len() as f64
    }

    /// Paints a non-overlapping shape of `class`, or returns false.
    fn try_place(&mut self, class: usize, rng: &mut ChaCha8Rng) -> bool {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let (rmin, rmax) = radius_range(class, self.cfg);
        let shape = Shape::of_class(class);
        let colour = class_colour(class, self.cfg.num_classes);
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(rmin..=rmax);
            let reach = r.ceil() as usize + 1;
            if 2 * reach + 1 > h.min(w) {
                continue;
            }
            let cy = rng.random_range(reach..h - reach);
            let cx = rng.random_range(reach..w - reach);
            let mut footprint = Vec::new();
            let mut clash = false;
            'scan: for y in cy - reach..=cy + reach {
                for x in cx - reach..=cx + reach {
                    let covered = shape.covers(x as f64 - cx as f64, y as f64 - cy as f64, r);
                    if self.labels[y * w + x] != 0 {
                        clash = true;
                        break 'scan;
                    }
                    if covered {
                        footprint.push(y * w + x);
                    }
                }
            }
            if clash || footprint.is_empty() {
                continue;
            }
            if (self.foreground + footprint.len()) as f64 > MAX_FG * self.labels.len() as f64 {
                continue;
            }
            for &p in &footprint {
                self.labels[p] = class as u8;
                let mut px = [0.0; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (colour[c] + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
                }
                self.pixels[p] = px;
            }
            self.foreground += footprint.len();
            return true;
        }
        false
    }
}

fn pick_extra_class(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> usize {
    match cfg.size_profile {
        SizeProfile::Balanced => rng.random_range(1..=cfg.num_classes),
        SizeProfile::Imbalanced => {
            let weights: Vec<f64> = (1..=cfg.num_classes).map(|c| 1.0 / c as f64).collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    return i + 1;
                }
                pick -= w;
            }
            cfg.num_classes
        }
    }
}

fn render_image(cfg: &CorpusConfig, id: usize, mandatory: &[usize]) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);
    let (h, w) = (cfg.height, cfg.width);

    let freq_y = rng.random_range(0.05..0.3);
    let freq_x = rng.random_range(0.05..0.3);
    let phase = rng.random_range(0.0..2.0 * PI);
    let base = rng.random_range(0.3..0.5);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = base
                + 0.1 * (freq_y * y as f64 + freq_x * x as f64 + phase).sin()
                + rng.random_range(-0.05..0.05);
            pixels.push([v; 3]);
        }
    }
    let mut canvas = Canvas {
        cfg,
        labels: vec![0; h * w],
        pixels,
        foreground: 0,
    };

    let mut order = mandatory.to_vec();
    order.shuffle(&mut rng);
    for &class in &order {
        if !canvas.try_place(class, &mut rng) {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} too small to place class {class} in image {id}"
            )));
        }
    }
    let target = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in order.len()..target {
        let class = pick_extra_class(cfg, &mut rng);
        canvas.try_place(class, &mut rng);
    }
    let mut attempts = 0;
    while canvas.fg_fraction() < MIN_FG {
        let class = order[attempts % order.len()];
        canvas.try_place(class, &mut rng);
        attempts += 1;
        if attempts > 64 {
            return Err(Error::InvalidArgument(format!(
                "could not reach {MIN_FG} foreground in image {id}"
            )));
        }
    }

    let mut data = vec![0.0; CHANNELS * h * w];
    for (p, px) in canvas.pixels.iter().enumerate() {
        for c in 0..CHANNELS {
            data[c * h * w + p] = px[c];
        }
    }
    LabeledSample::new(id, Tensor::new(&[CHANNELS, h, w], data)?, LabelMap::new(h, w, canvas.labels)?)
}

/// Test split: every fifth round of the class-cycling image order, so test
/// images carry every class about equally often.
fn split_of(id: usize, num_classes: usize) -> Split {
    if (id / num_classes) % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn generate_shapes_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mandatory = mandatory_classes(cfg);
    let samples = mandatory
        .iter()
        .enumerate()
        .map(|(id, m)| render_image(cfg, id, m))
        .collect::<Result<Vec<_>>>()?;
    let splits = (0..cfg.images).map(|id| split_of(id, cfg.num_classes)).collect();
    Ok(Corpus {
        config: cfg.clone(),
        samples,
        splits,
    })
}

const LABEL_MAGIC: &[u8; 4] = b"EDLL";

fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + labels.data().len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.height() as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width() as u32).to_le_bytes());
    out.extend_from_slice(labels.data());
    out
}

fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let mut cursor = bytes;
    let fail = |reason: String| Error::format(path, reason);
    if tensor_io::take(&mut cursor, 4).map_err(fail)? != LABEL_MAGIC {
        return Err(Error::format(path, "bad label magic"));
    }
    let h = u32::from_le_bytes(tensor_io::take(&mut cursor, 4).map_err(fail)?.try_into().unwrap());
    let w = u32::from_le_bytes(tensor_io::take(&mut cursor, 4).map_err(fail)?.try_into().unwrap());
    if cursor.len() != h as usize * w as usize {
        return Err(Error::format(path, "label payload size mismatch"));
    }
    LabelMap::new(h as usize, w as usize, cursor.to_vec())
}

fn file_name(id: usize) -> String {
    format!("{id:05}.bin")
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &corpus.samples {
        tensor_io::save(&s.image, &images.join(file_name(s.id)))?;
        let path = labels.join(file_name(s.id));
        std::fs::write(&path, encode_labels(&s.labels)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = corpus.manifest();
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.image_ids.len());
    let mut splits = Vec::with_capacity(manifest.image_ids.len());
    for entry in &manifest.image_ids {
        let image = tensor_io::load(&dir.join("images").join(file_name(entry.id)))?;
        let lpath = dir.join("labels").join(file_name(entry.id));
        let bytes = std::fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let labels = decode_labels(&bytes, &lpath)?;
        let present: BTreeSet<ClassId> = entry.classes_present.iter().copied().collect();
        if labels.classes_present() != present {
            return Err(Error::format(&lpath, "labels disagree with manifest classes_present"));
        }
        if labels.data().iter().any(|&v| v != IGNORE_LABEL && v as usize > manifest.num_classes) {
            return Err(Error::format(&lpath, "label id exceeds num_classes"));
        }
        samples.push(LabeledSample::new(entry.id, image, labels)?);
        splits.push(entry.split);
    }
    Ok(Corpus {
        config: manifest.generator,
        samples,
        splits,
    })
}
