//! Synthetic implicit-concept dataset: procedural scenes with grammar
//! captions, a controlled fraction of which carry a stamped concept that the
//! caption never mentions.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GeomError, Result};
use crate::geometry::Detection;
use crate::image::GrayImage;
use crate::vocab::ConceptKind;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

/// Stamps narrower than this cannot be told apart from texture.
pub const MIN_STAMP_SIDE: usize = 6;

/// Height of the text stamp band (one glyph row).
pub const GLYPH_H: usize = 5;
pub const GLYPH_W: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shade {
    Dark,
    Mid,
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    Gradient,
    Noise,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Shade {
    pub const ALL: [Shade; 3] = [Shade::Dark, Shade::Mid, Shade::Light];
    pub fn word(self) -> &'static str {
        match self {
            Shade::Dark => "dark",
            Shade::Mid => "mid",
            Shade::Light => "light",
        }
    }
    fn level(self) -> f32 {
        match self {
            Shade::Dark => 0.12,
            Shade::Mid => 0.32,
            Shade::Light => 0.88,
        }
    }
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Plain, Background::Gradient, Background::Noise];
    pub fn word(self) -> &'static str {
        match self {
            Background::Plain => "plain",
            Background::Gradient => "gradient",
            Background::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub shape: Shape,
    pub shade: Shade,
    pub background: Background,
    pub seed: u64,
}

impl SceneSpec {
    pub fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        Self {
            size,
            shape: Shape::ALL[rng.random_range(0..3)],
            shade: Shade::ALL[rng.random_range(0..3)],
            background: Background::ALL[rng.random_range(0..3)],
            seed: rng.random(),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} on {}",
            self.shade.word(),
            self.shape.word(),
            self.background.word()
        )
    }
}

/// Deterministic scene rendering: background, then one shape near the centre.
pub fn render_base(spec: &SceneSpec) -> (GrayImage, String) {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = size as f32 / 32.0;
    let mut img = GrayImage::filled(size, size, 0.55);
    match spec.background {
        Background::Plain => {}
        Background::Gradient => {
            for y in 0..size {
                for x in 0..size {
                    img.set(x, y, 0.4 + 0.3 * x as f32 / (size - 1).max(1) as f32);
                }
            }
        }
        Background::Noise => {
            for v in &mut img.data {
                *v = 0.55 + rng.random_range(-0.08f32..0.08);
            }
        }
    }
    let cx = size as f32 / 2.0 + rng.random_range(-3.0f32..3.0) * scale;
    let cy = size as f32 / 2.0 + rng.random_range(-3.0f32..3.0) * scale;
    let r = rng.random_range(6.0f32..9.0) * scale;
    let level = spec.shade.level();
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = match spec.shape {
                Shape::Circle => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                Shape::Triangle => {
                    // apex up; half width grows linearly to r at the base
                    let t = (dy + r) / (2.0 * r);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * r
                }
            };
            if inside {
                img.set(x, y, level);
            }
        }
    }
    (img, spec.caption())
}

/// How one concept kind is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptStamp {
    pub kind: ConceptKind,
    /// Side length range as a fraction of the image side.
    pub size_fraction: (f64, f64),
    pub opacity: f32,
}

impl ConceptStamp {
    pub fn for_kind(kind: ConceptKind) -> Self {
        let opacity = match kind {
            ConceptKind::Watermark => 0.4,
            ConceptKind::Qr | ConceptKind::Text => 1.0,
        };
        Self {
            kind,
            size_fraction: (0.25, 0.5),
            opacity,
        }
    }

    /// Inclusive integer side range for an image of side `size`.
    pub fn side_range(&self, size: usize) -> Result<(usize, usize)> {
        let lo = ((self.size_fraction.0 * size as f64).ceil() as usize).max(MIN_STAMP_SIDE);
        let hi = (self.size_fraction.1 * size as f64).floor() as usize;
        if hi < lo {
            return Err(invalid(format!(
                "a {size}px image cannot hold a {} stamp of at least {lo}px",
                self.kind
            )));
        }
        Ok((lo, hi))
    }

    /// Box `(width, height)` of a stamp whose nominal side is `side`.
    pub fn extent(&self, side: usize) -> (usize, usize) {
        match self.kind {
            ConceptKind::Qr | ConceptKind::Watermark => (side, side),
            ConceptKind::Text => {
                let glyphs = ((side + 1) / (GLYPH_W + 1)).max(2);
                (glyphs * (GLYPH_W + 1) - 1, GLYPH_H)
            }
        }
    }

    /// Stamp texture at nominal side `side`: `(width, height, values)`.
    pub fn texture(&self, side: usize) -> (usize, usize, Vec<f32>) {
        let (w, h) = self.extent(side);
        let mut values = vec![0.0; w * h];
        match self.kind {
            ConceptKind::Qr => {
                for y in 0..h {
                    for x in 0..w {
                        let (i, j) = (y * 8 / h, x * 8 / w);
                        let corner = (i < 3 && j < 3) || (i < 3 && j >= 5) || (i >= 5 && j < 3);
                        let dark = corner || (i + j) % 2 == 0;
                        values[y * w + x] = if dark { 0.0 } else { 1.0 };
                    }
                }
            }
            ConceptKind::Watermark => {
                for y in 0..h {
                    for x in 0..w {
                        let frame = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                        let light = frame || ((x + y) / 2) % 2 == 0;
                        values[y * w + x] = if light { 1.0 } else { 0.0 };
                    }
                }
            }
            ConceptKind::Text => {
                for y in 0..h {
                    for x in 0..w {
                        let (g, col) = (x / (GLYPH_W + 1), x % (GLYPH_W + 1));
                        let ink = col < GLYPH_W && glyph_ink(g, y, col);
                        values[y * w + x] = if ink { 0.05 } else { 1.0 };
                    }
                }
            }
        }
        (w, h, values)
    }
}

/// A fixed 5×3 bitmap font of four glyphs, cycled along the band.
fn glyph_ink(glyph: usize, row: usize, col: usize) -> bool {
    const FONT: [[u8; GLYPH_H]; 4] = [
        [0b111, 0b101, 0b111, 0b101, 0b101], // A
        [0b111, 0b100, 0b111, 0b001, 0b111], // S
        [0b111, 0b010, 0b010, 0b010, 0b010], // T
        [0b101, 0b101, 0b111, 0b101, 0b101], // H
    ];
    FONT[glyph % 4][row] >> (GLYPH_W - 1 - col) & 1 == 1
}

/// Stamps one concept at a random size and position fully inside the image.
pub fn inject_concept<R: Rng + ?Sized>(
    image: &GrayImage,
    stamp: &ConceptStamp,
    rng: &mut R,
) -> Result<(GrayImage, Detection)> {
    let (lo, hi) = stamp.side_range(image.width.min(image.height))?;
    let side = rng.random_range(lo..=hi);
    let (w, h, values) = stamp.texture(side);
    if w > image.width || h > image.height {
        return Err(invalid("stamp larger than image"));
    }
    let x0 = rng.random_range(0..=image.width - w);
    let y0 = rng.random_range(0..=image.height - h);
    let mut out = image.clone();
    let a = stamp.opacity;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x0 + x, y0 + y);
            let v = (1.0 - a) * out.get(px, py) + a * values[y * w + x];
            out.set(px, py, v);
        }
    }
    let det = Detection::new(1.0, x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
    Ok((out, det))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub caption: String,
    pub boxes: Vec<Detection>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    pub kind: ConceptKind,
    pub icr: f64,
    pub n: usize,
    pub n_test: usize,
    pub stamped: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub boxes: Vec<Detection>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub image_size: usize,
    pub n_test: usize,
    /// Stamps placed on each stamped image; they may overlap.
    pub stamps_per_image: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            n_test: 500,
            stamps_per_image: 1,
        }
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TEST_STREAM: u64 = 1 << 40;

/// `round(n·icr)` stamped training samples chosen by a seeded shuffle, plus a
/// clean test split.
pub fn build_dataset(n: usize, icr: f64, kind: ConceptKind, seed: u64, opts: BuildOptions) -> Result<Manifest> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&icr) {
        return Err(invalid(format!("icr {icr} outside [0, 1]")));
    }
    if opts.stamps_per_image == 0 {
        return Err(invalid("stamped images need at least one stamp"));
    }
    let stamp = ConceptStamp::for_kind(kind);
    stamp.side_range(opts.image_size)?;
    let stamped_count = (n as f64 * icr).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, u64::MAX));
    let mut stamped = vec![false; n];
    for &i in &order[..stamped_count] {
        stamped[i] = true;
    }

    let train: Result<Vec<Sample>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let spec = SceneSpec::random(opts.image_size, &mut rng);
            let (mut image, caption) = render_base(&spec);
            let mut boxes = Vec::new();
            if stamped[i] {
                for _ in 0..opts.stamps_per_image {
                    let (img, det) = inject_concept(&image, &stamp, &mut rng)?;
                    image = img;
                    boxes.push(det);
                }
            }
            image.quantize();
            Ok(Sample {
                id: format!("train-{i:05}"),
                image,
                caption,
                boxes,
                split: Split::Train,
            })
        })
        .collect();
    let test: Vec<Sample> = (0..opts.n_test)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, TEST_STREAM + i as u64);
            let spec = SceneSpec::random(opts.image_size, &mut rng);
            let (mut image, caption) = render_base(&spec);
            image.quantize();
            Sample {
                id: format!("test-{i:05}"),
                image,
                caption,
                boxes: Vec::new(),
                split: Split::Test,
            }
        })
        .collect();
    let mut samples = train?;
    samples.extend(test);
    Ok(Manifest {
        header: ManifestHeader {
            name: format!("icd-{kind}-{}", (icr * 100.0).round() as u32),
            kind,
            icr,
            n,
            n_test: opts.n_test,
            stamped: stamped_count,
            seed,
            width: opts.image_size,
            height: opts.image_size,
        },
        samples,
    })
}

impl Manifest {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    /// Fraction of training samples that carry a concept.
    pub fn achieved_icr(&self) -> f64 {
        let (mut total, mut hit) = (0usize, 0usize);
        for s in self.train() {
            total += 1;
            hit += usize::from(!s.boxes.is_empty());
        }
        hit as f64 / total.max(1) as f64
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.samples
            .iter()
            .map(|s| ManifestRecord {
                id: s.id.clone(),
                image_path: format!("images/{}.pgm", s.id),
                caption: s.caption.clone(),
                boxes: s.boxes.clone(),
                split: s.split,
            })
            .collect()
    }

    /// Writes `header.json`, `manifest.jsonl` and `images/*.pgm` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        fs::write(dir.join("header.json"), serde_json::to_string_pretty(&self.header)? + "\n")?;
        let mut lines = Vec::new();
        for (rec, s) in self.records().iter().zip(&self.samples) {
            writeln!(lines, "{}", serde_json::to_string(rec)?)?;
            s.image.save_pgm(dir.join(&rec.image_path))?;
        }
        fs::write(dir.join("manifest.jsonl"), lines)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: ManifestHeader = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
        let file = fs::File::open(dir.join("manifest.jsonl"))?;
        let mut samples = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)?;
            let path: PathBuf = dir.join(&rec.image_path);
            let image = GrayImage::load_pgm(&path)
                .map_err(|e| GeomError::Format(format!("{}: {e}", path.display())))?;
            samples.push(Sample {
                id: rec.id,
                image,
                caption: rec.caption,
                boxes: rec.boxes,
                split: rec.split,
            });
        }
        Ok(Self { header, samples })
    }
}
