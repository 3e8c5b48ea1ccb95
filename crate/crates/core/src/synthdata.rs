//! Procedural multi-style corpus with exact cross-style correspondence.
//!
//! Every `(class_id, instance_id)` pair yields one natural image, one token
//! caption and one variant per image style. A class fixes the shape, fill
//! and palette; an instance fixes position and size. Styled variants are
//! deterministic filters of the natural image, so the correct retrieval
//! target of any query is known exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binfile::{self, Hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::mat::round_f32;
use crate::rng::{stream, tag};

pub const MAX_TEXT_LEN: usize = 20;
pub const PAD_TOKEN: u32 = 0;
pub const SAMPLE_MAGIC: &[u8; 8] = b"USYN0001";
pub const MANIFEST_VERSION: u32 = 1;
const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleTag {
    Natural,
    Sketch,
    Art,
    Lowres,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl StyleTag {
    pub const ALL: [StyleTag; 5] = [
        StyleTag::Natural,
        StyleTag::Sketch,
        StyleTag::Art,
        StyleTag::Lowres,
        StyleTag::Text,
    ];

    /// Image styles produced by a filter over the natural image.
    pub const FILTERS: [StyleTag; 3] = [StyleTag::Sketch, StyleTag::Art, StyleTag::Lowres];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StyleTag::Natural => "natural",
            StyleTag::Sketch => "sketch",
            StyleTag::Art => "art",
            StyleTag::Lowres => "lowres",
            StyleTag::Text => "text",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            StyleTag::Text => Modality::Text,
            _ => Modality::Image,
        }
    }
}

impl fmt::Display for StyleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::OutOfRange(format!("unknown style tag {s:?}")))
    }
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

/// `H×W×C` image, row-major with interleaved channels, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub class_id: u32,
    pub instance_id: u32,
    pub style: StyleTag,
}

impl SynthImage {
    pub fn blank(size: usize, class_id: u32, instance_id: u32) -> Self {
        Self {
            height: size,
            width: size,
            channels: CHANNELS,
            pixels: vec![0.0; size * size * CHANNELS],
            class_id,
            instance_id,
            style: StyleTag::Natural,
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Non-overlapping `patch×patch` blocks, one row per block in raster
    /// order, each flattened as `(dy, dx, channel)`.
    pub fn patches(&self, patch: usize) -> Result<crate::mat::Mat> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let cols = patch * patch * self.channels;
        let mut out = crate::mat::Mat::zeros(gh * gw, cols);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..self.channels {
                            row[k] = self.at(py * patch + dy, px * patch + dx, c);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let w = self.width;
        let ch = self.channels;
        self.pixels[(y * w + x) * ch + c] = v;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthText {
    /// Always `MAX_TEXT_LEN` ids; positions past `length` hold `PAD_TOKEN`.
    pub tokens: Vec<u32>,
    pub length: usize,
    pub class_id: u32,
    pub instance_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(SynthImage),
    Text(SynthText),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample {
    pub class_id: u32,
    pub instance_id: u32,
    pub style: StyleTag,
    pub payload: Payload,
}

impl QuerySample {
    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::Image(_) => Modality::Image,
            Payload::Text(_) => Modality::Text,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub class_id: u32,
    pub instance_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub image_size: usize,
    pub vocab_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            instances_per_class: 8,
            seed: 42,
            split_fraction: 0.75,
            image_size: 32,
            vocab_size: 64,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.instances_per_class < 2 {
            return Err(Error::InvalidConfig("instances_per_class must be >= 2".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig("split_fraction must lie in (0,1)".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("image_size must be >= 8".into()));
        }
        TokenLayout::new(self.vocab_size, grid_side(self.instances_per_class))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub styles_present: Vec<StyleTag>,
    pub style_counts: BTreeMap<StyleTag, usize>,
    pub splits: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn content_hash(&self) -> Result<Hash> {
        Ok(binfile::sha256(self.to_json()?.as_bytes()))
    }

    pub fn split_of(&self, class_id: u32, instance_id: u32) -> Split {
        self.splits[class_id as usize * self.instances_per_class + instance_id as usize].split
    }

    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            num_classes: self.num_classes,
            instances_per_class: self.instances_per_class,
            seed: self.seed,
            split_fraction: self.split_fraction,
            image_size: self.image_size,
            vocab_size: self.vocab_size,
        }
    }
}

/// Token id ranges of the caption vocabulary. Id 0 is padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub vocab_size: usize,
    pub grid: usize,
    shape: u32,
    fill: u32,
    color: u32,
    pos_x: u32,
    pos_y: u32,
    size: u32,
    filler: u32,
}

const NUM_SHAPES: usize = 8;
const NUM_COLORS: usize = 16;
const NUM_SIZES: usize = 2;
const MIN_FILLERS: usize = 4;
const MAX_FILLER_WORDS: u64 = 4;

impl TokenLayout {
    pub fn new(vocab_size: usize, grid: usize) -> Result<Self> {
        let shape = 1;
        let fill = shape + NUM_SHAPES as u32;
        let color = fill + 2;
        let pos_x = color + NUM_COLORS as u32;
        let pos_y = pos_x + grid as u32;
        let size = pos_y + grid as u32;
        let filler = size + NUM_SIZES as u32;
        if (filler as usize) + MIN_FILLERS > vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {vocab_size} too small; need at least {}",
                filler as usize + MIN_FILLERS
            )));
        }
        Ok(Self {
            vocab_size,
            grid,
            shape,
            fill,
            color,
            pos_x,
            pos_y,
            size,
            filler,
        })
    }

    fn num_fillers(&self) -> u32 {
        self.vocab_size as u32 - self.filler
    }
}

/// Smallest grid side `g ≥ 3` with enough `(x, y, size)` placements.
fn grid_side(instances: usize) -> usize {
    let mut g = 3;
    while NUM_SIZES * g * g < instances {
        g += 1;
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub gx: usize,
    pub gy: usize,
    pub size: usize,
}

/// Per-class attributes and per-instance placements for one corpus.
#[derive(Clone, Debug)]
pub struct CorpusLayout {
    pub config: DatasetConfig,
    pub tokens: TokenLayout,
    placements: Vec<Vec<Placement>>,
}

impl CorpusLayout {
    pub fn new(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let grid = grid_side(config.instances_per_class);
        let tokens = TokenLayout::new(config.vocab_size, grid)?;
        let mut all = Vec::with_capacity(grid * grid * NUM_SIZES);
        for gy in 0..grid {
            for gx in 0..grid {
                for size in 0..NUM_SIZES {
                    all.push(Placement { gx, gy, size });
                }
            }
        }
        let placements = (0..config.num_classes)
            .map(|c| {
                let mut rng = stream(&[config.seed, tag::LAYOUT, c as u64]);
                let mut p = all.clone();
                p.shuffle(&mut rng);
                p.truncate(config.instances_per_class);
                p
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tokens,
            placements,
        })
    }

    fn check_ids(&self, class_id: u32, instance_id: u32) -> Result<()> {
        if class_id as usize >= self.config.num_classes {
            return Err(Error::OutOfRange(format!(
                "class_id {class_id} >= {}",
                self.config.num_classes
            )));
        }
        if instance_id as usize >= self.config.instances_per_class {
            return Err(Error::OutOfRange(format!(
                "instance_id {instance_id} >= {}",
                self.config.instances_per_class
            )));
        }
        Ok(())
    }

    pub fn placement(&self, class_id: u32, instance_id: u32) -> Result<Placement> {
        self.check_ids(class_id, instance_id)?;
        Ok(self.placements[class_id as usize][instance_id as usize])
    }

    /// Natural-style image for `(class_id, instance_id)`.
    pub fn render_image(&self, class_id: u32, instance_id: u32) -> Result<SynthImage> {
        let place = self.placement(class_id, instance_id)?;
        let size = self.config.image_size;
        let c = class_id as usize;
        let shape = c % NUM_SHAPES;
        let filled = (c / NUM_SHAPES) % 2 == 0;
        let fg = PALETTE[c % NUM_COLORS];
        let bg = PALETTE[(c * 5 + 3) % NUM_COLORS].map(|v| 0.15 + 0.2 * v);

        let s = size as f64;
        let margin = s / 4.0;
        let step = (s - 2.0 * margin) / (self.tokens.grid - 1) as f64;
        let cx = margin + place.gx as f64 * step;
        let cy = margin + place.gy as f64 * step;
        let radius = if place.size == 0 { 0.16 * s } else { 0.25 * s };
        let stroke = (s / 16.0).max(1.0);

        let mut rng = stream(&[self.config.seed, tag::NOISE, class_id as u64, instance_id as u64]);
        let mut img = SynthImage::blank(size, class_id, instance_id);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let mut inside = shape_contains(shape, dx, dy, radius);
                if !filled {
                    inside &= !shape_contains(shape, dx, dy, radius - stroke);
                }
                let color = if inside { fg } else { bg };
                for (ch, &v) in color.iter().enumerate() {
                    let noisy = v + rng.gen_range(-0.02..0.02);
                    img.set(y, x, ch, round_f32(noisy.clamp(0.0, 1.0)));
                }
            }
        }
        Ok(img)
    }

    /// Caption tokens for `(class_id, instance_id)`, zero-padded to 20.
    pub fn render_text(&self, class_id: u32, instance_id: u32) -> Result<SynthText> {
        let place = self.placement(class_id, instance_id)?;
        let t = &self.tokens;
        let c = class_id as usize;
        let mut tokens = vec![
            t.shape + (c % NUM_SHAPES) as u32,
            t.fill + ((c / NUM_SHAPES) % 2) as u32,
            t.color + (c % NUM_COLORS) as u32,
            t.pos_x + place.gx as u32,
            t.pos_y + place.gy as u32,
            t.size + place.size as u32,
        ];
        let mut rng = stream(&[self.config.seed, tag::TEXT, class_id as u64, instance_id as u64]);
        let fillers = rng.gen_range(0..=MAX_FILLER_WORDS);
        for _ in 0..fillers {
            tokens.push(t.filler + rng.gen_range(0..t.num_fillers()));
        }
        let length = tokens.len();
        tokens.resize(MAX_TEXT_LEN, PAD_TOKEN);
        Ok(SynthText {
            tokens,
            length,
            class_id,
            instance_id,
        })
    }
}

fn shape_contains(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    if r <= 0.0 {
        return false;
    }
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dx.abs() + dy.abs() <= r,
        3 => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        4 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        6 => dx.abs() <= r && dy.abs() <= 0.4 * r,
        _ => dx.abs() <= 0.4 * r && dy.abs() <= r,
    }
}

const PALETTE: [[f64; 3]; NUM_COLORS] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.85, 0.25, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.25, 0.90],
    [0.60, 0.90, 0.30],
    [0.95, 0.45, 0.65],
    [0.30, 0.60, 0.55],
    [0.80, 0.80, 0.80],
    [0.55, 0.35, 0.20],
    [0.40, 0.75, 0.95],
    [0.90, 0.95, 0.55],
    [0.65, 0.15, 0.35],
];

const SKETCH_THRESHOLD: f64 = 0.35;
const LOWRES_FACTOR: usize = 4;
const ART_AMPLITUDE: f64 = 0.08;
const ART_PERMUTATION: [usize; 3] = [2, 0, 1];

/// Applies a non-natural image style. Pure in `(image, style, seed)`.
pub fn apply_style(image: &SynthImage, style: StyleTag, seed: u64) -> Result<SynthImage> {
    let mut out = match style {
        StyleTag::Natural | StyleTag::Text => {
            return Err(Error::InvalidConfig(format!(
                "apply_style needs an image filter style, got {style}"
            )))
        }
        StyleTag::Sketch => sketch(image),
        StyleTag::Lowres => lowres(image, LOWRES_FACTOR),
        StyleTag::Art => art(image, seed),
    };
    for v in &mut out.pixels {
        *v = round_f32(v.clamp(0.0, 1.0));
    }
    out.style = style;
    Ok(out)
}

fn luminance(img: &SynthImage, y: usize, x: usize) -> f64 {
    0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2)
}

/// Sobel gradient magnitude on luminance, replicate borders, binarized.
fn sketch(img: &SynthImage) -> SynthImage {
    let (h, w) = (img.height, img.width);
    let lum = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        luminance(img, yy, xx)
    };
    let mut out = img.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (lum(y - 1, x + 1) + 2.0 * lum(y, x + 1) + lum(y + 1, x + 1))
                - (lum(y - 1, x - 1) + 2.0 * lum(y, x - 1) + lum(y + 1, x - 1));
            let gy = (lum(y + 1, x - 1) + 2.0 * lum(y + 1, x) + lum(y + 1, x + 1))
                - (lum(y - 1, x - 1) + 2.0 * lum(y - 1, x) + lum(y - 1, x + 1));
            let edge = if (gx * gx + gy * gy).sqrt() > SKETCH_THRESHOLD { 1.0 } else { 0.0 };
            for c in 0..img.channels {
                out.set(y as usize, x as usize, c, edge);
            }
        }
    }
    out
}

/// Bilinear sample of one channel at continuous pixel-center coordinates.
fn bilinear(src: &[f64], h: usize, w: usize, ch: usize, c: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| src[(yy * w + xx) * ch + c];
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// `k×k` box blur, then bilinear downsample by `k` and bilinear upsample back.
fn lowres(img: &SynthImage, k: usize) -> SynthImage {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut blurred = vec![0.0; img.pixels.len()];
    let lo = k as isize / 2 - 1 + (k as isize % 2);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..ch {
                let mut acc = 0.0;
                for oy in 0..k as isize {
                    for ox in 0..k as isize {
                        let yy = (y + oy - lo).clamp(0, h as isize - 1) as usize;
                        let xx = (x + ox - lo).clamp(0, w as isize - 1) as usize;
                        acc += img.at(yy, xx, c);
                    }
                }
                blurred[(y as usize * w + x as usize) * ch + c] = acc / (k * k) as f64;
            }
        }
    }
    let (sh, sw) = ((h / k).max(1), (w / k).max(1));
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let mut small = vec![0.0; sh * sw * ch];
    for y in 0..sh {
        for x in 0..sw {
            for c in 0..ch {
                let sy = (y as f64 + 0.5) * ry - 0.5;
                let sx = (x as f64 + 0.5) * rx - 0.5;
                small[(y * sw + x) * ch + c] = bilinear(&blurred, h, w, ch, c, sy, sx);
            }
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let sy = (y as f64 + 0.5) / ry - 0.5;
                let sx = (x as f64 + 0.5) / rx - 0.5;
                out.set(y, x, c, bilinear(&small, sh, sw, ch, c, sy, sx));
            }
        }
    }
    out
}

/// Fixed channel permutation plus a seeded sinusoidal color shift.
fn art(img: &SynthImage, seed: u64) -> SynthImage {
    let mut rng = stream(&[seed, tag::STYLE]);
    let fy = rng.gen_range(1..=3) as f64;
    let fx = rng.gen_range(1..=3) as f64;
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let mut out = img.clone();
    let (h, w) = (img.height as f64, img.width as f64);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let src = img.at(y, x, ART_PERMUTATION[c % 3]);
                let wave = (std::f64::consts::TAU * (fx * x as f64 / w + fy * y as f64 / h) + phase[c % 3]).sin();
                out.set(y, x, c, (src + ART_AMPLITUDE * wave).clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn style_seed(dataset_seed: u64, class_id: u32, instance_id: u32, style: StyleTag) -> u64 {
    crate::rng::derive_seed(&[dataset_seed, tag::STYLE, class_id as u64, instance_id as u64, style.code() as u64])
}

/// In-memory corpus. Samples are ordered by style (in [`StyleTag::ALL`]
/// order), then class, then instance; [`Dataset::sample_id`] is that position.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    samples: Vec<QuerySample>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let layout = CorpusLayout::new(config)?;
        let (nc, ni) = (config.num_classes, config.instances_per_class);

        let mut splits = Vec::with_capacity(nc * ni);
        let n_train = ((ni as f64 * config.split_fraction).round() as usize).clamp(1, ni - 1);
        for c in 0..nc {
            let mut order: Vec<usize> = (0..ni).collect();
            order.shuffle(&mut stream(&[config.seed, tag::SPLIT, c as u64]));
            let mut split = vec![Split::Test; ni];
            for &i in &order[..n_train] {
                split[i] = Split::Train;
            }
            splits.extend((0..ni).map(|i| SplitEntry {
                class_id: c as u32,
                instance_id: i as u32,
                split: split[i],
            }));
        }

        let mut naturals = Vec::with_capacity(nc * ni);
        for c in 0..nc as u32 {
            for i in 0..ni as u32 {
                naturals.push(layout.render_image(c, i)?);
            }
        }

        let mut samples = Vec::with_capacity(StyleTag::ALL.len() * nc * ni);
        for style in StyleTag::ALL {
            for (idx, nat) in naturals.iter().enumerate() {
                let (c, i) = (nat.class_id, nat.instance_id);
                let payload = match style {
                    StyleTag::Natural => Payload::Image(nat.clone()),
                    StyleTag::Text => Payload::Text(layout.render_text(c, i)?),
                    _ => Payload::Image(apply_style(nat, style, style_seed(config.seed, c, i, style))?),
                };
                debug_assert_eq!(idx, c as usize * ni + i as usize);
                samples.push(QuerySample {
                    class_id: c,
                    instance_id: i,
                    style,
                    payload,
                });
            }
        }

        let style_counts = StyleTag::ALL.iter().map(|&s| (s, nc * ni)).collect();
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            num_classes: nc,
            instances_per_class: ni,
            seed: config.seed,
            split_fraction: config.split_fraction,
            image_size: config.image_size,
            vocab_size: config.vocab_size,
            max_text_len: MAX_TEXT_LEN,
            styles_present: StyleTag::ALL.to_vec(),
            style_counts,
            splits,
        };
        Ok(Self { manifest, samples })
    }

    pub fn samples(&self) -> &[QuerySample] {
        &self.samples
    }

    pub fn per_style(&self) -> usize {
        self.manifest.num_classes * self.manifest.instances_per_class
    }

    pub fn sample_id(&self, style: StyleTag, class_id: u32, instance_id: u32) -> u64 {
        (style.code() as usize * self.per_style()
            + class_id as usize * self.manifest.instances_per_class
            + instance_id as usize) as u64
    }

    pub fn get(&self, style: StyleTag, class_id: u32, instance_id: u32) -> &QuerySample {
        &self.samples[self.sample_id(style, class_id, instance_id) as usize]
    }

    pub fn by_id(&self, id: u64) -> Option<&QuerySample> {
        self.samples.get(id as usize)
    }

    pub fn of_style(&self, style: StyleTag) -> &[QuerySample] {
        let n = self.per_style();
        let start = style.code() as usize * n;
        &self.samples[start..start + n]
    }

    pub fn split_samples(&self, style: StyleTag, split: Split) -> impl Iterator<Item = &QuerySample> {
        self.of_style(style)
            .iter()
            .filter(move |s| self.manifest.split_of(s.class_id, s.instance_id) == split)
    }

    pub fn manifest_hash(&self) -> Result<Hash> {
        self.manifest.content_hash()
    }

    fn sample_path(dir: &Path, style: StyleTag, class_id: u32, instance_id: u32) -> PathBuf {
        dir.join("samples")
            .join(style.as_str())
            .join(format!("c{class_id:04}_i{instance_id:04}.bin"))
    }

    /// Writes `manifest.json` plus one tensor file per sample.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.json");
        fs::write(&manifest, self.manifest.to_json()?).map_err(|e| Error::io(&manifest, e))?;
        for s in &self.samples {
            let mut w = Writer::new();
            w.bytes(SAMPLE_MAGIC);
            match &s.payload {
                Payload::Image(img) => {
                    w.u32(3)
                        .u32(img.height as u32)
                        .u32(img.width as u32)
                        .u32(img.channels as u32)
                        .f32s(&img.pixels);
                }
                Payload::Text(t) => {
                    w.u32(1).u32(t.tokens.len() as u32);
                    for &tok in &t.tokens {
                        w.u32(tok);
                    }
                }
            }
            w.write_to(&Self::sample_path(dir, s.style, s.class_id, s.instance_id))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: mpath,
                reason: format!("unsupported manifest version {}", manifest.format_version),
            });
        }
        let (nc, ni) = (manifest.num_classes, manifest.instances_per_class);
        let mut samples = Vec::with_capacity(StyleTag::ALL.len() * nc * ni);
        for style in StyleTag::ALL {
            for c in 0..nc as u32 {
                for i in 0..ni as u32 {
                    let path = Self::sample_path(dir, style, c, i);
                    let mut r = Reader::open(&path)?;
                    r.magic(SAMPLE_MAGIC)?;
                    let rank = r.u32()? as usize;
                    let dims = r.u32s(rank)?;
                    let payload = if style == StyleTag::Text {
                        if dims != [MAX_TEXT_LEN as u32] {
                            return Err(r.format_error(format!("text dims {dims:?}")));
                        }
                        let tokens = r.u32s(MAX_TEXT_LEN)?;
                        if tokens.iter().any(|&t| t as usize >= manifest.vocab_size) {
                            return Err(r.format_error("token id outside vocabulary"));
                        }
                        let length = tokens.iter().rposition(|&t| t != PAD_TOKEN).map_or(0, |p| p + 1);
                        Payload::Text(SynthText {
                            tokens,
                            length,
                            class_id: c,
                            instance_id: i,
                        })
                    } else {
                        let s = manifest.image_size as u32;
                        if dims != [s, s, CHANNELS as u32] {
                            return Err(r.format_error(format!("image dims {dims:?}")));
                        }
                        let pixels = r.f32s((s * s) as usize * CHANNELS)?;
                        Payload::Image(SynthImage {
                            height: s as usize,
                            width: s as usize,
                            channels: CHANNELS,
                            pixels,
                            class_id: c,
                            instance_id: i,
                            style,
                        })
                    };
                    r.finish()?;
                    samples.push(QuerySample {
                        class_id: c,
                        instance_id: i,
                        style,
                        payload,
                    });
                }
            }
        }
        Ok(Self { manifest, samples })
    }
}

/// Generates the corpus for `config` and writes it under `dir`.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(config)?;
    ds.write(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_classes: 2,
            instances_per_class: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn counts_for_two_by_two() {
        let ds = Dataset::generate(&small()).unwrap();
        let count = |s| ds.of_style(s).len();
        assert_eq!(count(StyleTag::Natural), 4);
        assert_eq!(count(StyleTag::Text), 4);
        let styled: usize = StyleTag::FILTERS.iter().map(|&s| count(s)).sum();
        assert_eq!(styled, 12);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            DatasetConfig { num_classes: 1, ..small() },
            DatasetConfig { instances_per_class: 1, ..small() },
            DatasetConfig { split_fraction: 1.0, ..small() },
            DatasetConfig { split_fraction: 0.0, ..small() },
            DatasetConfig { vocab_size: 20, ..small() },
        ] {
            assert!(matches!(Dataset::generate(&bad), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn splits_disjoint_and_covering() {
        let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
        let m = &ds.manifest;
        assert_eq!(m.splits.len(), 128);
        for c in 0..16u32 {
            let train = (0..8u32).filter(|&i| m.split_of(c, i) == Split::Train).count();
            assert_eq!(train, 6);
        }
    }

    #[test]
    fn unknown_style_tag_rejected() {
        assert!("audio".parse::<StyleTag>().is_err());
        assert_eq!("lowres".parse::<StyleTag>().unwrap(), StyleTag::Lowres);
    }

    #[test]
    fn constant_image_sketches_to_zero() {
        let mut img = SynthImage::blank(32, 0, 0);
        img.pixels.iter_mut().for_each(|v| *v = 0.6);
        let s = apply_style(&img, StyleTag::Sketch, 1).unwrap();
        assert!(s.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn natural_and_text_are_not_filters() {
        let img = SynthImage::blank(32, 0, 0);
        assert!(apply_style(&img, StyleTag::Natural, 0).is_err());
        assert!(apply_style(&img, StyleTag::Text, 0).is_err());
    }

    #[test]
    fn lowres_deterministic() {
        let layout = CorpusLayout::new(&DatasetConfig::default()).unwrap();
        let img = layout.render_image(3, 2).unwrap();
        let a = apply_style(&img, StyleTag::Lowres, 9).unwrap();
        let b = apply_style(&img, StyleTag::Lowres, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, img.pixels);
    }

    #[test]
    fn art_changes_histogram_and_stays_in_range() {
        let mut rng = stream(&[123]);
        let mut img = SynthImage::blank(32, 0, 0);
        img.pixels.iter_mut().for_each(|v| *v = round_f32(rng.gen_range(0.0..1.0)));
        let art = apply_style(&img, StyleTag::Art, 5).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &art.pixels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 0.0 && hi <= 1.0);
        let hist = |p: &[f64]| {
            let mut h = [0usize; 10];
            for &v in p {
                h[((v * 10.0) as usize).min(9)] += 1;
            }
            h
        };
        assert_ne!(hist(&art.pixels), hist(&img.pixels));
    }

    #[test]
    fn text_is_padded_and_in_vocab() {
        let layout = CorpusLayout::new(&DatasetConfig::default()).unwrap();
        let a = layout.render_text(0, 0).unwrap();
        assert_eq!(a, layout.render_text(0, 0).unwrap());
        assert_eq!(a.tokens.len(), MAX_TEXT_LEN);
        assert!(a.tokens[a.length..].iter().all(|&t| t == PAD_TOKEN));
        assert!(a.tokens[..a.length].iter().all(|&t| t != PAD_TOKEN && (t as usize) < 64));
        assert!(layout.render_text(16, 0).is_err());
    }

    #[test]
    fn distinct_classes_have_distinct_captions() {
        let cfg = DatasetConfig::default();
        let layout = CorpusLayout::new(&cfg).unwrap();
        for i in 0..cfg.instances_per_class as u32 {
            let texts: Vec<_> = (0..cfg.num_classes as u32)
                .map(|c| layout.render_text(c, i).unwrap())
                .collect();
            for a in 0..texts.len() {
                for b in a + 1..texts.len() {
                    let differs = texts[a].tokens.iter().zip(&texts[b].tokens).any(|(x, y)| {
                        x != y && (*x != PAD_TOKEN || *y != PAD_TOKEN)
                    });
                    assert!(differs, "classes {a} and {b} share caption");
                }
            }
        }
    }

    #[test]
    fn instances_are_unique_within_class() {
        let cfg = DatasetConfig::default();
        let layout = CorpusLayout::new(&cfg).unwrap();
        for c in 0..16 {
            let mut seen = std::collections::HashSet::new();
            for i in 0..8 {
                let p = layout.placement(c, i).unwrap();
                assert!(seen.insert((p.gx, p.gy, p.size)));
            }
        }
    }

    #[test]
    fn write_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(), dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.samples(), ds.samples());
    }
}
