//! Semantic segmentation maps: decoding, corner repair, class splitting and
//! a procedural generator.
//!
//! Two raster formats are supported. The color format uses a fixed four-color
//! legend and is meant for humans; the canonical format is a single-channel
//! 8-bit raster holding class ids 0–3 and is what the pipeline stores.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("pixel ({x}, {y}) has off-legend color {rgb:?}")]
    UnknownColor { x: usize, y: usize, rgb: [u8; 3] },
    #[error("pixel ({x}, {y}) holds label {value}; valid labels are 0-3")]
    UnknownLabel { x: usize, y: usize, value: u8 },
    #[error("cannot decode mask {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("map must be at least {MIN_SIDE}x{MIN_SIDE}, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("label grid has {got} entries, expected {expected}")]
    LabelCount { got: usize, expected: usize },
    #[error("field of view ({cx}, {cy}, r={r}) does not intersect the {width}x{height} image")]
    BadFov {
        cx: f64,
        cy: f64,
        r: f64,
        width: usize,
        height: usize,
    },
    #[error("infeasible mask spec: {0}")]
    InfeasibleSpec(String),
    #[error("mask bundle invariant violated: {0}")]
    BundleInvariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scene class of one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Blank = 0,
    Clean = 1,
    Dark = 2,
    Floats = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Blank, Class::Clean, Class::Dark, Class::Floats];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Legend color used by the color interchange format.
    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Blank => [222, 184, 135],
            Class::Clean => [255, 0, 0],
            Class::Dark => [0, 255, 0],
            Class::Floats => [0, 0, 255],
        }
    }

    pub fn from_color(rgb: [u8; 3]) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.color() == rgb)
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Blank => "blank",
            Class::Clean => "clean",
            Class::Dark => "dark",
            Class::Floats => "floats",
        }
    }
}

/// Per-pixel class labels on an H×W grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    labels: Vec<Class>,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, labels: Vec<Class>) -> Result<Self, MaskError> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(MaskError::TooSmall { width, height });
        }
        if labels.len() != width * height {
            return Err(MaskError::LabelCount {
                got: labels.len(),
                expected: width * height,
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, class: Class) -> Result<Self, MaskError> {
        Self::new(width, height, vec![class; width * height])
    }

    /// Build from raw ids, rejecting anything ≥ 4.
    pub fn from_ids(width: usize, height: usize, ids: &[u8]) -> Result<Self, MaskError> {
        let labels = ids
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                Class::from_id(v).ok_or(MaskError::UnknownLabel {
                    x: i % width.max(1),
                    y: i / width.max(1),
                    value: v,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(width, height, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Class] {
        &self.labels
    }

    pub fn ids(&self) -> Vec<u8> {
        self.labels.iter().map(|c| c.id()).collect()
    }

    /// Label at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> Class {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: Class) {
        self.labels[y * self.width + x] = class;
    }

    /// Pixel counts indexed by class id.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for c in &self.labels {
            h[c.id() as usize] += 1;
        }
        h
    }

    pub fn count(&self, class: Class) -> usize {
        self.histogram()[class.id() as usize]
    }

    /// 0/1 indicator of `class`, row-major.
    pub fn indicator(&self, class: Class) -> Vec<u8> {
        self.labels.iter().map(|&c| u8::from(c == class)).collect()
    }

    /// Exchange two classes everywhere.
    pub fn swap_classes(&self, a: Class, b: Class) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&c| match c {
                c if c == a => b,
                c if c == b => a,
                c => c,
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            labels,
        }
    }

    /// Nearest-neighbour resample; class ids are never interpolated.
    pub fn resample_nearest(&self, width: usize, height: usize) -> Result<Self, MaskError> {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                labels.push(self.get(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        Self::new(width, height, labels)
    }

    pub fn to_color_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.get(x as usize, y as usize).color())
        })
    }

    pub fn from_color_image(img: &RgbImage) -> Result<Self, MaskError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut labels = Vec::with_capacity(w * h);
        for (x, y, px) in img.enumerate_pixels() {
            let class = Class::from_color(px.0).ok_or(MaskError::UnknownColor {
                x: x as usize,
                y: y as usize,
                rgb: px.0,
            })?;
            labels.push(class);
        }
        Self::new(w, h, labels)
    }

    pub fn to_label_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize).id()])
        })
    }

    pub fn from_label_image(img: &GrayImage) -> Result<Self, MaskError> {
        Self::from_ids(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

fn decode_err(path: &Path, reason: impl ToString) -> MaskError {
    MaskError::Decode {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage, MaskError> {
    let bytes = std::fs::read(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| decode_err(path, e))
}

/// Decode a color-legend PNG. Every pixel must match a legend color exactly.
pub fn load_color_mask(path: &Path) -> Result<SemanticMap, MaskError> {
    let img = open_image(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        image::DynamicImage::ImageRgba8(rgba) => {
            if rgba.pixels().any(|p| p.0[3] != 255) {
                return Err(decode_err(path, "color masks must be fully opaque"));
            }
            image::DynamicImage::ImageRgba8(rgba).to_rgb8()
        }
        other => {
            return Err(decode_err(
                path,
                format!("expected 8-bit RGB raster, got {:?}", other.color()),
            ))
        }
    };
    SemanticMap::from_color_image(&rgb)
}

/// Write a color-legend PNG. Output bytes depend only on the label grid.
pub fn encode_color_mask(map: &SemanticMap, path: &Path) -> Result<(), MaskError> {
    map.to_color_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_io)
}

/// Decode a canonical single-channel label PNG (values 0–3).
pub fn load_label_mask(path: &Path) -> Result<SemanticMap, MaskError> {
    match open_image(path)? {
        image::DynamicImage::ImageLuma8(g) => SemanticMap::from_label_image(&g),
        other => Err(decode_err(
            path,
            format!(
                "expected 8-bit single-channel raster, got {:?}",
                other.color()
            ),
        )),
    }
}

pub fn save_label_mask(map: &SemanticMap, path: &Path) -> Result<(), MaskError> {
    map.to_label_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_io)
}

/// Load either format: 8-bit gray is read as labels, RGB as the color legend.
pub fn load_any_mask(path: &Path) -> Result<SemanticMap, MaskError> {
    match open_image(path)? {
        image::DynamicImage::ImageLuma8(_) => load_label_mask(path),
        _ => load_color_mask(path),
    }
}

fn image_io(e: image::ImageError) -> MaskError {
    match e {
        image::ImageError::IoError(io) => MaskError::Io(io),
        other => MaskError::Io(std::io::Error::other(other)),
    }
}

/// Circular optical field of view. Pixel `(row i, col j)` has center `(j + 0.5, i + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl FovSpec {
    /// Inscribed circle of the image rectangle.
    pub fn inscribed(width: usize, height: usize) -> Self {
        Self {
            center_x: width as f64 / 2.0,
            center_y: height as f64 / 2.0,
            radius: width.min(height) as f64 / 2.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), MaskError> {
        let bad = || MaskError::BadFov {
            cx: self.center_x,
            cy: self.center_y,
            r: self.radius,
            width,
            height,
        };
        if !(self.radius > 0.0) || !self.center_x.is_finite() || !self.center_y.is_finite() {
            return Err(bad());
        }
        // distance from the center to the closest point of the rectangle
        let nx = self.center_x.clamp(0.0, width as f64);
        let ny = self.center_y.clamp(0.0, height as f64);
        let d2 = (nx - self.center_x).powi(2) + (ny - self.center_y).powi(2);
        if d2 >= self.radius * self.radius {
            return Err(bad());
        }
        Ok(())
    }

    /// Whether the center of pixel (`x` = column, `y` = row) lies inside or on the disk.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center_x;
        let dy = y as f64 + 0.5 - self.center_y;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Mark every pixel whose center lies strictly outside the FOV disk as blank.
pub fn reassign_corners(map: &SemanticMap, fov: &FovSpec) -> SemanticMap {
    let mut out = map.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            if !fov.contains_pixel(x, y) {
                out.set(x, y, Class::Blank);
            }
        }
    }
    out
}

/// Row-major 0/1 mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.bits[y as usize * self.width + x as usize] * 255])
        })
    }
}

/// Conditioning masks: dark, clean and floats indicators plus the full map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBundle {
    pub y_d: BinaryMask,
    pub y_c: BinaryMask,
    pub y_f: BinaryMask,
    pub y_a: SemanticMap,
}

impl MaskBundle {
    pub fn width(&self) -> usize {
        self.y_a.width
    }

    pub fn height(&self) -> usize {
        self.y_a.height
    }

    /// Check disjointness, coverage of the non-blank region and shared size.
    pub fn validate(&self) -> Result<(), MaskError> {
        let (w, h) = (self.y_a.width, self.y_a.height);
        for (name, m) in [("y_d", &self.y_d), ("y_c", &self.y_c), ("y_f", &self.y_f)] {
            if m.width != w || m.height != h || m.bits.len() != w * h {
                return Err(MaskError::BundleInvariant(format!(
                    "{name} is {}x{}, y_a is {w}x{h}",
                    m.width, m.height
                )));
            }
        }
        for i in 0..w * h {
            let s = self.y_d.bits[i] as u32 + self.y_c.bits[i] as u32 + self.y_f.bits[i] as u32;
            let want = u32::from(self.y_a.labels[i] != Class::Blank);
            if s != want {
                return Err(MaskError::BundleInvariant(format!(
                    "pixel ({}, {}) has class-mask sum {s}, expected {want}",
                    i % w,
                    i / w
                )));
            }
        }
        Ok(())
    }

    /// Write `y_d.png`, `y_c.png`, `y_f.png` (0/255 rasters) and `y_a.png` (labels).
    pub fn save_dir(&self, dir: &Path) -> Result<(), MaskError> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in [("y_d", &self.y_d), ("y_c", &self.y_c), ("y_f", &self.y_f)] {
            m.to_image()
                .save_with_format(dir.join(format!("{name}.png")), image::ImageFormat::Png)
                .map_err(image_io)?;
        }
        save_label_mask(&self.y_a, &dir.join("y_a.png"))
    }
}

/// One binary channel per scene class, plus the full map.
pub fn split_channels(map: &SemanticMap) -> MaskBundle {
    let bin = |class| BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.indicator(class),
    };
    MaskBundle {
        y_d: bin(Class::Dark),
        y_c: bin(Class::Clean),
        y_f: bin(Class::Floats),
        y_a: map.clone(),
    }
}

/// Recipe for [`synth_mask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub width: usize,
    pub height: usize,
    /// Requested fractions of the FOV interior. Any shortfall below 1 is
    /// filled with clean tissue.
    pub clean: f64,
    pub dark: f64,
    pub floats: f64,
    /// Inclusive range of smooth blobs seeding the dark region.
    pub dark_blobs: (u32, u32),
    /// Inclusive range of smooth blobs seeding the floats region.
    pub floats_blobs: (u32, u32),
    /// Defaults to the inscribed circle.
    pub fov: Option<FovSpec>,
}

impl MaskSpec {
    pub fn new(size: usize, clean: f64, dark: f64, floats: f64) -> Self {
        Self {
            width: size,
            height: size,
            clean,
            dark,
            floats,
            dark_blobs: (1, 3),
            floats_blobs: (2, 5),
            fov: None,
        }
    }

    fn check(&self) -> Result<FovSpec, MaskError> {
        for (name, v) in [
            ("clean", self.clean),
            ("dark", self.dark),
            ("floats", self.floats),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MaskError::InfeasibleSpec(format!(
                    "{name} fraction {v} outside [0, 1]"
                )));
            }
        }
        let sum = self.clean + self.dark + self.floats;
        if sum > 1.0 + 1e-9 {
            return Err(MaskError::InfeasibleSpec(format!(
                "class fractions sum to {sum} > 1"
            )));
        }
        for (name, (lo, hi)) in [
            ("dark_blobs", self.dark_blobs),
            ("floats_blobs", self.floats_blobs),
        ] {
            if lo > hi {
                return Err(MaskError::InfeasibleSpec(format!(
                    "{name} range {lo}..={hi} is empty"
                )));
            }
        }
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(MaskError::TooSmall {
                width: self.width,
                height: self.height,
            });
        }
        let fov = self
            .fov
            .unwrap_or_else(|| FovSpec::inscribed(self.width, self.height));
        fov.validate(self.width, self.height)?;
        Ok(fov)
    }
}

/// Sum of isotropic Gaussian bumps with random centers inside the FOV.
fn blob_field(rng: &mut ChaCha8Rng, spec: &MaskSpec, fov: &FovSpec, range: (u32, u32)) -> Vec<f64> {
    let n = rng.random_range(range.0..=range.1).max(1);
    let scale = spec.width.min(spec.height) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = fov.radius * rng.random::<f64>().sqrt();
            let cx = fov.center_x + rad * ang.cos();
            let cy = fov.center_y + rad * ang.sin();
            let sigma = scale * rng.random_range(0.08..0.25);
            let amp = rng.random_range(0.5..1.0);
            (cx, cy, sigma, amp)
        })
        .collect();
    let mut field = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let v: f64 = blobs
                .iter()
                .map(|&(cx, cy, s, a)| {
                    a * (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum();
            // tiny jitter breaks ties between equal field values
            field.push(v + 1e-9 * rng.random::<f64>());
        }
    }
    field
}

/// Procedural mask: blank outside the FOV disk, dark and floats regions grown
/// from smooth random blobs, clean elsewhere. Class fractions over the FOV
/// interior match the request up to one pixel of rounding.
pub fn synth_mask(spec: &MaskSpec, seed: u64) -> Result<SemanticMap, MaskError> {
    let fov = spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dark_field = blob_field(&mut rng, spec, &fov, spec.dark_blobs);
    let floats_field = blob_field(&mut rng, spec, &fov, spec.floats_blobs);

    let mut map = SemanticMap::filled(spec.width, spec.height, Class::Blank)?;
    let mut inside = Vec::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            if fov.contains_pixel(x, y) {
                inside.push(y * spec.width + x);
                map.labels[y * spec.width + x] = Class::Clean;
            }
        }
    }
    let n = inside.len() as f64;
    let n_dark = (spec.dark * n).round() as usize;
    let n_floats = ((spec.floats * n).round() as usize).min(inside.len() - n_dark);

    let mut by_dark = inside.clone();
    by_dark.sort_by(|&a, &b| dark_field[b].total_cmp(&dark_field[a]).then(a.cmp(&b)));
    for &i in &by_dark[..n_dark] {
        map.labels[i] = Class::Dark;
    }
    let mut rest: Vec<usize> = inside
        .into_iter()
        .filter(|&i| map.labels[i] == Class::Clean)
        .collect();
    rest.sort_by(|&a, &b| floats_field[b].total_cmp(&floats_field[a]).then(a.cmp(&b)));
    for &i in &rest[..n_floats] {
        map.labels[i] = Class::Floats;
    }
    Ok(map)
}
