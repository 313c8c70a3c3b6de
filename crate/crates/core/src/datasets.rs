//! Image/mask pairs: the toy capsule renderer, the on-disk paired layout and
//! Kvasir-style folder ingestion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskpipe::{self, Class, MaskBundle, MaskError, MaskSpec, SemanticMap};
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image {0} has no matching mask")]
    MissingMask(String),
    #[error("image and mask for {id} differ in size ({image:?} vs {mask:?})")]
    ShapeMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("no samples found under {0}")]
    EmptyDataset(String),
    #[error("sample {id}: {source}")]
    BadMask { id: String, source: MaskError },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("invalid render spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Relative luminance of a linear RGB triple.
pub fn luminance(rgb: [f32; 3]) -> f32 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Planar RGB image with values in [0, 1]. `data` is `[3][height][width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "planar RGB data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Self::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let hw = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let hw = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[hw + i] = rgb[1];
        self.data[2 * hw + i] = rgb[2];
    }

    /// Per-pixel luminance, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| luminance(self.pixel(x, y)))
            .collect()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(w, h, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set_pixel(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    /// Snap every value to the nearest 8-bit level so a PNG round trip is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| DatasetError::Io(std::io::Error::other(e)))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(|e| DatasetError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Bilinear resize (via the `image` crate), then re-normalize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let r = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_rgb8(&r)
    }
}

/// One training example: image, its conditioning masks and a stable id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub bundle: MaskBundle,
    pub id: String,
}

/// Appearance parameters of the toy capsule renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRenderSpec {
    pub clean_base_rgb: [f32; 3],
    pub dark_max_luminance: f32,
    /// Bubbles per 1000 floats pixels.
    pub float_blob_density: f32,
    pub noise_amplitude: f32,
}

impl Default for ToyRenderSpec {
    fn default() -> Self {
        Self {
            clean_base_rgb: [0.80, 0.38, 0.28],
            dark_max_luminance: 0.15,
            float_blob_density: 40.0,
            noise_amplitude: 0.03,
        }
    }
}

impl ToyRenderSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.clean_base_rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DatasetError::BadSpec(
                "clean_base_rgb must lie in [0,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dark_max_luminance)
            || self.dark_max_luminance >= luminance(self.clean_base_rgb)
        {
            return Err(DatasetError::BadSpec(
                "dark_max_luminance must be in [0,1] and below the clean luminance".into(),
            ));
        }
        if !(self.float_blob_density >= 0.0) || !(0.0..=0.05).contains(&self.noise_amplitude) {
            return Err(DatasetError::BadSpec(
                "float_blob_density must be ≥ 0 and noise_amplitude in [0, 0.05]".into(),
            ));
        }
        Ok(())
    }
}

const FLOATS_BASE: [f32; 3] = [0.62, 0.60, 0.30];
const BUBBLE_RIM: [f32; 3] = [0.97, 0.97, 0.90];

/// Smooth field in [-1, 1]: bilinear interpolation of a coarse random grid.
fn low_freq_field(rng: &mut ChaCha8Rng, w: usize, h: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = (y as f32 + 0.5) / h as f32 * cells as f32;
        let (y0, ty) = ((fy.floor() as usize).min(cells - 1), fy - fy.floor());
        for x in 0..w {
            let fx = (x as f32 + 0.5) / w as f32 * cells as f32;
            let (x0, tx) = ((fx.floor() as usize).min(cells - 1), fx - fx.floor());
            let a = grid[y0 * g + x0] * (1.0 - tx) + grid[y0 * g + x0 + 1] * tx;
            let b = grid[(y0 + 1) * g + x0] * (1.0 - tx) + grid[(y0 + 1) * g + x0 + 1] * tx;
            out.push(a * (1.0 - ty) + b * ty);
        }
    }
    out
}

/// Render a synthetic capsule frame whose appearance is a known function of
/// the map: reddish low-frequency mucosa for clean, dim noise for dark,
/// speckled debris with bright bubble ellipses for floats and near-black
/// corners for blank. The result is snapped to 8-bit levels.
pub fn render_toy(map: &SemanticMap, spec: &ToyRenderSpec, seed: u64) -> Sample {
    let (w, h) = (map.width(), map.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shade = low_freq_field(&mut rng, w, h, 4);
    let dark_shade = low_freq_field(&mut rng, w, h, 3);
    let amp = spec.noise_amplitude;
    let base = spec.clean_base_rgb;
    let dark_scale = 0.5 * spec.dark_max_luminance / luminance(base);

    let mut img = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut noise = || rng.random_range(-1.0f32..1.0);
            let rgb = match map.get(x, y) {
                Class::Blank => {
                    let v = 0.01 + 0.01 * noise();
                    [v, v, v]
                }
                Class::Clean => {
                    let s = 1.0 + 0.15 * shade[i];
                    [
                        base[0] * s + amp * noise(),
                        base[1] * s + amp * noise(),
                        base[2] * s + amp * noise(),
                    ]
                }
                Class::Dark => {
                    let s = dark_scale * (1.0 + 0.3 * dark_shade[i]);
                    let n = 0.3 * amp * noise();
                    [base[0] * s + n, base[1] * s + n, base[2] * s + n]
                }
                Class::Floats => {
                    let n = 0.12 * noise();
                    FLOATS_BASE.map(|c| c + n)
                }
            };
            img.set_pixel(x, y, rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }

    // bubbles: bright elliptical rims with a slightly darker core, drawn only on floats pixels
    let n_floats = map.count(Class::Floats);
    let n_bubbles = (spec.float_blob_density * n_floats as f32 / 1000.0).round() as usize;
    let floats_px: Vec<usize> = (0..w * h)
        .filter(|&i| map.labels()[i] == Class::Floats)
        .collect();
    for _ in 0..n_bubbles {
        let c = floats_px[rng.random_range(0..floats_px.len())];
        let (cx, cy) = ((c % w) as f32 + 0.5, (c / w) as f32 + 0.5);
        let a = rng.random_range(1.5f32..3.5);
        let b = a * rng.random_range(0.6f32..1.0);
        let th = rng.random_range(0.0f32..std::f32::consts::PI);
        let (ct, st) = (th.cos(), th.sin());
        let r = a.ceil() as isize + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (c as isize % w as isize + dx, c as isize / w as isize + dy);
                if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                    continue;
                }
                let (px, py) = (px as usize, py as usize);
                if map.get(px, py) != Class::Floats {
                    continue;
                }
                let (ux, uy) = (px as f32 + 0.5 - cx, py as f32 + 0.5 - cy);
                let (u, v) = ((ux * ct + uy * st) / a, (-ux * st + uy * ct) / b);
                let rr = (u * u + v * v).sqrt();
                if rr <= 1.0 {
                    let rgb = if rr >= 0.55 {
                        BUBBLE_RIM
                    } else {
                        FLOATS_BASE.map(|v| v * 0.8)
                    };
                    img.set_pixel(px, py, rgb);
                }
            }
        }
    }
    img.quantize();
    Sample {
        image: img,
        bundle: maskpipe::split_channels(map),
        id: format!("toy_{seed:016x}"),
    }
}

/// Composition of the `index`-th toy mask: class fractions vary per sample,
/// and each non-clean class is absent from roughly one sample in seven.
pub fn toy_mask_spec(size: usize, rng: &mut ChaCha8Rng) -> MaskSpec {
    let mut dark: f64 = rng.random_range(0.05..0.40);
    let mut floats: f64 = rng.random_range(0.05..0.40);
    if rng.random_bool(0.15) {
        dark = 0.0;
    }
    if rng.random_bool(0.15) {
        floats = 0.0;
    }
    let clean = 1.0 - dark - floats;
    MaskSpec::new(size, clean, dark, floats)
}

/// Render one toy sample from a per-sample seed.
pub fn toy_sample(
    size: usize,
    spec: &ToyRenderSpec,
    sample_seed: u64,
) -> Result<Sample, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mspec = toy_mask_spec(size, &mut rng);
    let map = maskpipe::synth_mask(&mspec, mix_seed(sample_seed, 1))?;
    Ok(render_toy(&map, spec, mix_seed(sample_seed, 2)))
}

/// Ids and per-sample seeds of a toy dataset, in sorted id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyManifest {
    pub entries: Vec<(String, u64)>,
}

impl ToyManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tseed\n");
        for (id, seed) in &self.entries {
            s.push_str(&format!("{id}\t{seed}\n"));
        }
        s
    }
}

pub fn toy_id(index: usize) -> String {
    format!("toy_{index:05}")
}

/// Write `n` toy pairs under `out_dir` in the paired layout.
pub fn make_toy_dataset(
    n: usize,
    out_dir: &Path,
    spec: &ToyRenderSpec,
    seed: u64,
    size: usize,
) -> Result<ToyManifest, DatasetError> {
    if n == 0 {
        return Err(DatasetError::BadSpec("dataset size must be ≥ 1".into()));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = toy_id(i);
        let s = mix_seed(seed, i as u64);
        let sample = toy_sample(size, spec, s)?;
        sample
            .image
            .save_png(&out_dir.join("images").join(format!("{id}.png")))?;
        maskpipe::save_label_mask(
            &sample.bundle.y_a,
            &out_dir.join("masks").join(format!("{id}.png")),
        )?;
        entries.push((id, s));
    }
    let manifest = ToyManifest { entries };
    fs::write(out_dir.join("manifest.tsv"), manifest.to_tsv())?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `images/<id>.png` + `masks/<id>.png`
    Paired,
    /// Images anywhere below `labelled_images/` (finding folders are ignored),
    /// masks in `masks/<id>.png`.
    Kvasir,
}

/// Located (image, mask) pair, not yet decoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn collect_images(dir: &Path, recursive: bool, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    if !dir.is_dir() {
        return Ok(());
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            if recursive {
                collect_images(&p, true, out)?;
            }
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

/// Find all pairs under `root`, sorted by id.
pub fn scan_folder(root: &Path, layout: Layout) -> Result<Vec<Entry>, DatasetError> {
    let mut images = Vec::new();
    match layout {
        Layout::Paired => collect_images(&root.join("images"), false, &mut images)?,
        Layout::Kvasir => collect_images(&root.join("labelled_images"), true, &mut images)?,
    }
    let mut by_id = BTreeMap::new();
    for p in images {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        by_id.entry(id).or_insert(p);
    }
    if by_id.is_empty() {
        return Err(DatasetError::EmptyDataset(root.display().to_string()));
    }
    by_id
        .into_iter()
        .map(|(id, image)| {
            let mask = root.join("masks").join(format!("{id}.png"));
            if !mask.is_file() {
                return Err(DatasetError::MissingMask(id));
            }
            Ok(Entry { id, image, mask })
        })
        .collect()
}

/// Decode one pair; masks may be label or color rasters.
pub fn load_entry(entry: &Entry, resize_to: Option<usize>) -> Result<Sample, DatasetError> {
    let mut image = Image::load(&entry.image)?;
    let mut map = maskpipe::load_any_mask(&entry.mask).map_err(|source| DatasetError::BadMask {
        id: entry.id.clone(),
        source,
    })?;
    if let Some(s) = resize_to {
        image = image.resized(s, s);
        map = map.resample_nearest(s, s)?;
    }
    if (image.width, image.height) != (map.width(), map.height()) {
        return Err(DatasetError::ShapeMismatch {
            id: entry.id.clone(),
            image: (image.width, image.height),
            mask: (map.width(), map.height()),
        });
    }
    let bundle = maskpipe::split_channels(&map);
    bundle.validate().map_err(|source| DatasetError::BadMask {
        id: entry.id.clone(),
        source,
    })?;
    Ok(Sample {
        image,
        bundle,
        id: entry.id.clone(),
    })
}

/// All samples under `root` in sorted-id order.
pub fn load_folder(root: &Path, layout: Layout) -> Result<Vec<Sample>, DatasetError> {
    load_folder_resized(root, layout, None)
}

pub fn load_folder_resized(
    root: &Path,
    layout: Layout,
    resize_to: Option<usize>,
) -> Result<Vec<Sample>, DatasetError> {
    scan_folder(root, layout)?
        .iter()
        .map(|e| load_entry(e, resize_to))
        .collect()
}

/// Region-masked luminance mean and population variance.
#[cfg(test)]
pub(crate) fn region_stats(img: &Image, map: &SemanticMap, class: Class) -> Option<(f32, f32)> {
    let lum = img.luminance();
    let vals: Vec<f32> = lum
        .iter()
        .zip(map.labels())
        .filter(|(_, &c)| c == class)
        .map(|(&l, _)| l)
        .collect();
    if vals.is_empty() {
        return None;
    }
    let m = vals.iter().sum::<f32>() / vals.len() as f32;
    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / vals.len() as f32;
    Some((m, v))
}
