//! Image generation from a trained LDM + autoencoder pair, and contact
//! sheets with the masks on top and one row per seed below.

use std::path::{Path, PathBuf};

use capsule_nn::{ParamStore, Tensor};
use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::autoencoder::{AeError, Autoencoder};
use crate::checkpoint::{Archive, CheckpointError};
use crate::condunet::{CondBatch, CondPyramid, CondUNet, InjectionPlan, UNetError};
use crate::datasets::Image;
use crate::diffusion::{sample_loop, DiffusionError, NoiseSchedule};
use crate::maskpipe::{self, FovSpec, MaskBundle, MaskError, SemanticMap};
use crate::trainer::{LdmState, TrainError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("mask is {mask_w}×{mask_h} but the model generates {size}×{size} (enable resampling)")]
    ResolutionMismatch {
        mask_w: usize,
        mask_h: usize,
        size: usize,
    },
    #[error("no masks given")]
    EmptyMaskList,
    #[error("no seeds given")]
    NoSeeds,
    #[error("autoencoder latent channels ({ae}) do not match the diffusion model ({ldm})")]
    Incompatible { ae: usize, ldm: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Items per reverse-chain batch.
const SAMPLE_CHUNK: usize = 32;

/// Frozen models ready for sampling (EMA weights).
#[derive(Clone, Debug)]
pub struct Generator {
    pub ae: Autoencoder,
    pub net: CondUNet,
    pub weights: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub image_size: usize,
    pub latent_hw: (usize, usize),
}

/// How masks are brought to the model resolution and field of view.
#[derive(Clone, Debug, Default)]
pub struct PrepOptions {
    /// `None` uses the inscribed circle.
    pub fov: Option<FovSpec>,
    /// Nearest-neighbour resampling when the mask size differs.
    pub resample: bool,
}

impl Generator {
    /// `steps` respaces the trained schedule; `None` runs all T steps.
    pub fn new(ldm: LdmState, ae: Autoencoder, steps: Option<usize>) -> Result<Self, SamplerError> {
        if ae.config().latent_channels != ldm.net.latent_channels() {
            return Err(SamplerError::Incompatible {
                ae: ae.config().latent_channels,
                ldm: ldm.net.latent_channels(),
            });
        }
        let full = ldm.noise_schedule();
        let schedule = match steps {
            Some(s) => full.respaced(s)?,
            None => full,
        };
        Ok(Self {
            ae,
            net: ldm.net,
            weights: ldm.ema,
            schedule,
            image_size: ldm.image_size,
            latent_hw: ldm.latent_hw,
        })
    }

    pub fn load(
        ldm_path: &Path,
        ae_path: &Path,
        steps: Option<usize>,
    ) -> Result<Self, SamplerError> {
        let ldm = LdmState::load(ldm_path, None)?;
        let ae = Autoencoder::from_archive(&Archive::load(ae_path)?)?;
        Self::new(ldm, ae, steps)
    }

    /// Same weights routed through another injection plan.
    pub fn with_plan(&self, plan: &InjectionPlan) -> Result<Self, SamplerError> {
        Ok(Self {
            net: self.net.with_plan(plan)?,
            ..self.clone()
        })
    }

    /// Resample (optionally), blank the corners and split.
    pub fn prepare(
        &self,
        map: &SemanticMap,
        opts: &PrepOptions,
    ) -> Result<(SemanticMap, MaskBundle), SamplerError> {
        let s = self.image_size;
        let map = if (map.width(), map.height()) != (s, s) {
            if !opts.resample {
                return Err(SamplerError::ResolutionMismatch {
                    mask_w: map.width(),
                    mask_h: map.height(),
                    size: s,
                });
            }
            log::warn!(
                "resampling {}×{} mask to {s}×{s} (nearest neighbour)",
                map.width(),
                map.height()
            );
            map.resample_nearest(s, s)?
        } else {
            map.clone()
        };
        let fov = opts.fov.unwrap_or_else(|| FovSpec::inscribed(s, s));
        fov.validate(s, s)?;
        let map = maskpipe::reassign_corners(&map, &fov);
        let bundle = maskpipe::split_channels(&map);
        Ok((map, bundle))
    }

    pub fn pyramid(&self, bundle: &MaskBundle) -> Result<CondPyramid, SamplerError> {
        let (h, w) = self.latent_hw;
        Ok(CondPyramid::new(bundle, h, w, self.net.config().levels)?)
    }

    /// Raw latents for `(bundles[i], seeds[i])` pairs.
    pub fn sample_latents(
        &self,
        bundles: &[&MaskBundle],
        seeds: &[u64],
    ) -> Result<Tensor<f32>, SamplerError> {
        assert_eq!(bundles.len(), seeds.len(), "one seed per bundle");
        if seeds.is_empty() {
            return Err(SamplerError::NoSeeds);
        }
        let pyramids: Vec<CondPyramid> = bundles
            .iter()
            .map(|b| self.pyramid(b))
            .collect::<Result<_, _>>()?;
        let (h, w) = self.latent_hw;
        let c = self.net.latent_channels();
        let mut out = Vec::with_capacity(seeds.len());
        for start in (0..seeds.len()).step_by(SAMPLE_CHUNK) {
            let end = (start + SAMPLE_CHUNK).min(seeds.len());
            let cond = CondBatch::<f32>::stack(&pyramids[start..end].iter().collect::<Vec<_>>());
            let mut err = None;
            let mut model = |z: &Tensor<f32>, t: usize| {
                let ts = vec![t; z.shape()[0]];
                match self.net.predict(&self.weights, z, &ts, Some(&cond)) {
                    Ok(e) => e,
                    Err(e) => {
                        err.get_or_insert(e);
                        Tensor::zeros(z.shape())
                    }
                }
            };
            let z = sample_loop(&mut model, &self.schedule, &seeds[start..end], &[c, h, w])?;
            if let Some(e) = err {
                return Err(e.into());
            }
            out.extend((0..end - start).map(|i| z.batch_item(i)));
        }
        Ok(Tensor::stack_batch(&out))
    }

    /// Decoded images for `(bundles[i], seeds[i])` pairs.
    pub fn sample(
        &self,
        bundles: &[&MaskBundle],
        seeds: &[u64],
    ) -> Result<Vec<Image>, SamplerError> {
        let z = self.sample_latents(bundles, seeds)?;
        let x = self.ae.decode_scaled(&z)?;
        Ok(crate::autoencoder::tensor_to_images(&x))
    }
}

/// Grid layout: `cols` masks, `rows` = 1 mask row + one row per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SheetGeometry {
    pub cols: usize,
    pub rows: usize,
    pub tile: usize,
    pub gap: usize,
}

impl SheetGeometry {
    pub const GAP: usize = 2;

    pub fn pixel_size(&self) -> (usize, usize) {
        (
            self.cols * self.tile + (self.cols + 1) * self.gap,
            self.rows * self.tile + (self.rows + 1) * self.gap,
        )
    }

    /// Invert [`Self::pixel_size`] for a known tile size.
    pub fn from_pixel_size(width: usize, height: usize, tile: usize) -> Option<Self> {
        let gap = Self::GAP;
        let cols = (width.checked_sub(gap)?) / (tile + gap);
        let rows = (height.checked_sub(gap)?) / (tile + gap);
        let g = Self {
            cols,
            rows,
            tile,
            gap,
        };
        (g.pixel_size() == (width, height)).then_some(g)
    }
}

/// Columns of `(top tile, tiles below)`; all tiles share one size.
pub fn contact_sheet(columns: &[(RgbImage, Vec<RgbImage>)]) -> (RgbImage, SheetGeometry) {
    let tile = columns[0].0.width() as usize;
    let rows = 1 + columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    let g = SheetGeometry {
        cols: columns.len(),
        rows,
        tile,
        gap: SheetGeometry::GAP,
    };
    let (w, h) = g.pixel_size();
    let mut sheet = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    for (ci, (top, below)) in columns.iter().enumerate() {
        for (ri, img) in std::iter::once(top).chain(below).enumerate() {
            let x0 = g.gap + ci * (tile + g.gap);
            let y0 = g.gap + ri * (tile + g.gap);
            image::imageops::replace(&mut sheet, img, x0 as i64, y0 as i64);
        }
    }
    (sheet, g)
}

pub struct Generated {
    pub images: Vec<PathBuf>,
    pub grid: PathBuf,
}

/// One image per seed for a single mask file, plus `grid.png`.
pub fn generate(
    gen: &Generator,
    mask_path: &Path,
    seeds: &[u64],
    out_dir: &Path,
    opts: &PrepOptions,
) -> Result<Generated, SamplerError> {
    if seeds.is_empty() {
        return Err(SamplerError::NoSeeds);
    }
    let map = maskpipe::load_any_mask(mask_path)?;
    let (map, bundle) = gen.prepare(&map, opts)?;
    let bundles = vec![&bundle; seeds.len()];
    let images = gen.sample(&bundles, seeds)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(seeds.len());
    for (i, (img, seed)) in images.iter().zip(seeds).enumerate() {
        let p = out_dir.join(format!("sample_{i:03}_seed{seed}.png"));
        img.save_png(&p)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        paths.push(p);
    }
    let (sheet, _) = contact_sheet(&[(
        map.to_color_image(),
        images.iter().map(Image::to_rgb8).collect(),
    )]);
    let grid = out_dir.join("grid.png");
    sheet
        .save_with_format(&grid, image::ImageFormat::Png)
        .map_err(std::io::Error::other)?;
    Ok(Generated {
        images: paths,
        grid,
    })
}

/// Masks as columns, seeds `1..=n_seeds` as rows.
pub fn make_sheet(
    gen: &Generator,
    mask_paths: &[PathBuf],
    n_seeds: usize,
    out_path: &Path,
    opts: &PrepOptions,
) -> Result<SheetGeometry, SamplerError> {
    if mask_paths.is_empty() {
        return Err(SamplerError::EmptyMaskList);
    }
    if n_seeds == 0 {
        return Err(SamplerError::NoSeeds);
    }
    let mut prepared = Vec::with_capacity(mask_paths.len());
    for p in mask_paths {
        prepared.push(gen.prepare(&maskpipe::load_any_mask(p)?, opts)?);
    }
    let seeds: Vec<u64> = (1..=n_seeds as u64).collect();
    let mut pairs_b = Vec::new();
    let mut pairs_s = Vec::new();
    for (_, b) in &prepared {
        for &s in &seeds {
            pairs_b.push(b);
            pairs_s.push(s);
        }
    }
    let images = gen.sample(&pairs_b, &pairs_s)?;
    let columns: Vec<(RgbImage, Vec<RgbImage>)> = prepared
        .iter()
        .zip(images.chunks(n_seeds))
        .map(|((m, _), imgs)| {
            (
                m.to_color_image(),
                imgs.iter().map(Image::to_rgb8).collect(),
            )
        })
        .collect();
    let (sheet, g) = contact_sheet(&columns);
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    sheet
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(std::io::Error::other)?;
    Ok(g)
}
