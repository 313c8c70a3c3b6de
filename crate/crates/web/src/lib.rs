//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Everything runs on a single in-memory frame: synthesize a mask, render
//! the toy frame for it, then push that frame through the forward noising
//! process at a chosen timestep.

use capsule_ldm::datasets::{render_toy, Image, ToyRenderSpec};
use capsule_ldm::diffusion::{make_schedule, q_sample, standard_normal, ScheduleKind};
use capsule_ldm::eval::adherence_report;
use capsule_ldm::maskpipe::{synth_mask, Class, FovSpec, MaskSpec, SemanticMap};
use capsule_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    map: SemanticMap,
    image: Image,
}

fn rgba(img: &image::RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

impl Demo {
    pub fn try_new(
        size: usize,
        clean: f64,
        dark: f64,
        floats: f64,
        fov_frac: f64,
        seed: u64,
    ) -> Result<Self, String> {
        let mut spec = MaskSpec::new(size, clean, dark, floats);
        let s = size as f64;
        spec.fov = Some(FovSpec {
            center_x: s / 2.0,
            center_y: s / 2.0,
            radius: fov_frac * s / 2.0,
        });
        let map = synth_mask(&spec, seed).map_err(|e| e.to_string())?;
        let image = render_toy(&map, &ToyRenderSpec::default(), seed).image;
        Ok(Self { map, image })
    }

    /// `x_t` for the current frame, mapped from [-1, 1] back to [0, 1].
    pub fn noised(
        &self,
        t: usize,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        seed: u64,
    ) -> Result<Image, String> {
        let sched = make_schedule(steps, beta_start, beta_end, ScheduleKind::Linear)
            .map_err(|e| e.to_string())?;
        let shape = [3, self.image.height, self.image.width];
        let x0 = Tensor::from_vec(
            &shape,
            self.image.data.iter().map(|v| v * 2.0 - 1.0).collect(),
        );
        let eps = standard_normal(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
        let xt = q_sample(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
        Ok(Image::new(
            self.image.width,
            self.image.height,
            xt.data()
                .iter()
                .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect(),
        ))
    }
}

#[wasm_bindgen]
impl Demo {
    /// Synthesize a mask (fractions of the field of view) and render it.
    #[wasm_bindgen(constructor)]
    pub fn new(
        size: usize,
        clean: f64,
        dark: f64,
        floats: f64,
        fov_frac: f64,
        seed: u64,
    ) -> Result<Demo, JsError> {
        Self::try_new(size, clean, dark, floats, fov_frac, seed).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.map.width()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        rgba(&self.map.to_color_image())
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image.to_rgb8())
    }

    /// Pixel counts as `[blank, clean, dark, floats]`.
    pub fn histogram(&self) -> Vec<u32> {
        Class::ALL
            .iter()
            .map(|&c| self.map.count(c) as u32)
            .collect()
    }

    /// Region statistics and rule outcomes as JSON.
    pub fn adherence_json(&self) -> String {
        adherence_report(&self.image, &self.map)
            .map(|r| serde_json::to_string(&r).unwrap_or_default())
            .unwrap_or_default()
    }

    pub fn noised_rgba(
        &self,
        t: usize,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        seed: u64,
    ) -> Result<Vec<u8>, JsError> {
        self.noised(t, steps, beta_start, beta_end, seed)
            .map(|img| rgba(&img.to_rgb8()))
            .map_err(|e| JsError::new(&e))
    }
}

/// ᾱ_1 … ᾱ_T of a linear schedule.
#[wasm_bindgen]
pub fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    make_schedule(steps, beta_start, beta_end, ScheduleKind::Linear)
        .map(|s| s.alpha_bars().to_vec())
        .map_err(|e| JsError::new(&e.to_string()))
}
