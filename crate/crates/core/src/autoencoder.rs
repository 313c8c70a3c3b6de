//! KL-regularized convolutional autoencoder that defines the diffusion latent
//! space.

use capsule_nn::{clip_global_norm, Adam, Bound, Conv2d, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Archive, CheckpointError};
use crate::datasets::Image;
use crate::diffusion::standard_normal;
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum AeError {
    #[error("invalid autoencoder config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss became non-finite at step {0}")]
    NaNLoss(usize),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AEConfig {
    #[serde(default = "defaults::factor")]
    pub downsample_factor: usize,
    #[serde(default = "defaults::latent_channels")]
    pub latent_channels: usize,
    /// One width per resolution level, `log2(f) + 1` entries.
    #[serde(default = "defaults::hidden_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "defaults::kl_weight")]
    pub kl_weight: f64,
}

mod defaults {
    pub fn factor() -> usize {
        4
    }
    pub fn latent_channels() -> usize {
        4
    }
    pub fn hidden_widths() -> Vec<usize> {
        vec![16, 32, 32]
    }
    pub fn kl_weight() -> f64 {
        1e-6
    }
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            downsample_factor: defaults::factor(),
            latent_channels: defaults::latent_channels(),
            hidden_widths: defaults::hidden_widths(),
            kl_weight: defaults::kl_weight(),
        }
    }
}

impl AEConfig {
    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Every violated constraint, prefixed by the field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if ![1, 2, 4].contains(&self.downsample_factor) {
            v.push(format!(
                "ae.downsample_factor: must be 1, 2 or 4 (got {})",
                self.downsample_factor
            ));
        } else if self.hidden_widths.len() != self.levels() + 1 {
            v.push(format!(
                "ae.hidden_widths: needs {} entries for downsample_factor {} (got {})",
                self.levels() + 1,
                self.downsample_factor,
                self.hidden_widths.len()
            ));
        }
        if self.hidden_widths.contains(&0) {
            v.push("ae.hidden_widths: widths must be ≥ 1".into());
        }
        if self.latent_channels == 0 {
            v.push("ae.latent_channels: must be ≥ 1".into());
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            v.push(format!(
                "ae.kl_weight: must be finite and ≥ 0 (got {})",
                self.kl_weight
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<(), AeError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AeError::Config(v.join("; ")))
        }
    }

    /// Latent `(C, h, w)` for an image of `height × width`.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3], AeError> {
        let f = self.downsample_factor;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(AeError::Shape(format!(
                "downsample factor {f} does not divide {height}×{width}"
            )));
        }
        Ok([self.latent_channels, height / f, width / f])
    }
}

const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

/// Layer layout; parameters live in a separate [`ParamStore`] so the same
/// network runs in any precision.
#[derive(Clone, Debug)]
pub struct AeNet {
    pub cfg: AEConfig,
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

impl AeNet {
    pub fn new<T: Real>(
        cfg: &AEConfig,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self, AeError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &cfg.hidden_widths;
        let c = cfg.latent_channels;
        let n = cfg.levels();
        let enc_in = Conv2d::same3(store, &mut rng, "enc.in", 3, w[0]);
        let enc_down = (0..n)
            .map(|i| {
                (
                    Conv2d::new(
                        store,
                        &mut rng,
                        &format!("enc.down{i}"),
                        w[i],
                        w[i + 1],
                        3,
                        2,
                        1,
                    ),
                    Conv2d::same3(store, &mut rng, &format!("enc.conv{i}"), w[i + 1], w[i + 1]),
                )
            })
            .collect();
        let enc_out = Conv2d::pointwise(store, &mut rng, "enc.out", w[n], 2 * c);
        let dec_in = Conv2d::same3(store, &mut rng, "dec.in", c, w[n]);
        let dec_mid = Conv2d::same3(store, &mut rng, "dec.mid", w[n], w[n]);
        let dec_up = (0..n)
            .rev()
            .map(|i| {
                (
                    Conv2d::same3(store, &mut rng, &format!("dec.up{i}"), w[i + 1], w[i]),
                    Conv2d::same3(store, &mut rng, &format!("dec.conv{i}"), w[i], w[i]),
                )
            })
            .collect();
        let dec_out = Conv2d::same3(store, &mut rng, "dec.out", w[0], 3);
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
        })
    }

    /// Posterior `(mu, logvar)`, each `[B, C, H/f, W/f]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        let mut h = self.enc_in.forward(tape, p, x);
        h = tape.silu(h);
        for (down, conv) in &self.enc_down {
            h = down.forward(tape, p, h);
            h = tape.silu(h);
            h = conv.forward(tape, p, h);
            h = tape.silu(h);
        }
        let out = self.enc_out.forward(tape, p, h);
        let c = self.cfg.latent_channels;
        let mu = tape.slice_channels(out, 0, c);
        let logvar = tape.slice_channels(out, c, c);
        let logvar = tape.clamp(logvar, T::lit(LOGVAR_RANGE.0), T::lit(LOGVAR_RANGE.1));
        (mu, logvar)
    }

    /// Unclamped reconstruction.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let mut h = self.dec_in.forward(tape, p, z);
        h = tape.silu(h);
        h = self.dec_mid.forward(tape, p, h);
        h = tape.silu(h);
        for (up, conv) in &self.dec_up {
            h = tape.upsample2(h);
            h = up.forward(tape, p, h);
            h = tape.silu(h);
            h = conv.forward(tape, p, h);
            h = tape.silu(h);
        }
        self.dec_out.forward(tape, p, h)
    }

    /// `mse(decode(mu + σ·eps), x) + kl_weight · KL`. With `eps = None` the
    /// posterior mean is decoded.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: &Tensor<T>,
        eps: Option<&Tensor<T>>,
    ) -> Var {
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode(tape, p, xv);
        let z = match eps {
            Some(e) => {
                let half = tape.scale(logvar, T::lit(0.5));
                let sigma = tape.exp(half);
                let noise = tape.mul_const(sigma, e.clone());
                tape.add(mu, noise)
            }
            None => mu,
        };
        let recon = self.decode(tape, p, z);
        let rec = tape.mse(recon, x.clone());
        if self.cfg.kl_weight == 0.0 {
            return rec;
        }
        let kl = tape.gaussian_kl(mu, logvar);
        let kl = tape.scale(kl, T::lit(self.cfg.kl_weight));
        tape.add(rec, kl)
    }
}

/// Trained autoencoder with its latent normalization scalar.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub net: AeNet,
    pub params: ParamStore<f32>,
    /// Multiplies raw latents so the training-set latents have unit std.
    pub latent_scale: f32,
    pub seed: u64,
}

/// Chunk size for inference passes; bounds tape memory.
const INFER_CHUNK: usize = 32;

pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor<f32>, AeError> {
    let first = images.first().ok_or(AeError::EmptyDataset)?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(AeError::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

pub fn tensor_to_images(t: &Tensor<f32>) -> Vec<Image> {
    let (b, _, h, w) = t.dims4();
    (0..b)
        .map(|i| Image::new(w, h, t.batch_item(i).into_vec()))
        .collect()
}

fn chunked(x: &Tensor<f32>, mut f: impl FnMut(Tensor<f32>) -> Tensor<f32>) -> Tensor<f32> {
    let b = x.shape()[0];
    let mut outs = Vec::with_capacity(b);
    for start in (0..b).step_by(INFER_CHUNK) {
        let items: Vec<_> = (start..(start + INFER_CHUNK).min(b))
            .map(|i| x.batch_item(i))
            .collect();
        let y = f(Tensor::stack_batch(&items));
        outs.extend((0..y.shape()[0]).map(|i| y.batch_item(i)));
    }
    Tensor::stack_batch(&outs)
}

impl Autoencoder {
    pub fn new(cfg: &AEConfig, seed: u64) -> Result<Self, AeError> {
        let mut params = ParamStore::new();
        let net = AeNet::new(cfg, &mut params, seed)?;
        Ok(Self {
            net,
            params,
            latent_scale: 1.0,
            seed,
        })
    }

    pub fn config(&self) -> &AEConfig {
        &self.net.cfg
    }

    /// Posterior mean (unscaled), `[B, C, H/f, W/f]`.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, AeError> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(AeError::Shape(format!("expected [B, 3, H, W], got {s:?}")));
        }
        self.net.cfg.latent_shape(s[2], s[3])?;
        Ok(chunked(images, |x| {
            let mut tape = Tape::inference();
            let p = self.params.bind(&mut tape);
            let xv = tape.constant(x);
            let (mu, _) = self.net.encode(&mut tape, &p, xv);
            tape.value(mu).clone()
        }))
    }

    /// Images in `[0, 1]`, `[B, 3, H, W]`.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>, AeError> {
        let s = latents.shape();
        if s.len() != 4 || s[1] != self.net.cfg.latent_channels {
            return Err(AeError::Shape(format!(
                "expected [B, {}, h, w] latents, got {s:?}",
                self.net.cfg.latent_channels
            )));
        }
        Ok(chunked(latents, |z| {
            let mut tape = Tape::inference();
            let p = self.params.bind(&mut tape);
            let zv = tape.constant(z);
            let out = self.net.decode(&mut tape, &p, zv);
            tape.value(out).map(|v| v.clamp(0.0, 1.0))
        }))
    }

    /// Encode and normalize: the latents diffusion runs on.
    pub fn encode_scaled(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, AeError> {
        let s = self.latent_scale;
        Ok(self.encode(images)?.map(|v| v * s))
    }

    pub fn decode_scaled(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>, AeError> {
        let inv = 1.0 / self.latent_scale;
        self.decode(&latents.map(|v| v * inv))
    }

    /// Set `latent_scale` to 1/std of the posterior means of `images`.
    pub fn fit_latent_scale(&mut self, images: &Tensor<f32>) -> Result<f32, AeError> {
        let z = self.encode(images)?;
        let n = z.numel() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        self.latent_scale = if var > 0.0 {
            (1.0 / var.sqrt()) as f32
        } else {
            1.0
        };
        Ok(self.latent_scale)
    }

    pub fn to_archive(&self, extra: serde_json::Value) -> Archive {
        let meta = serde_json::json!({
            "ae": self.net.cfg,
            "latent_scale": self.latent_scale,
            "seed": self.seed,
            "extra": extra,
        });
        let mut a = Archive::new("ae", meta);
        a.put_store("model", &self.params);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, AeError> {
        if a.kind != "ae" {
            return Err(CheckpointError::Version(format!(
                "expected an 'ae' checkpoint, got '{}'",
                a.kind
            ))
            .into());
        }
        let bad = |m: &str| AeError::Checkpoint(CheckpointError::Format(m.to_string()));
        let cfg: AEConfig = serde_json::from_value(a.meta["ae"].clone())
            .map_err(|e| bad(&format!("ae config: {e}")))?;
        let seed = a.meta["seed"].as_u64().ok_or_else(|| bad("missing seed"))?;
        let scale = a.meta["latent_scale"]
            .as_f64()
            .ok_or_else(|| bad("missing latent_scale"))?;
        let mut ae = Self::new(&cfg, seed)?;
        a.fill_store("model", &mut ae.params)?;
        ae.latent_scale = scale as f32;
        Ok(ae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 7,
        }
    }
}

/// Batch indices and reparameterization noise for `step`: a pure function of
/// `(seed, step)`.
fn ae_batch(
    seed: u64,
    step: usize,
    n: usize,
    batch: usize,
    latent: [usize; 3],
) -> (Vec<usize>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64));
    let idx = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let eps = standard_normal(&[batch, latent[0], latent[1], latent[2]], &mut rng);
    (idx, eps)
}

/// Train from scratch on `images` (`[N, 3, H, W]`), then fit the latent
/// scale. `on_step(step, loss)` is called after every optimizer step.
pub fn train_autoencoder(
    images: &Tensor<f32>,
    cfg: &AEConfig,
    opts: &AeTrainOptions,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Autoencoder, AeError> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(AeError::EmptyDataset);
    }
    let latent = cfg.latent_shape(images.shape()[2], images.shape()[3])?;
    let mut ae = Autoencoder::new(cfg, opts.seed)?;
    let mut opt = Adam::new(&ae.params, opts.learning_rate as f32);
    for step in 1..=opts.steps {
        let (idx, eps) = ae_batch(opts.seed, step, n, opts.batch_size, latent);
        let x = Tensor::stack_batch(
            &idx.iter()
                .map(|&i| images.batch_item(i))
                .collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape);
        let loss = ae.net.loss(&mut tape, &p, &x, Some(&eps));
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(AeError::NaNLoss(step));
        }
        let mut g = tape.backward(loss);
        let mut grads = p.grads(&tape, &mut g);
        clip_global_norm(&mut grads, opts.grad_clip as f32);
        opt.update(&mut ae.params, &grads);
        on_step(step, lv);
    }
    ae.fit_latent_scale(images)?;
    Ok(ae)
}
