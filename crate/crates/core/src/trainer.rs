//! Two-stage training: autoencoder pretraining, then mask-conditioned latent
//! diffusion with EMA weights, periodic checkpoints and exact resume.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capsule_nn::{clip_global_norm, ema_update, Adam, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoencoder::{
    images_to_tensor, train_autoencoder, AeError, AeTrainOptions, Autoencoder,
};
use crate::checkpoint::{hex, Archive, CheckpointError};
use crate::condunet::{CondBatch, CondPyramid, CondUNet, UNetConfig, UNetError};
use crate::config::{ScheduleConfig, TrainConfig};
use crate::datasets::{self, DatasetError, Sample};
use crate::diffusion::{ddpm_loss_with, DiffusionError, NoiseDraw, NoiseSchedule};
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diffusion loss became non-finite at step {step}; last good checkpoint: {last_good}")]
    NaNLoss { step: usize, last_good: String },
    #[error("autoencoder checkpoint required: {0}")]
    MissingAE(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinguishes the LDM batch stream from the AE one under the same seed.
const LDM_STREAM: u64 = 0x4c44_4d00;

/// Load the configured dataset at the working resolution; every bundle is
/// validated at ingestion.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<Sample>, TrainError> {
    Ok(datasets::load_folder_resized(
        &cfg.data_root,
        cfg.layout,
        Some(cfg.image_size),
    )?)
}

/// SHA-256 over ids, pixel values and mask labels, in loader order.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        for v in &s.image.data {
            h.update(v.to_le_bytes());
        }
        h.update(s.bundle.y_a.ids());
    }
    hex(&h.finalize())
}

pub fn config_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// Tab-separated `(step, loss, wallclock)` sink, written to a file and
/// optionally echoed to stdout.
pub struct TrainLog {
    file: std::fs::File,
    echo: bool,
    start: Instant,
}

impl TrainLog {
    pub fn create(path: &Path, echo: bool, append: bool) -> std::io::Result<Self> {
        let exists = append && path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        if !exists {
            writeln!(file, "step\tloss\twallclock")?;
        }
        if echo && !exists {
            println!("step\tloss\twallclock");
        }
        Ok(Self {
            file,
            echo,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, step: usize, loss: f32) -> std::io::Result<()> {
        let line = format!(
            "{step}\t{loss:.6}\t{:.3}",
            self.start.elapsed().as_secs_f64()
        );
        writeln!(self.file, "{line}")?;
        if self.echo {
            println!("{line}");
        }
        Ok(())
    }
}

/// Read back a log written by [`TrainLog`].
pub fn read_log(path: &Path) -> std::io::Result<Vec<(usize, f32)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split('\t');
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect())
}

/// AE stage: train on the configured dataset and save to `out`.
pub fn train_ae_stage(
    cfg: &TrainConfig,
    config_text: &str,
    out: &Path,
    log: Option<&mut TrainLog>,
) -> Result<Autoencoder, TrainError> {
    let samples = load_dataset(cfg)?;
    let images = images_to_tensor(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let opts = AeTrainOptions {
        steps: cfg.ae_train.steps,
        batch_size: cfg.ae_train.batch_size,
        learning_rate: cfg.ae_train.learning_rate,
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
    };
    let mut log = log;
    let mut io_err = None;
    let ae = train_autoencoder(&images, &cfg.ae, &opts, |step, loss| {
        if let Some(l) = log.as_deref_mut() {
            if let Err(e) = l.record(step, loss) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let extra = json!({
        "config_text": config_text,
        "dataset_hash": dataset_hash(&samples),
        "image_size": cfg.image_size,
    });
    ae.to_archive(extra).save(out)?;
    Ok(ae)
}

/// Everything needed to continue or sample from an LDM run.
#[derive(Clone, Debug)]
pub struct LdmState {
    pub net: CondUNet,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub step: usize,
    pub seed: u64,
    pub config_text: String,
    pub schedule: ScheduleConfig,
    pub image_size: usize,
    pub latent_hw: (usize, usize),
    pub ae_hash: String,
}

impl LdmState {
    pub fn new(
        cfg: &TrainConfig,
        config_text: &str,
        latent_channels: usize,
        ae_hash: &str,
    ) -> Result<Self, TrainError> {
        let mut params = ParamStore::new();
        let net = CondUNet::new(
            &cfg.unet,
            latent_channels,
            &mut params,
            mix_seed(cfg.seed, LDM_STREAM),
        )?;
        let opt = Adam::new(&params, cfg.learning_rate as f32);
        let l = cfg.image_size / cfg.ae.downsample_factor;
        Ok(Self {
            ema: params.clone(),
            net,
            params,
            opt,
            step: 0,
            seed: cfg.seed,
            config_text: config_text.to_string(),
            schedule: cfg.schedule.clone(),
            image_size: cfg.image_size,
            latent_hw: (l, l),
            ae_hash: ae_hash.to_string(),
        })
    }

    pub fn to_archive(&self) -> Archive {
        let meta = json!({
            "unet": self.net.config(),
            "latent_channels": self.net.latent_channels(),
            "schedule": self.schedule,
            "step": self.step,
            "seed": self.seed,
            "rng": {"kind": "chacha8-counter", "seed": self.seed, "next_step": self.step + 1},
            "adam": {"step": self.opt.step, "lr": self.opt.lr},
            "config_text": self.config_text,
            "image_size": self.image_size,
            "latent_hw": [self.latent_hw.0, self.latent_hw.1],
            "ae_hash": self.ae_hash,
        });
        let mut a = Archive::new("ldm", meta);
        a.put_store("model", &self.params);
        a.put_store("ema", &self.ema);
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            a.put(&format!("adam_m/{i}"), m.clone());
            a.put(&format!("adam_v/{i}"), v.clone());
        }
        a
    }

    /// Rebuild from an archive. With `expect`, the stored U-Net config must
    /// match it field for field.
    pub fn from_archive(a: &Archive, expect: Option<&UNetConfig>) -> Result<Self, TrainError> {
        let fmt = |m: String| TrainError::Checkpoint(CheckpointError::Format(m));
        if a.kind != "ldm" {
            return Err(CheckpointError::Version(format!(
                "expected an 'ldm' checkpoint, got '{}'",
                a.kind
            ))
            .into());
        }
        let m = &a.meta;
        let unet: UNetConfig = serde_json::from_value(m["unet"].clone())
            .map_err(|e| fmt(format!("unet config: {e}")))?;
        if let Some(want) = expect {
            if let Some(diff) = config_mismatch(&unet, want) {
                return Err(CheckpointError::Version(format!(
                    "checkpoint U-Net config differs: {diff}"
                ))
                .into());
            }
        }
        let num = |k: &str| m[k].as_u64().ok_or_else(|| fmt(format!("missing {k}")));
        let latent_channels = num("latent_channels")? as usize;
        let seed = num("seed")?;
        let mut params = ParamStore::new();
        let net = CondUNet::new(&unet, latent_channels, &mut params, 0)?;
        a.fill_store("model", &mut params)?;
        let mut ema = params.clone();
        a.fill_store("ema", &mut ema)?;
        let lr = m["adam"]["lr"]
            .as_f64()
            .ok_or_else(|| fmt("missing adam.lr".into()))?;
        let mut opt = Adam::new(&params, lr as f32);
        opt.step = m["adam"]["step"]
            .as_u64()
            .ok_or_else(|| fmt("missing adam.step".into()))?;
        for i in 0..params.len() {
            let get = |k: &str| {
                a.get(&format!("{k}/{i}"))
                    .cloned()
                    .ok_or_else(|| fmt(format!("missing {k}/{i}")))
            };
            opt.m[i] = get("adam_m")?;
            opt.v[i] = get("adam_v")?;
        }
        let schedule: ScheduleConfig = serde_json::from_value(m["schedule"].clone())
            .map_err(|e| fmt(format!("schedule: {e}")))?;
        let hw = &m["latent_hw"];
        Ok(Self {
            net,
            params,
            ema,
            opt,
            step: num("step")? as usize,
            seed,
            config_text: m["config_text"].as_str().unwrap_or_default().to_string(),
            schedule,
            image_size: num("image_size")? as usize,
            latent_hw: (
                hw[0]
                    .as_u64()
                    .ok_or_else(|| fmt("missing latent_hw".into()))? as usize,
                hw[1]
                    .as_u64()
                    .ok_or_else(|| fmt("missing latent_hw".into()))? as usize,
            ),
            ae_hash: m["ae_hash"].as_str().unwrap_or_default().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path, expect: Option<&UNetConfig>) -> Result<Self, TrainError> {
        Self::from_archive(&Archive::load(path)?, expect)
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        self.schedule
            .build()
            .expect("schedule stored by a validated run")
    }
}

/// First differing top-level field between two U-Net configs.
fn config_mismatch(have: &UNetConfig, want: &UNetConfig) -> Option<String> {
    let (a, b) = (
        serde_json::to_value(have).ok()?,
        serde_json::to_value(want).ok()?,
    );
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, v)| {
        format!(
            "{k}: checkpoint has {v}, requested {}",
            b.get(k).cloned().unwrap_or_default()
        )
    })
}

/// SHA-256 of the AE checkpoint bytes, so an LDM run records which AE it used.
pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// Latents and conditioning pyramids for every training sample.
pub struct LatentSet {
    pub latents: Tensor<f32>,
    pub pyramids: Vec<CondPyramid>,
}

pub fn encode_dataset(
    samples: &[Sample],
    ae: &Autoencoder,
    levels: usize,
) -> Result<LatentSet, TrainError> {
    let images = images_to_tensor(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let latents = ae.encode_scaled(&images)?;
    let (_, _, h, w) = latents.dims4();
    let pyramids = samples
        .iter()
        .map(|s| CondPyramid::new(&s.bundle, h, w, levels))
        .collect::<Result<_, _>>()?;
    Ok(LatentSet { latents, pyramids })
}

/// Batch indices and noise for LDM step `step`: a pure function of
/// `(seed, step)`, so a resumed run replays the same stream.
fn ldm_batch(
    seed: u64,
    step: usize,
    n: usize,
    shape: &[usize],
    sched: &NoiseSchedule,
) -> (Vec<usize>, NoiseDraw) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ LDM_STREAM, step as u64));
    let idx: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(0..n)).collect();
    let draw = NoiseDraw::sample(shape, sched, &mut rng);
    (idx, draw)
}

/// Where an LDM run writes its outputs.
#[derive(Clone, Debug)]
pub struct LdmRunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl LdmRunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("ldm.ckpt"),
            log: dir.join("train_log.tsv"),
        }
    }
}

/// Run (or continue) diffusion training until `cfg.steps`. One optimizer
/// step, one EMA update and one log record per step; checkpoints every
/// `checkpoint_every` steps and at the end.
pub fn train_ldm_loop(
    cfg: &TrainConfig,
    state: &mut LdmState,
    data: &LatentSet,
    paths: &LdmRunPaths,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let sched = cfg.schedule();
    let n = data.latents.shape()[0];
    let (_, c, h, w) = data.latents.dims4();
    let shape = [cfg.batch_size, c, h, w];
    for step in state.step + 1..=cfg.steps {
        let (idx, draw) = ldm_batch(cfg.seed, step, n, &shape, &sched);
        let z0 = Tensor::stack_batch(
            &idx.iter()
                .map(|&i| data.latents.batch_item(i))
                .collect::<Vec<_>>(),
        );
        let cond =
            CondBatch::<f32>::stack(&idx.iter().map(|&i| &data.pyramids[i]).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let p = state.params.bind(&mut tape);
        let net = &state.net;
        let loss = ddpm_loss_with(&mut tape, &z0, &draw, &sched, |tape, zt, ts| {
            net.forward(tape, &p, zt, ts, Some(&cond))
        })?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(TrainError::NaNLoss {
                step,
                last_good: paths.checkpoint.display().to_string(),
            });
        }
        let mut g = tape.backward(loss);
        let mut grads = p.grads(&tape, &mut g);
        drop(tape);
        clip_global_norm(&mut grads, cfg.grad_clip as f32);
        state.opt.update(&mut state.params, &grads);
        ema_update(&mut state.ema, &state.params, cfg.ema_decay as f32);
        state.step = step;
        log.record(step, lv)?;
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            state.save(&paths.checkpoint)?;
        }
    }
    Ok(())
}

/// LDM stage from a config: fresh run, or resume from `resume` (which must
/// have been written by the same config text).
pub fn train_ldm_stage(
    cfg: &TrainConfig,
    config_text: &str,
    ae_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    echo: bool,
) -> Result<LdmState, TrainError> {
    if !ae_path.is_file() {
        return Err(TrainError::MissingAE(ae_path.display().to_string()));
    }
    let ae = Autoencoder::from_archive(&Archive::load_kind(ae_path, "ae")?)?;
    if ae.config() != &cfg.ae {
        return Err(CheckpointError::Version(
            "autoencoder checkpoint does not match the [ae] section".into(),
        )
        .into());
    }
    let ae_hash = file_hash(ae_path)?;
    let samples = load_dataset(cfg)?;
    let data = encode_dataset(&samples, &ae, cfg.unet.levels)?;
    std::fs::create_dir_all(out_dir)?;
    let paths = LdmRunPaths::in_dir(out_dir);
    let mut state = match resume {
        Some(p) => {
            let s = LdmState::load(p, Some(&cfg.unet))?;
            if s.config_text != config_text {
                return Err(CheckpointError::Version(
                    "resume checkpoint was written by a different config".into(),
                )
                .into());
            }
            s
        }
        None => LdmState::new(cfg, config_text, ae.config().latent_channels, &ae_hash)?,
    };
    let mut log = TrainLog::create(&paths.log, echo, resume.is_some())?;
    train_ldm_loop(cfg, &mut state, &data, &paths, &mut log)?;
    Ok(state)
}
