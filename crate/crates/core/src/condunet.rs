//! Time-conditioned denoising U-Net with per-stage mask injection.
//!
//! Every encoder level, the middle block and every decoder level owns a fuse
//! site: a small convolutional embedder turns the site's mask (pooled to the
//! site's resolution) into `mask_embed_channels` feature maps, which are
//! concatenated with the activations and projected back by a 1×1 conv.

use std::fmt;

use capsule_nn::{Bound, Conv2d, GroupNorm, Linear, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskpipe::{Class, MaskBundle};

#[derive(Debug, Error, PartialEq)]
pub enum UNetError {
    #[error("invalid U-Net config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Which conditioning mask feeds a fuse site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskId {
    #[serde(rename = "d")]
    Dark,
    #[serde(rename = "c")]
    Clean,
    #[serde(rename = "f")]
    Floats,
    /// Full map as 4 indicator channels, blank included.
    #[serde(rename = "a")]
    All,
}

impl MaskId {
    pub const ALL: [MaskId; 4] = [MaskId::Dark, MaskId::Clean, MaskId::Floats, MaskId::All];

    pub fn channels(self) -> usize {
        match self {
            MaskId::All => 4,
            _ => 1,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            MaskId::Dark => 'd',
            MaskId::Clean => 'c',
            MaskId::Floats => 'f',
            MaskId::All => 'a',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.letter() == c)
    }
}

impl fmt::Display for MaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Mask assignment per fuse site. `decoder[j]` feeds the `j`-th decoder
/// stage executed, i.e. the deepest level first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub encoder: Vec<MaskId>,
    pub middle: MaskId,
    pub decoder: Vec<MaskId>,
}

impl InjectionPlan {
    /// Encoder cycles d, c, f; middle gets the full map; decoder mirrors the encoder.
    pub fn default_for(levels: usize) -> Self {
        let seq = [MaskId::Dark, MaskId::Clean, MaskId::Floats];
        let encoder: Vec<MaskId> = (0..levels).map(|k| seq[k % 3]).collect();
        let decoder = encoder.iter().rev().copied().collect();
        Self {
            encoder,
            middle: MaskId::All,
            decoder,
        }
    }

    /// Same decoder and middle, encoder order replaced.
    pub fn with_encoder(&self, encoder: Vec<MaskId>) -> Self {
        Self {
            encoder,
            ..self.clone()
        }
    }

    pub fn describe(&self) -> String {
        let j = |v: &[MaskId]| {
            v.iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "enc [{}] mid [{}] dec [{}]",
            j(&self.encoder),
            self.middle,
            j(&self.decoder)
        )
    }
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self::default_for(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    #[serde(default = "defaults::levels")]
    pub levels: usize,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::channel_multipliers")]
    pub channel_multipliers: Vec<usize>,
    #[serde(default = "defaults::time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "defaults::mask_embed_channels")]
    pub mask_embed_channels: usize,
    #[serde(default)]
    pub plan: InjectionPlan,
}

mod defaults {
    pub fn levels() -> usize {
        3
    }
    pub fn base_channels() -> usize {
        32
    }
    pub fn channel_multipliers() -> Vec<usize> {
        vec![1, 2, 2]
    }
    pub fn time_embed_dim() -> usize {
        64
    }
    pub fn mask_embed_channels() -> usize {
        16
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: defaults::levels(),
            base_channels: defaults::base_channels(),
            channel_multipliers: defaults::channel_multipliers(),
            time_embed_dim: defaults::time_embed_dim(),
            mask_embed_channels: defaults::mask_embed_channels(),
            plan: InjectionPlan::default(),
        }
    }
}

impl UNetConfig {
    /// Config with the default plan for `levels`.
    pub fn tiny(levels: usize, base: usize) -> Self {
        Self {
            levels,
            base_channels: base,
            channel_multipliers: (0..levels).map(|k| 1 << k.min(1)).collect(),
            time_embed_dim: 16,
            mask_embed_channels: 4,
            plan: InjectionPlan::default_for(levels),
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.levels == 0 {
            v.push("unet.levels: must be ≥ 1".into());
        }
        if self.base_channels == 0 {
            v.push("unet.base_channels: must be ≥ 1".into());
        }
        if self.channel_multipliers.len() != self.levels {
            v.push(format!(
                "unet.channel_multipliers: has {} entries, levels = {}",
                self.channel_multipliers.len(),
                self.levels
            ));
        }
        if self.channel_multipliers.contains(&0) {
            v.push("unet.channel_multipliers: entries must be ≥ 1".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            v.push(format!(
                "unet.time_embed_dim: must be even and ≥ 2 (got {})",
                self.time_embed_dim
            ));
        }
        if self.mask_embed_channels == 0 {
            v.push("unet.mask_embed_channels: must be ≥ 1".into());
        }
        if self.plan.encoder.len() != self.levels {
            v.push(format!(
                "unet.plan.encoder: has {} slots but levels = {}",
                self.plan.encoder.len(),
                self.levels
            ));
        }
        if self.plan.decoder.len() != self.levels {
            v.push(format!(
                "unet.plan.decoder: has {} slots but levels = {}",
                self.plan.decoder.len(),
                self.levels
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(UNetError::Config(v.join("; ")))
        }
    }
}

/// Area-average pooling of `[C, H, W]` planes to `target_h × target_w`.
pub fn downsample_mask(
    mask: &Tensor<f32>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<f32>, UNetError> {
    let s = mask.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if target_h == 0
        || target_w == 0
        || h % target_h != 0
        || w % target_w != 0
        || h / target_h != w / target_w
    {
        return Err(UNetError::Shape(format!(
            "cannot pool {h}×{w} mask to {target_h}×{target_w}"
        )));
    }
    let f = h / target_h;
    let inv = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        let plane = &mask.data()[ch * h * w..(ch + 1) * h * w];
        for ty in 0..target_h {
            for tx in 0..target_w {
                let mut acc = 0.0f64;
                for y in ty * f..(ty + 1) * f {
                    acc += plane[y * w + tx * f..y * w + (tx + 1) * f]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                out.push((acc * inv) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, target_h, target_w], out))
}

/// Full-resolution planes for one mask id: `[1, H, W]` or `[4, H, W]` for the
/// full map (blank, clean, dark, floats indicators).
pub fn mask_planes(bundle: &MaskBundle, id: MaskId) -> Tensor<f32> {
    let (w, h) = (bundle.width(), bundle.height());
    let bits = |b: &[u8]| b.iter().map(|&v| v as f32).collect::<Vec<_>>();
    match id {
        MaskId::Dark => Tensor::from_vec(&[1, h, w], bits(&bundle.y_d.bits)),
        MaskId::Clean => Tensor::from_vec(&[1, h, w], bits(&bundle.y_c.bits)),
        MaskId::Floats => Tensor::from_vec(&[1, h, w], bits(&bundle.y_f.bits)),
        MaskId::All => {
            let data = Class::ALL
                .iter()
                .flat_map(|&c| bits(&bundle.y_a.indicator(c)))
                .collect();
            Tensor::from_vec(&[4, h, w], data)
        }
    }
}

/// Pooled masks of one sample at every U-Net level: `levels[k][id]` is
/// `[channels(id), h >> k, w >> k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondPyramid {
    pub levels: Vec<[Tensor<f32>; 4]>,
}

impl CondPyramid {
    pub fn new(
        bundle: &MaskBundle,
        latent_h: usize,
        latent_w: usize,
        levels: usize,
    ) -> Result<Self, UNetError> {
        let planes = MaskId::ALL.map(|id| mask_planes(bundle, id));
        let levels = (0..levels)
            .map(|k| {
                let (rh, rw) = (latent_h >> k, latent_w >> k);
                if rh << k != latent_h || rw << k != latent_w {
                    return Err(UNetError::Shape(format!(
                        "latent {latent_h}×{latent_w} not divisible by 2^{k}"
                    )));
                }
                let mut out = Vec::with_capacity(4);
                for p in &planes {
                    out.push(downsample_mask(p, rh, rw)?);
                }
                Ok(out.try_into().expect("four mask ids"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { levels })
    }

    /// All-zero masks with the same geometry.
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.clone().map(|t| Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Batched pyramid, `levels[k][id]` is `[B, channels(id), h >> k, w >> k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch<T> {
    pub levels: Vec<[Tensor<T>; 4]>,
}

impl<T: Real> CondBatch<T> {
    pub fn stack(items: &[&CondPyramid]) -> Self {
        let n_levels = items[0].levels.len();
        let levels = (0..n_levels)
            .map(|k| {
                MaskId::ALL.map(|id| {
                    let parts: Vec<Tensor<T>> = items
                        .iter()
                        .map(|p| {
                            let t = &p.levels[k][id.index()];
                            let mut shape = vec![1];
                            shape.extend_from_slice(t.shape());
                            t.cast::<T>().reshape(&shape)
                        })
                        .collect();
                    Tensor::stack_batch(&parts)
                })
            })
            .collect();
        Self { levels }
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0][0].shape()[0]
    }

    fn get(&self, level: usize, id: MaskId) -> &Tensor<T> {
        &self.levels[level][id.index()]
    }
}

/// Sinusoidal timestep features `[B, dim]`: sin half then cos half.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp() * t as f64)
            .collect();
        data.extend(freqs.iter().map(|a| T::lit(a.sin())));
        data.extend(freqs.iter().map(|a| T::lit(a.cos())));
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(
        s: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        td: usize,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(s, &format!("{name}.norm1"), cin),
            conv1: Conv2d::same3(s, rng, &format!("{name}.conv1"), cin, cout),
            temb: Linear::new(s, rng, &format!("{name}.temb"), td, cout),
            norm2: GroupNorm::new(s, &format!("{name}.norm2"), cout),
            conv2: Conv2d::same3(s, rng, &format!("{name}.conv2"), cout, cout),
            skip: (cin != cout)
                .then(|| Conv2d::pointwise(s, rng, &format!("{name}.skip"), cin, cout)),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, temb: Var) -> Var {
        let mut h = self.norm1.forward(tape, p, x);
        h = tape.silu(h);
        h = self.conv1.forward(tape, p, h);
        let tv = self.temb.forward(tape, p, temb);
        h = tape.add_channel(h, tv);
        h = self.norm2.forward(tape, p, h);
        h = tape.silu(h);
        h = self.conv2.forward(tape, p, h);
        let skip = match &self.skip {
            Some(c) => c.forward(tape, p, x),
            None => x,
        };
        tape.add(skip, h)
    }
}

/// One injection site.
#[derive(Clone, Debug)]
struct Fuse {
    level: usize,
    slot: MaskId,
    channels: usize,
    embed_channels: usize,
    embed1: Conv2d,
    embed2: Conv2d,
    proj: Conv2d,
}

impl Fuse {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        s: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        level: usize,
        slot: MaskId,
        channels: usize,
        e: usize,
    ) -> Self {
        let embed1 = Conv2d::same3(s, rng, &format!("{name}.embed1"), slot.channels(), e);
        let embed2 = Conv2d::same3(s, rng, &format!("{name}.embed2"), e, e);
        let proj = Conv2d::pointwise(s, rng, &format!("{name}.proj"), channels + e, channels);
        // start the activation path of the projection near identity
        let w = s.get_mut(proj.weight).data_mut();
        for c in 0..channels {
            w[c * (channels + e) + c] = w[c * (channels + e) + c] + T::one();
        }
        Self {
            level,
            slot,
            channels,
            embed_channels: e,
            embed1,
            embed2,
            proj,
        }
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h: Var,
        cond: Option<&CondBatch<T>>,
    ) -> Var {
        let e = match cond {
            Some(c) => {
                let m = tape.constant(c.get(self.level, self.slot).clone());
                let e = self.embed1.forward(tape, p, m);
                let e = tape.silu(e);
                self.embed2.forward(tape, p, e)
            }
            None => {
                let (b, _, hh, ww) = tape.value(h).dims4();
                tape.constant(Tensor::zeros(&[b, self.embed_channels, hh, ww]))
            }
        };
        let cat = tape.concat(h, e);
        self.proj.forward(tape, p, cat)
    }

    /// Zero the projection columns that read the embedding.
    fn zero_injection<T: Real>(&self, s: &mut ParamStore<T>) {
        let cin = self.channels + self.embed_channels;
        let w = s.get_mut(self.proj.weight).data_mut();
        for co in 0..self.channels {
            for ci in self.channels..cin {
                w[co * cin + ci] = T::zero();
            }
        }
    }
}

#[derive(Clone, Debug)]
struct EncLevel {
    res: ResBlock,
    fuse: Fuse,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct DecLevel {
    res: ResBlock,
    fuse: Fuse,
    up: Option<Conv2d>,
}

/// Layer layout of the conditional U-Net; parameters are kept in a separate
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CondUNet {
    cfg: UNetConfig,
    latent_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    enc: Vec<EncLevel>,
    mid1: ResBlock,
    mid_fuse: Fuse,
    mid2: ResBlock,
    /// Deepest level first.
    dec: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl CondUNet {
    /// Deterministic initialization from `seed`.
    pub fn new<T: Real>(
        cfg: &UNetConfig,
        latent_channels: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self, UNetError> {
        cfg.validate()?;
        if latent_channels == 0 {
            return Err(UNetError::Config("latent_channels must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let s = store;
        let (l, td, e) = (cfg.levels, cfg.time_embed_dim, cfg.mask_embed_channels);
        let ch = |k: usize| cfg.channels(k);
        let time1 = Linear::new(s, r, "time.fc1", td, td);
        let time2 = Linear::new(s, r, "time.fc2", td, td);
        let conv_in = Conv2d::same3(s, r, "conv_in", latent_channels, ch(0));
        let enc = (0..l)
            .map(|k| {
                let cin = if k == 0 { ch(0) } else { ch(k - 1) };
                EncLevel {
                    res: ResBlock::new(s, r, &format!("enc{k}.res"), cin, ch(k), td),
                    fuse: Fuse::new(
                        s,
                        r,
                        &format!("enc{k}.fuse"),
                        k,
                        cfg.plan.encoder[k],
                        ch(k),
                        e,
                    ),
                    down: (k + 1 < l)
                        .then(|| Conv2d::new(s, r, &format!("enc{k}.down"), ch(k), ch(k), 3, 2, 1)),
                }
            })
            .collect();
        let deep = ch(l - 1);
        let mid1 = ResBlock::new(s, r, "mid.res1", deep, deep, td);
        let mid_fuse = Fuse::new(s, r, "mid.fuse", l - 1, cfg.plan.middle, deep, e);
        let mid2 = ResBlock::new(s, r, "mid.res2", deep, deep, td);
        let dec = (0..l)
            .rev()
            .enumerate()
            .map(|(j, k)| DecLevel {
                res: ResBlock::new(s, r, &format!("dec{k}.res"), 2 * ch(k), ch(k), td),
                fuse: Fuse::new(
                    s,
                    r,
                    &format!("dec{k}.fuse"),
                    k,
                    cfg.plan.decoder[j],
                    ch(k),
                    e,
                ),
                up: (k > 0).then(|| Conv2d::same3(s, r, &format!("dec{k}.up"), ch(k), ch(k - 1))),
            })
            .collect();
        let out_norm = GroupNorm::new(s, "out.norm", ch(0));
        let out_conv = Conv2d::same3(s, r, "out.conv", ch(0), latent_channels);
        Ok(Self {
            cfg: cfg.clone(),
            latent_channels,
            time1,
            time2,
            conv_in,
            enc,
            mid1,
            mid_fuse,
            mid2,
            dec,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn plan(&self) -> InjectionPlan {
        InjectionPlan {
            encoder: self.enc.iter().map(|l| l.fuse.slot).collect(),
            middle: self.mid_fuse.slot,
            decoder: self.dec.iter().map(|l| l.fuse.slot).collect(),
        }
    }

    /// Same weights, different mask routing. Each site keeps its embedder, so
    /// a new slot must have the same channel count as the old one.
    pub fn with_plan(&self, plan: &InjectionPlan) -> Result<Self, UNetError> {
        let l = self.cfg.levels;
        if plan.encoder.len() != l || plan.decoder.len() != l {
            return Err(UNetError::Config(format!(
                "plan has {}/{} slots, model has {l} levels",
                plan.encoder.len(),
                plan.decoder.len()
            )));
        }
        let mut out = self.clone();
        let retarget = |f: &mut Fuse, id: MaskId| {
            if f.slot.channels() != id.channels() {
                return Err(UNetError::Config(format!(
                    "site fed by '{}' cannot take '{id}' (channel count differs)",
                    f.slot
                )));
            }
            f.slot = id;
            Ok(())
        };
        for (lvl, &id) in out.enc.iter_mut().zip(&plan.encoder) {
            retarget(&mut lvl.fuse, id)?;
        }
        retarget(&mut out.mid_fuse, plan.middle)?;
        for (lvl, &id) in out.dec.iter_mut().zip(&plan.decoder) {
            retarget(&mut lvl.fuse, id)?;
        }
        out.cfg.plan = plan.clone();
        Ok(out)
    }

    fn sites(&self) -> impl Iterator<Item = &Fuse> {
        self.enc
            .iter()
            .map(|l| &l.fuse)
            .chain(std::iter::once(&self.mid_fuse))
            .chain(self.dec.iter().map(|l| &l.fuse))
    }

    /// Cut every site fed by `id` off from its mask.
    pub fn ablate<T: Real>(&self, store: &mut ParamStore<T>, id: MaskId) {
        for f in self.sites().filter(|f| f.slot == id) {
            f.zero_injection(store);
        }
    }

    /// Cut every site off from its mask.
    pub fn zero_all_injection<T: Real>(&self, store: &mut ParamStore<T>) {
        for f in self.sites() {
            f.zero_injection(store);
        }
    }

    /// Check `z` shape against the config.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), UNetError> {
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(UNetError::Shape(format!(
                "expected [B, {}, h, w] latents, got {shape:?}",
                self.latent_channels
            )));
        }
        let f = 1 << (self.cfg.levels - 1);
        if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
            return Err(UNetError::Shape(format!(
                "latent {}×{} not divisible by {f}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// ε prediction. `cond = None` runs the unconditional baseline (zero
    /// embeddings at every site).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z: Var,
        ts: &[usize],
        cond: Option<&CondBatch<T>>,
    ) -> Var {
        let temb = tape.constant(timestep_embedding(ts, self.cfg.time_embed_dim));
        let mut temb = self.time1.forward(tape, p, temb);
        temb = tape.silu(temb);
        temb = self.time2.forward(tape, p, temb);
        let temb = tape.silu(temb);

        let mut h = self.conv_in.forward(tape, p, z);
        let mut skips = Vec::with_capacity(self.enc.len());
        for lvl in &self.enc {
            h = lvl.res.forward(tape, p, h, temb);
            h = lvl.fuse.forward(tape, p, h, cond);
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(tape, p, h);
            }
        }
        h = self.mid1.forward(tape, p, h, temb);
        h = self.mid_fuse.forward(tape, p, h, cond);
        h = self.mid2.forward(tape, p, h, temb);
        for lvl in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip);
            h = lvl.res.forward(tape, p, h, temb);
            h = lvl.fuse.forward(tape, p, h, cond);
            if let Some(up) = &lvl.up {
                h = tape.upsample2(h);
                h = up.forward(tape, p, h);
            }
        }
        h = self.out_norm.forward(tape, p, h);
        h = tape.silu(h);
        self.out_conv.forward(tape, p, h)
    }

    /// Tape-free convenience for inference.
    pub fn predict(
        &self,
        params: &ParamStore<f32>,
        z: &Tensor<f32>,
        ts: &[usize],
        cond: Option<&CondBatch<f32>>,
    ) -> Result<Tensor<f32>, UNetError> {
        self.check_input(z.shape())?;
        if let Some(c) = cond {
            if c.batch_size() != z.shape()[0] || c.levels.len() != self.cfg.levels {
                return Err(UNetError::Shape(
                    "conditioning batch does not match latents".into(),
                ));
            }
            if c.levels[0][0].shape()[2..] != z.shape()[2..] {
                return Err(UNetError::Shape(format!(
                    "mask pyramid is {:?}, latent is {:?}",
                    &c.levels[0][0].shape()[2..],
                    &z.shape()[2..]
                )));
            }
        }
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, zv, ts, cond);
        Ok(tape.value(out).clone())
    }
}

/// SHA-256 over parameter names, shapes and values.
pub fn param_checksum(store: &ParamStore<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    crate::checkpoint::hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        ddpm_loss_with, make_schedule, standard_normal, NoiseDraw, ScheduleKind,
    };
    use crate::maskpipe::{split_channels, synth_mask, MaskSpec};
    use crate::testutil::grad_check;
    use proptest::prelude::*;

    fn bundle(size: usize, seed: u64) -> MaskBundle {
        split_channels(&synth_mask(&MaskSpec::new(size, 0.5, 0.25, 0.25), seed).unwrap())
    }

    fn setup(
        cfg: &UNetConfig,
        latent: usize,
        c: usize,
        b: usize,
        seed: u64,
    ) -> (CondUNet, ParamStore<f32>, Tensor<f32>, CondBatch<f32>) {
        let mut s = ParamStore::new();
        let net = CondUNet::new(cfg, c, &mut s, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let z = standard_normal(&[b, c, latent, latent], &mut rng);
        let pyr: Vec<CondPyramid> = (0..b)
            .map(|i| {
                CondPyramid::new(
                    &bundle(latent * 4, seed + i as u64),
                    latent,
                    latent,
                    cfg.levels,
                )
                .unwrap()
            })
            .collect();
        let cond = CondBatch::stack(&pyr.iter().collect::<Vec<_>>());
        (net, s, z, cond)
    }

    #[test]
    fn default_plan_mirrors_encoder() {
        let p = InjectionPlan::default();
        assert_eq!(p.encoder, [MaskId::Dark, MaskId::Clean, MaskId::Floats]);
        assert_eq!(p.middle, MaskId::All);
        assert_eq!(p.decoder, [MaskId::Floats, MaskId::Clean, MaskId::Dark]);
        let five = InjectionPlan::default_for(5);
        assert_eq!(five.encoder[3], MaskId::Dark);
        assert_eq!(five.encoder[4], MaskId::Clean);
        let rev: Vec<_> = five.encoder.iter().rev().copied().collect();
        assert_eq!(five.decoder, rev);
    }

    #[test]
    fn plan_serializes_as_letters() {
        let v = toml::to_string(&InjectionPlan::default()).unwrap();
        assert!(v.contains(r#"encoder = ["d", "c", "f"]"#), "{v}");
        assert!(v.contains(r#"middle = "a""#));
        let back: InjectionPlan = toml::from_str(&v).unwrap();
        assert_eq!(back, InjectionPlan::default());
    }

    #[test]
    fn plan_length_mismatch_is_a_config_error() {
        let mut cfg = UNetConfig::default();
        cfg.plan.encoder.pop();
        let mut s = ParamStore::<f32>::new();
        let err = CondUNet::new(&cfg, 4, &mut s, 0).unwrap_err();
        assert!(err.to_string().contains("plan.encoder"));
    }

    #[test]
    fn same_seed_same_checksum() {
        let build = |seed| {
            let mut s = ParamStore::<f32>::new();
            CondUNet::new(&UNetConfig::default(), 4, &mut s, seed).unwrap();
            param_checksum(&s)
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    /// Architecture walk-through with levels 2, base 8, mults [1, 2],
    /// time dim 16, embed 4, latent channels 2.
    #[test]
    fn tiny_parameter_count_matches_closed_form() {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let lin = |i: usize, o: usize| o * i + o;
        let gn = |c: usize| 2 * c;
        let (td, e, lc) = (16, 4, 2);
        let res = |ci: usize, co: usize| {
            gn(ci)
                + conv(ci, co, 3)
                + lin(td, co)
                + gn(co)
                + conv(co, co, 3)
                + if ci != co { conv(ci, co, 1) } else { 0 }
        };
        let fuse = |mc: usize, c: usize| conv(mc, e, 3) + conv(e, e, 3) + conv(c + e, c, 1);
        let expected = 2 * lin(td, td)
            + conv(lc, 8, 3)
            // encoder level 0 (d), level 1 (c)
            + res(8, 8) + fuse(1, 8) + conv(8, 8, 3)
            + res(8, 16) + fuse(1, 16)
            // middle (a: 4 channels)
            + res(16, 16) + fuse(4, 16) + res(16, 16)
            // decoder level 1 (c), level 0 (d)
            + res(32, 16) + fuse(1, 16) + conv(16, 8, 3)
            + res(16, 8) + fuse(1, 8)
            + gn(8) + conv(8, lc, 3);
        let mut s = ParamStore::<f32>::new();
        CondUNet::new(&UNetConfig::tiny(2, 8), lc, &mut s, 0).unwrap();
        assert_eq!(s.num_scalars(), expected);
    }

    #[test]
    fn output_shape_matches_input() {
        for (levels, latent) in [(1, 4), (2, 8), (3, 8), (4, 16)] {
            let cfg = UNetConfig::tiny(levels, 8);
            let (net, s, z, cond) = setup(&cfg, latent, 3, 2, 1);
            let out = net.predict(&s, &z, &[5, 9], Some(&cond)).unwrap();
            assert_eq!(out.shape(), z.shape());
        }
    }

    #[test]
    fn bad_latent_shapes_are_rejected() {
        let cfg = UNetConfig::tiny(3, 8);
        let (net, s, _, _) = setup(&cfg, 8, 2, 1, 0);
        assert!(net
            .predict(&s, &Tensor::zeros(&[1, 2, 6, 6]), &[1], None)
            .is_err());
        assert!(net
            .predict(&s, &Tensor::zeros(&[1, 3, 8, 8]), &[1], None)
            .is_err());
    }

    #[test]
    fn zeroed_injection_equals_unconditional_baseline() {
        let cfg = UNetConfig::tiny(3, 8);
        let (net, mut s, z, cond) = setup(&cfg, 8, 2, 2, 4);
        net.zero_all_injection(&mut s);
        let pyr = CondPyramid::new(&bundle(32, 1), 8, 8, 3)
            .unwrap()
            .zeros_like();
        let zero = CondBatch::stack(&[&pyr, &pyr]);
        let base = net.predict(&s, &z, &[3, 3], None).unwrap();
        assert_eq!(net.predict(&s, &z, &[3, 3], Some(&zero)).unwrap(), base);
        assert_eq!(net.predict(&s, &z, &[3, 3], Some(&cond)).unwrap(), base);
    }

    #[test]
    fn floats_probe_and_ablation() {
        let cfg = UNetConfig::tiny(3, 8);
        let (net, mut s, z, cond) = setup(&cfg, 8, 2, 1, 6);
        let mut perturbed = cond.clone();
        for lvl in &mut perturbed.levels {
            let t = &mut lvl[MaskId::Floats.index()];
            *t = t.map(|v| 1.0 - v);
        }
        let a = net.predict(&s, &z, &[7], Some(&cond)).unwrap();
        let b = net.predict(&s, &z, &[7], Some(&perturbed)).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() > 0.0);
        net.ablate(&mut s, MaskId::Floats);
        let a = net.predict(&s, &z, &[7], Some(&cond)).unwrap();
        let b = net.predict(&s, &z, &[7], Some(&perturbed)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_order_changes_output() {
        let cfg = UNetConfig::tiny(3, 8);
        let (net, s, z, cond) = setup(&cfg, 8, 2, 1, 8);
        let perm = net
            .with_plan(
                &cfg.plan
                    .with_encoder(vec![MaskId::Floats, MaskId::Clean, MaskId::Dark]),
            )
            .unwrap();
        let a = net.predict(&s, &z, &[20], Some(&cond)).unwrap();
        let b = perm.predict(&s, &z, &[20], Some(&cond)).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() > 1e-6);
        assert!(net
            .with_plan(
                &cfg.plan
                    .with_encoder(vec![MaskId::All, MaskId::Clean, MaskId::Dark])
            )
            .is_err());
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = UNetConfig::tiny(2, 8);
        let (net, s, z, cond) = setup(&cfg, 8, 2, 1, 10);
        let a = net.predict(&s, &z, &[1], Some(&cond)).unwrap();
        let b = net.predict(&s, &z, &[500], Some(&cond)).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() > 0.0);
    }

    #[test]
    fn pooling_examples() {
        let ones = Tensor::full(&[1, 16, 16], 1.0f32);
        for r in [8, 4, 2, 1] {
            assert!(downsample_mask(&ones, r, r)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 1.0));
        }
        let block = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
        assert_eq!(downsample_mask(&block, 1, 1).unwrap().data(), &[0.5]);
        assert!(downsample_mask(&ones, 3, 3).is_err());
    }

    #[test]
    fn full_map_pools_to_class_fractions() {
        let b = bundle(64, 3);
        let p = CondPyramid::new(&b, 16, 16, 3).unwrap();
        let all = &p.levels[0][MaskId::All.index()];
        assert_eq!(all.shape(), &[4, 16, 16]);
        // channel sums are 1 everywhere
        for i in 0..256 {
            let s: f32 = (0..4).map(|c| all.data()[c * 256 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let hist = b.y_a.histogram();
        for (c, &count) in hist.iter().enumerate() {
            let m: f64 = all.data()[c * 256..(c + 1) * 256]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / 256.0;
            assert!((m - count as f64 / 4096.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn pooling_preserves_the_mean(bits in proptest::collection::vec(0u8..2, 256), r in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
            let t = Tensor::from_vec(&[1, 16, 16], bits.iter().map(|&b| b as f32).collect());
            let p = downsample_mask(&t, r, r).unwrap();
            let m0 = bits.iter().map(|&b| b as f64).sum::<f64>() / 256.0;
            let m1 = p.data().iter().map(|&v| v as f64).sum::<f64>() / (r * r) as f64;
            prop_assert!((m0 - m1).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = UNetConfig::tiny(2, 8);
        let mut s = ParamStore::<f64>::new();
        let net = CondUNet::new(&cfg, 2, &mut s, 12).unwrap();
        let sched = make_schedule(100, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z0: Tensor<f64> = standard_normal(&[2, 2, 8, 8], &mut rng).cast();
        let draw = NoiseDraw::sample(z0.shape(), &sched, &mut rng);
        let pyr: Vec<_> = (0..2)
            .map(|i| CondPyramid::new(&bundle(32, i), 8, 8, 2).unwrap())
            .collect();
        let cond = CondBatch::<f64>::stack(&pyr.iter().collect::<Vec<_>>());
        let worst = grad_check(&s, 200, 14, |tape, p| {
            ddpm_loss_with(tape, &z0, &draw, &sched, |tape, zt, ts| {
                net.forward(tape, p, zt, ts, Some(&cond))
            })
            .unwrap()
        });
        assert!(worst < 1e-3, "max relative error {worst}");
    }
}
