//! DDPM noise schedule, forward corruption, ε-prediction loss and the
//! ancestral reverse sampler.

use capsule_nn::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("bad schedule range: {0}")]
    BadRange(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// β, α and ᾱ over timesteps `1..=T`, stored 0-based. `model_t[i]` is the
/// timestep passed to the network at step `i + 1` (differs from `i + 1` only
/// for respaced schedules).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    model_t: Vec<usize>,
}

/// Linear β schedule with `t_max` steps.
pub fn make_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::BadRange("T must be ≥ 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadRange(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if t_max == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Arbitrary β sequence; β = 0 is allowed so identity limits can be tested.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::BadRange("T must be ≥ 1".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(DiffusionError::BadRange(format!("beta {b} outside [0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        // cumulative product in log space: ln ᾱ_t = Σ ln(1 − β_s)
        let mut log_acc = 0.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                log_acc += (-b).ln_1p();
                log_acc.exp()
            })
            .collect();
        let model_t = (1..=beta.len()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            model_t,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn idx(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Network timestep for step `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_t[t - 1]
    }

    /// ᾱ_t / (1 − ᾱ_t)
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// Sub-schedule visiting `steps` evenly spaced original timesteps (always
    /// including T). β is re-derived so the kept ᾱ values are unchanged.
    pub fn respaced(&self, steps: usize) -> Result<Self, DiffusionError> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(DiffusionError::BadRange(format!(
                "steps must be in 1..={t_max}, got {steps}"
            )));
        }
        if steps == t_max {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * t_max as f64 / steps as f64).round() as usize).clamp(1, t_max))
            .collect();
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(steps);
        for &t in &kept {
            let ab = self.alpha_bar(t);
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut s = Self::from_betas(beta)?;
        s.alpha_bar = kept.iter().map(|&t| self.alpha_bar(t)).collect();
        s.model_t = kept.iter().map(|&t| self.model_timestep(t)).collect();
        Ok(s)
    }
}

/// Timesteps and standard-normal noise for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
}

impl NoiseDraw {
    /// `t` uniform on `1..=T` per batch item, ε ~ N(0, I) shaped `shape`.
    pub fn sample(shape: &[usize], sched: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let t = (0..shape[0])
            .map(|_| rng.random_range(1..=sched.len()))
            .collect();
        Self {
            t,
            eps: standard_normal(shape, rng),
        }
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps` with one timestep for the whole tensor.
pub fn q_sample<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    let b = z0.shape()[0];
    q_sample_batch(z0, &vec![t; b], eps, sched)
}

/// Per-item timesteps: `ts[i]` applies to batch item `i`.
pub fn q_sample_batch<T: Real>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    if z0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(
            z0.shape().to_vec(),
            eps.shape().to_vec(),
        ));
    }
    let b = z0.shape()[0];
    assert_eq!(ts.len(), b, "one timestep per batch item");
    let per = z0.numel() / b.max(1);
    let mut out = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar[sched.idx(t)?];
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let range = i * per..(i + 1) * per;
        for (o, &e) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&eps.data()[range])
        {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// L_DM on a tape: `mean((eps − model(z_t, t))²)`. The model closure receives
/// the noisy latent as a constant input and the per-item network timesteps.
pub fn ddpm_loss_with<T: Real>(
    tape: &mut Tape<T>,
    z0: &Tensor<T>,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    model: impl FnOnce(&mut Tape<T>, Var, &[usize]) -> Var,
) -> Result<Var, DiffusionError> {
    let eps: Tensor<T> = draw.eps.cast();
    let zt = q_sample_batch(z0, &draw.t, &eps, sched)?;
    let zt = tape.constant(zt);
    let mt: Vec<usize> = draw.t.iter().map(|&t| sched.model_timestep(t)).collect();
    let eps_hat = model(tape, zt, &mt);
    if tape.shape(eps_hat) != eps.shape() {
        return Err(DiffusionError::Shape(
            tape.shape(eps_hat).to_vec(),
            eps.shape().to_vec(),
        ));
    }
    Ok(tape.mse(eps_hat, eps))
}

/// Draws `(t, ε)` from `rng` and evaluates L_DM for a plain forward function.
pub fn ddpm_loss(
    model: impl Fn(&Tensor<f32>, &[usize]) -> Tensor<f32>,
    z0: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64, DiffusionError> {
    let draw = NoiseDraw::sample(z0.shape(), sched, rng);
    let mut tape = Tape::inference();
    let loss = ddpm_loss_with(&mut tape, z0, &draw, sched, |tape, zt, ts| {
        let out = model(tape.value(zt), ts);
        tape.constant(out)
    })?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Noise for step `t` of batch item with seed `seed`: stream `t` of a
/// ChaCha8 generator keyed by the seed. Stream 0 is the initial `z_T`.
pub fn step_noise(seed: u64, t: usize, shape: &[usize]) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn per_item_noise(seeds: &[u64], t: usize, shape: &[usize]) -> Tensor<f32> {
    let item: Vec<usize> = shape[1..].to_vec();
    let data = seeds
        .iter()
        .flat_map(|&s| step_noise(s, t, &item))
        .collect();
    Tensor::from_vec(shape, data)
}

/// One ancestral step `z_t → z_{t−1}`. `seeds[i]` keys the noise of batch
/// item `i`; no noise is added at `t = 1`.
pub fn p_sample_step(
    model: &mut impl FnMut(&Tensor<f32>, usize) -> Tensor<f32>,
    z_t: &Tensor<f32>,
    t: usize,
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor<f32>, DiffusionError> {
    let i = sched.idx(t)?;
    let eps_hat = model(z_t, sched.model_t[i]);
    if eps_hat.shape() != z_t.shape() {
        return Err(DiffusionError::Shape(
            eps_hat.shape().to_vec(),
            z_t.shape().to_vec(),
        ));
    }
    let (beta, alpha, ab) = (sched.beta[i], sched.alpha[i], sched.alpha_bar[i]);
    let inv_sqrt_a = 1.0 / alpha.sqrt();
    let coef = if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - ab).sqrt()
    };
    let mut out = z_t.zip_map(&eps_hat, |z, e| {
        (inv_sqrt_a * (z as f64 - coef * e as f64)) as f32
    });
    if t > 1 {
        let sigma = beta.sqrt() as f32;
        let noise = per_item_noise(seeds, t, z_t.shape());
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// Full reverse chain from `z_T ~ N(0, I)`; item `i` is driven entirely by
/// `seeds[i]` so results do not depend on step order or batch neighbours'
/// noise.
pub fn sample_loop(
    model: &mut impl FnMut(&Tensor<f32>, usize) -> Tensor<f32>,
    sched: &NoiseSchedule,
    seeds: &[u64],
    item_shape: &[usize],
) -> Result<Tensor<f32>, DiffusionError> {
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(item_shape);
    let mut z = per_item_noise(seeds, 0, &shape);
    for t in (1..=sched.len()).rev() {
        z = p_sample_step(model, &z, t, sched, seeds)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = make_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn alpha_bar_matches_product_loop() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-10);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        assert!((1..1000).all(|t| s.snr(t + 1) < s.snr(t)));
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let bad = |r: Result<NoiseSchedule, DiffusionError>| {
            matches!(r, Err(DiffusionError::BadRange(_)))
        };
        assert!(bad(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear)));
        assert!(bad(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear)));
        assert!(bad(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear)));
        assert!(bad(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear)));
    }

    #[test]
    fn q_sample_limits() {
        let z0 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, -2.0, 0.5, 3.0]);
        let eps = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3, 0.1, -0.7, 2.0]);
        let id = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        assert_eq!(q_sample(&z0, 2, &eps, &id).unwrap(), z0);
        let s = make_schedule(10, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        let out = q_sample(&z0, 4, &zero, &s).unwrap();
        let a = s.alpha_bar(4).sqrt();
        for (o, z) in out.data().iter().zip(z0.data()) {
            assert!((o - a * z).abs() < 1e-15);
        }
        assert_eq!(
            q_sample(&z0, 11, &eps, &s),
            Err(DiffusionError::TimestepOutOfRange { t: 11, max: 10 })
        );
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
    }

    #[test]
    fn forward_marginal_moments() {
        // one step with β = 0.75 gives ᾱ = 0.25
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let z0 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, -0.5, 2.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let eps = standard_normal(&[1, 1, 2, 2], &mut rng);
            let z = q_sample(&z0, 1, &eps, &s).unwrap();
            for (k, &v) in z.data().iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64).powi(2);
            }
        }
        for k in 0..4 {
            let m = sum[k] / n as f64;
            let sd = (sq[k] / n as f64 - m * m).sqrt();
            assert!((m - 0.5 * z0.data()[k] as f64).abs() < 0.03, "mean {m}");
            assert!((sd / 0.75f64.sqrt() - 1.0).abs() < 0.02, "std {sd}");
        }
    }

    #[test]
    fn composed_single_steps_match_marginal() {
        let s = make_schedule(5, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = 1.5f64;
        let n = 20_000;
        let (mut m, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let mut z = z0;
            for t in 1..=5 {
                let e: f64 = rng.sample(StandardNormal);
                z = s.alpha(t).sqrt() * z + s.beta(t).sqrt() * e;
            }
            m += z;
            m2 += z * z;
        }
        m /= n as f64;
        let var = m2 / n as f64 - m * m;
        let ab = s.alpha_bar(5);
        assert!((m - ab.sqrt() * z0).abs() < 0.02);
        assert!((var - (1.0 - ab)).abs() < 0.02);
    }

    #[test]
    fn perfect_and_zero_denoisers() {
        let s = make_schedule(50, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let z0 = Tensor::full(&[64, 4, 4, 4], 0.3f32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = NoiseDraw::sample(z0.shape(), &s, &mut rng);
        assert!(draw.t.iter().all(|&t| (1..=50).contains(&t)));
        let mut tape = Tape::inference();
        let eps = draw.eps.clone();
        let l = ddpm_loss_with(&mut tape, &z0, &draw, &s, |tape, _, _| tape.constant(eps)).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let zero = ddpm_loss(|z, _| Tensor::zeros(z.shape()), &z0, &s, &mut rng).unwrap();
        assert!((zero - 1.0).abs() < 0.05, "{zero}");
        let any = ddpm_loss(|z, _| z.map(|v| v * 3.0), &z0, &s, &mut rng).unwrap();
        assert!(any >= 0.0);
    }

    #[test]
    fn last_step_is_deterministic_mean() {
        let s = NoiseSchedule::from_betas(vec![0.2]).unwrap();
        let z = Tensor::from_vec(&[1, 1, 1, 1], vec![0.9f32]);
        let mut model = |_: &Tensor<f32>, _| Tensor::from_vec(&[1, 1, 1, 1], vec![0.4f32]);
        let a = p_sample_step(&mut model, &z, 1, &s, &[1]).unwrap();
        let b = p_sample_step(&mut model, &z, 1, &s, &[2]).unwrap();
        assert_eq!(a, b);
        // μ = (0.9 − 0.2/sqrt(0.2)·0.4)/sqrt(0.8)
        let mu = (0.9 - 0.2 / 0.2f64.sqrt() * 0.4) / 0.8f64.sqrt();
        assert!((a.data()[0] as f64 - mu).abs() < 1e-6);
    }

    #[test]
    fn vanishing_beta_rescales_by_alpha() {
        let s = NoiseSchedule::from_betas(vec![1e-12, 1e-12]).unwrap();
        let z = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0f32, -3.0]);
        let mut model = |z: &Tensor<f32>, _| Tensor::zeros(z.shape());
        let out = p_sample_step(&mut model, &z, 2, &s, &[4]).unwrap();
        for (o, v) in out.data().iter().zip(z.data()) {
            assert!((o - v / (1.0f32 - 1e-12).sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn sampling_is_seeded_and_finite() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut model = |z: &Tensor<f32>, t: usize| z.map(|v| v * 0.1 + (t as f32 * 1e-3).sin());
        let a = sample_loop(&mut model, &s, &[3, 4], &[2, 4, 4]).unwrap();
        let b = sample_loop(&mut model, &s, &[3, 4], &[2, 4, 4]).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let c = sample_loop(&mut model, &s, &[5, 4], &[2, 4, 4]).unwrap();
        assert!(
            a.batch_item(0)
                .zip_map(&c.batch_item(0), |x, y| x - y)
                .max_abs()
                > 0.0
        );
        assert_eq!(a.batch_item(1), c.batch_item(1));
    }

    #[test]
    fn respacing_keeps_alpha_bar_and_timesteps() {
        let s = make_schedule(200, 5e-4, 0.1, ScheduleKind::Linear).unwrap();
        let r = s.respaced(50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.model_timestep(50), 200);
        assert_eq!(r.model_timestep(1), 4);
        assert_eq!(r.alpha_bar(50), s.alpha_bar(200));
        assert!((r.alpha_bar(10) - s.alpha_bar(40)).abs() < 1e-12);
        let prod: f64 = (1..=10).map(|t| r.alpha(t)).product();
        assert!((prod - r.alpha_bar(10)).abs() < 1e-12);
        assert_eq!(s.respaced(200).unwrap(), s);
        assert!(s.respaced(0).is_err());
    }
}
