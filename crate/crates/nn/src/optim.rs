use crate::{ParamStore, Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: T) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let sq: T = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + T::lit(1e-12));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// `ema ← decay·ema + (1 − decay)·params`
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: T) {
    assert_eq!(ema.len(), params.len(), "EMA layout mismatch");
    let keep = T::one() - decay;
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + keep * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = Adam::new(&p, 0.1);
        opt.update(&mut p, &[Tensor::from_vec(&[2], vec![3.0, -0.5])]);
        let w = p.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::from_vec(&[1], vec![5.0]));
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let w = p.tensors()[0].data()[0];
            opt.update(&mut p, &[Tensor::from_vec(&[1], vec![2.0 * (w - 2.0)])]);
        }
        assert!((p.tensors()[0].data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Tensor::from_vec(&[1], vec![3.0f64]),
            Tensor::from_vec(&[1], vec![4.0]),
        ];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after: f64 = g.iter().map(|t| t.data()[0].powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
        let mut small = vec![Tensor::from_vec(&[1], vec![0.5f64])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn ema_with_zero_decay_copies_params() {
        let mut e = ParamStore::<f32>::new();
        e.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        let mut p = ParamStore::<f32>::new();
        p.add("w", Tensor::from_vec(&[2], vec![1.5, -2.0]));
        ema_update(&mut e, &p, 0.0);
        assert_eq!(e, p);
    }
}
