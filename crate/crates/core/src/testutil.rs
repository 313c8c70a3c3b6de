//! Shared test oracles.

use capsule_nn::{Bound, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference check of `loss` w.r.t. `n` randomly chosen scalar
/// parameters. Returns the worst `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    store: &ParamStore<f64>,
    n: usize,
    seed: u64,
    loss: impl Fn(&mut Tape<f64>, &Bound) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = loss(&mut tape, &p);
    let mut g = tape.backward(l);
    let analytic = p.grads(&tape, &mut g);

    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::inference();
        let p = s.bind(&mut tape);
        let l = loss(&mut tape, &p);
        tape.value(l).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let total = store.num_scalars();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for _ in 0..n {
        // uniform over scalars, not over tensors
        let mut k = rng.random_range(0..total);
        let mut id = ids[0];
        for &i in &ids {
            let len = store.get(i).numel();
            if k < len {
                id = i;
                break;
            }
            k -= len;
        }
        let orig = store.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + h;
        let up = eval(&probe);
        probe.get_mut(id).data_mut()[k] = orig - h;
        let down = eval(&probe);
        probe.get_mut(id).data_mut()[k] = orig;
        let num = (up - down) / (2.0 * h);
        let a = analytic[id.index()].data()[k];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Mean of the `window` values ending at index `at` (inclusive).
pub fn smoothed(xs: &[f32], window: usize, at: usize) -> f32 {
    let lo = (at + 1).saturating_sub(window);
    xs[lo..=at].iter().sum::<f32>() / (at + 1 - lo) as f32
}
