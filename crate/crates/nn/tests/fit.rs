use capsule_nn::{clip_global_norm, Adam, Conv2d, GroupNorm, ParamStore, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Net {
    c1: Conv2d,
    gn: GroupNorm,
    c2: Conv2d,
}

fn build<T: Real>(store: &mut ParamStore<T>, seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Net {
        c1: Conv2d::same3(store, &mut rng, "c1", 1, 8),
        gn: GroupNorm::new(store, "gn", 8),
        c2: Conv2d::same3(store, &mut rng, "c2", 8, 1),
    }
}

fn loss<T: Real>(
    net: &Net,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> (capsule_nn::Bound, capsule_nn::Var) {
    let p = store.bind(tape);
    let x = tape.constant(x.clone());
    let h = net.c1.forward(tape, &p, x);
    let h = net.gn.forward(tape, &p, h);
    let h = tape.silu(h);
    let out = net.c2.forward(tape, &p, h);
    let l = tape.mse(out, y.clone());
    (p, l)
}

// target: a horizontal box blur of the input
fn data(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s) = (4, 8);
    let x: Vec<f32> = (0..b * s * s)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
        .collect();
    let mut y = vec![0.0; x.len()];
    for i in 0..b * s {
        for c in 0..s {
            let row = &x[i * s..(i + 1) * s];
            let l = if c > 0 { row[c - 1] } else { 0.0 };
            let r = if c + 1 < s { row[c + 1] } else { 0.0 };
            y[i * s + c] = (l + row[c] + r) / 3.0;
        }
    }
    (
        Tensor::from_vec(&[b, 1, s, s], x),
        Tensor::from_vec(&[b, 1, s, s], y),
    )
}

#[test]
fn adam_fits_a_blur() {
    let (x, y) = data(1);
    let mut store = ParamStore::<f32>::new();
    let net = build(&mut store, 2);
    let mut opt = Adam::new(&store, 1e-2);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..300 {
        let mut tape = Tape::new();
        let (p, l) = loss(&net, &store, &mut tape, &x, &y);
        last = tape.value(l).data()[0];
        first.get_or_insert(last);
        let mut g = tape.backward(l);
        let mut grads = p.grads(&tape, &mut g);
        clip_global_norm(&mut grads, 1.0);
        opt.update(&mut store, &grads);
    }
    let first = first.unwrap();
    assert!(last < first * 0.1, "loss {first} -> {last}");
}

#[test]
fn f32_and_f64_agree_on_forward() {
    let (x, y) = data(3);
    let mut s32 = ParamStore::<f32>::new();
    let net = build(&mut s32, 4);
    let s64: ParamStore<f64> = s32.cast();
    let mut t32 = Tape::new();
    let (_, l32) = loss(&net, &s32, &mut t32, &x, &y);
    let mut t64 = Tape::new();
    let (_, l64) = loss(&net, &s64, &mut t64, &x.cast(), &y.cast());
    let a = t32.value(l32).data()[0] as f64;
    let b = t64.value(l64).data()[0];
    assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn inference_tape_matches_training_tape() {
    let (x, y) = data(5);
    let mut store = ParamStore::<f32>::new();
    let net = build(&mut store, 6);
    let mut a = Tape::new();
    let (_, la) = loss(&net, &store, &mut a, &x, &y);
    let mut b = Tape::inference();
    let (_, lb) = loss(&net, &store, &mut b, &x, &y);
    assert_eq!(a.value(la).data(), b.value(lb).data());
}
