use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_contrast::nn::*;

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Compares the tape gradient of `f` at `x` with central differences.
fn check_primitive<F: Real>(shape: &[usize], x: Vec<f64>, h: f64, tol: f64, f: impl Fn(&mut Tape<F>, Var) -> Var) {
    let xf: Vec<F> = x.iter().map(|&v| F::of(v)).collect();
    let mut t = Tape::<F>::new();
    let v = t.variable(shape, xf.clone()).unwrap();
    let out = f(&mut t, v);
    let grads = t.backward(out).unwrap();
    let analytic: Vec<f64> = grads.get(v).unwrap().iter().map(|g| g.as_f64()).collect();
    let eval = |xs: Vec<F>| {
        let mut t = Tape::<F>::new();
        let v = t.variable(shape, xs).unwrap();
        let out = f(&mut t, v);
        t.value(out)[0].as_f64()
    };
    let mut diff = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = xf.clone();
        let mut m = xf.clone();
        p[i] += F::of(h);
        m[i] -= F::of(h);
        let num = (eval(p) - eval(m)) / (2.0 * h);
        diff += (num - analytic[i]).powi(2);
        scale = scale.max(num.abs()).max(analytic[i].abs());
    }
    let rel = diff.sqrt() / (scale * (x.len() as f64).sqrt()).max(1e-12);
    assert!(rel < tol, "relative error {rel:e}");
}

/// A fixed random projection to a scalar so every output element matters.
fn project<F: Real>(t: &mut Tape<F>, v: Var, seed: u64) -> Var {
    let n = t.value(v).len();
    let w: Vec<F> = rand_vec(n, seed).into_iter().map(F::of).collect();
    let shape = t.shape(v).to_vec();
    let wv = t.constant(&shape, w).unwrap();
    let p = t.mul(v, wv).unwrap();
    t.sum(p)
}

fn primitive_suite<F: Real>(h: f64, tol: f64) {
    let k = rand_vec(3 * 2 * 2 * 3, 1);
    let bias = rand_vec(3, 2);
    let conv = |pad: Padding| {
        let (k, bias) = (k.clone(), bias.clone());
        move |t: &mut Tape<F>, x: Var| {
            let kv = t.constant(&[3, 2, 2, 3], k.iter().map(|&v| F::of(v)).collect()).unwrap();
            let bv = t.constant(&[3], bias.iter().map(|&v| F::of(v)).collect()).unwrap();
            let y = t.conv2d(x, kv, Some(bv), pad).unwrap();
            project(t, y, 3)
        }
    };
    check_primitive::<F>(&[2, 2, 4, 7], rand_vec(112, 4), h, tol, conv(Padding::Valid));
    check_primitive::<F>(&[2, 2, 4, 7], rand_vec(112, 5), h, tol, conv(Padding::Same));
    // Gradient with respect to the kernel.
    let x = rand_vec(2 * 2 * 4 * 7, 6);
    check_primitive::<F>(&[3, 2, 2, 3], rand_vec(36, 7), h, tol, move |t, k| {
        let xv = t.constant(&[2, 2, 4, 7], x.iter().map(|&v| F::of(v)).collect()).unwrap();
        let y = t.conv2d(xv, k, None, Padding::Same).unwrap();
        project(t, y, 8)
    });
    check_primitive::<F>(&[2, 3, 4, 9], rand_vec(216, 9), h, tol, |t, x| {
        let y = t.maxpool2d(x, 2, 4).unwrap();
        project(t, y, 10)
    });
    check_primitive::<F>(&[2, 3, 4], rand_vec(24, 11), h, tol, |t, x| {
        let y = t.permute(x, &[2, 0, 1]).unwrap();
        project(t, y, 12)
    });
    check_primitive::<F>(&[3, 5], rand_vec(15, 13), h, tol, |t, x| {
        let w = t.constant(&[5, 2], rand_vec(10, 14).into_iter().map(F::of).collect()).unwrap();
        let b = t.constant(&[2], vec![F::of(0.1), F::of(-0.2)]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        project(t, y, 15)
    });
    check_primitive::<F>(&[4, 3], rand_vec(12, 16), h, tol, |t, x| {
        let r = t.relu(x);
        let a = t.abs(r);
        let g = t.gather_rows(a, &[3, 0, 0, 2]).unwrap();
        let c = t.concat(g, g).unwrap();
        project(t, c, 17)
    });
    check_primitive::<F>(&[2, 5], rand_vec(10, 18), h, tol, |t, x| {
        let u = t.upsample_last(x, 3).unwrap();
        let r = t.resize_last(u, 11).unwrap();
        let r = t.resize_last(r, 20).unwrap();
        project(t, r, 19)
    });
    check_primitive::<F>(&[4], rand_vec(4, 20), h, tol, |t, x| {
        let s = t.scale(x, F::of(3.0));
        t.binary_logistic_loss(s, &[F::one(), -F::one(), F::one(), -F::one()]).unwrap()
    });
    check_primitive::<F>(&[3, 4], rand_vec(12, 21), h, tol, |t, x| {
        t.weighted_cross_entropy(x, &[0, 3, 1], &[1.0, 2.0, 0.5, 3.0].map(F::of)).unwrap()
    });
    check_primitive::<F>(&[6], rand_vec(6, 22), h, tol, |t, x| t.mse(x, &[0.5; 6].map(F::of)).unwrap());
}

#[test]
fn primitive_gradients_f64() {
    primitive_suite::<f64>(1e-5, 1e-6);
}

#[test]
fn primitive_gradients_f32() {
    primitive_suite::<f32>(1e-3, 1e-3);
}

fn conv(x: &[f64], k: &[f64], xs: &[usize], ks: &[usize]) -> Vec<f64> {
    let mut t = Tape::<f64>::new();
    let xv = t.constant(xs, x.to_vec()).unwrap();
    let kv = t.constant(ks, k.to_vec()).unwrap();
    let y = t.conv2d(xv, kv, None, Padding::Same).unwrap();
    t.value(y).to_vec()
}

#[test]
fn conv_identity_kernel() {
    let x = rand_vec(2 * 3 * 5 * 6, 30);
    let mut k = vec![0.0; 3 * 3];
    for c in 0..3 {
        k[c * 3 + c] = 1.0;
    }
    assert_eq!(conv(&x, &k, &[2, 3, 5, 6], &[3, 3, 1, 1]), x);
}

proptest! {
    #[test]
    fn conv_is_bilinear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let xs = [2, 2, 3, 8];
        let ks = [3, 2, 2, 3];
        let x1 = rand_vec(96, seed);
        let x2 = rand_vec(96, seed ^ 1);
        let k1 = rand_vec(36, seed ^ 2);
        let k2 = rand_vec(36, seed ^ 3);
        let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
        let lhs = conv(&mix(&x1, &x2), &k1, &xs, &ks);
        let rhs = mix(&conv(&x1, &k1, &xs, &ks), &conv(&x2, &k1, &xs, &ks));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-12);
        }
        let lhs = conv(&x1, &mix(&k1, &k2), &xs, &ks);
        let rhs = mix(&conv(&x1, &k1, &xs, &ks), &conv(&x1, &k2, &xs, &ks));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_loss_sign_symmetry(s in -1e3..1e3f64, positive in any::<bool>()) {
        let y = if positive { 1.0 } else { -1.0 };
        let mut t = Tape::<f64>::new();
        let a = t.constant(&[1], vec![s]).unwrap();
        let b = t.constant(&[1], vec![-s]).unwrap();
        let la = t.binary_logistic_loss(a, &[y]).unwrap();
        let lb = t.binary_logistic_loss(b, &[-y]).unwrap();
        prop_assert_eq!(t.value(la)[0].to_bits(), t.value(lb)[0].to_bits());
        prop_assert!(t.value(la)[0].is_finite());
    }

    #[test]
    fn adam_first_step_ignores_gradient_scale(g in prop::collection::vec(0.01..10.0f64, 1..8), neg in any::<bool>()) {
        let step = |scale: f64| {
            let mut ps = ParamSet::<f64>::new();
            let mut t = Tensor::new(&[g.len()], vec![0.0; g.len()]).unwrap().requiring_grad();
            let gs: Vec<f64> = g.iter().map(|v| if neg { -v * scale } else { v * scale }).collect();
            t.accumulate_grad(&gs).unwrap();
            ps.insert("w", t);
            let mut adam = Adam::new(AdamConfig::default());
            adam.step(&mut ps).unwrap();
            ps.get("w").unwrap().data().to_vec()
        };
        let one = step(1.0);
        let two = step(2.0);
        for (a, b) in one.iter().zip(&two) {
            prop_assert!(((a - b) / a).abs() < 1e-6);
        }
    }
}

#[test]
fn logistic_loss_values() {
    let cases = [(0.0, 1.0, std::f64::consts::LN_2), (2.0, 1.0, 0.126928), (1000.0, -1.0, 1000.0)];
    for (score, y, expected) in cases {
        let mut t = Tape::<f64>::new();
        let s = t.constant(&[1], vec![score]).unwrap();
        let l = t.binary_logistic_loss(s, &[y]).unwrap();
        assert!((t.value(l)[0] - expected).abs() < 1e-6, "{score}");
    }
}

#[test]
fn adam_drives_quadratic_down() {
    let mut ps = ParamSet::<f64>::new();
    ps.insert("theta", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
    for _ in 0..200 {
        let theta = ps.get("theta").unwrap().data()[0];
        ps.get_mut("theta").unwrap().accumulate_grad(&[2.0 * theta]).unwrap();
        adam.step(&mut ps).unwrap();
    }
    assert!(ps.get("theta").unwrap().data()[0].abs() < 0.5);
}
