use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_contrast::models::*;
use tempo_contrast::nn::{BoundParams, Mode, NnError, ParamSet, Tape, Var};

fn toy() -> FeatureExtractorConfig {
    FeatureExtractorConfig { channels: 2, window_samples: 64, conv_kernel: 5, pool_size: 4, embed_dim: 8, dropout_rate: 0.5 }
}

fn random_input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

type LossFn = dyn Fn(&mut Tape<f64>, &BoundParams) -> Result<Var, NnError>;

fn eval_loss(b: &ModelBundle<f64>, f: &LossFn) -> f64 {
    let mut t = Tape::new();
    let p = b.bind(&mut t);
    let l = f(&mut t, &p).unwrap();
    t.value(l)[0]
}

/// Worst norm-relative error between tape and central-difference gradients.
fn grad_check(b: &ModelBundle<f64>, f: &LossFn) -> f64 {
    let mut t = Tape::new();
    let p = b.bind(&mut t);
    let l = f(&mut t, &p).unwrap();
    let grads = t.backward(l).unwrap();
    let mut analytic = b.clone();
    analytic.accumulate(&grads, &p).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let set = |m: &ModelBundle<f64>| if which == 0 { m.extractor.clone() } else { m.head.clone() };
        let names: Vec<String> = set(b).iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let a = set(&analytic).get(&name).unwrap().grad().map(<[f64]>::to_vec).unwrap_or_default();
            let n = set(b).get(&name).unwrap().numel();
            let mut num = vec![0.0; n];
            for (i, g) in num.iter_mut().enumerate() {
                let mut plus = b.clone();
                let mut minus = b.clone();
                let pick = |m: &mut ModelBundle<f64>| -> *mut f64 {
                    let s: &mut ParamSet<f64> = if which == 0 { &mut m.extractor } else { &mut m.head };
                    &mut s.get_mut(&name).unwrap().data_mut()[i]
                };
                unsafe {
                    *pick(&mut plus) += h;
                    *pick(&mut minus) -= h;
                }
                *g = (eval_loss(&plus, f) - eval_loss(&minus, f)) / (2.0 * h);
            }
            let a = if a.is_empty() { vec![0.0; n] } else { a };
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
            // Gradients that vanish identically leave only rounding noise.
            let rel = if scale < 1e-7 { diff * 1e2 } else { diff / scale };
            assert!(rel < 1e-6, "{name}: relative error {rel:e}\n{a:?}\n{num:?}");
            worst = worst.max(rel);
        }
    }
    worst
}

fn extract(t: &mut Tape<f64>, cfg: &FeatureExtractorConfig, p: &BoundParams, x: &[f64], mode: Mode) -> Var {
    let b = x.len() / (cfg.channels * cfg.window_samples);
    let x = t.constant(&[b, cfg.channels, cfg.window_samples], x.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    feature_extractor_forward(t, cfg, p, x, mode, &mut rng).unwrap()
}

#[test]
fn rp_gradients_match_finite_differences() {
    let cfg = toy();
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Rp, 1).unwrap();
    let x = random_input(4 * 128, 2);
    let f = move |t: &mut Tape<f64>, p: &BoundParams| {
        let h = extract(t, &cfg, p, &x, Mode::Eval);
        let s = pretext_scores_from_embeddings(t, Task::Rp, p, h, &[vec![0, 1], vec![2, 3]])?;
        t.binary_logistic_loss(s, &[1.0, -1.0])
    };
    grad_check(&b, &f);
}

#[test]
fn rp_gradients_with_fixed_dropout_mask() {
    let cfg = toy();
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Rp, 4).unwrap();
    let x = random_input(4 * 128, 5);
    let f = move |t: &mut Tape<f64>, p: &BoundParams| {
        let h = extract(t, &cfg, p, &x, Mode::Train);
        let s = pretext_scores_from_embeddings(t, Task::Rp, p, h, &[vec![0, 1], vec![2, 3]])?;
        t.binary_logistic_loss(s, &[-1.0, 1.0])
    };
    grad_check(&b, &f);
}

#[test]
fn ts_gradients_match_finite_differences() {
    let cfg = toy();
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Ts, 3).unwrap();
    let x = random_input(6 * 128, 4);
    let f = move |t: &mut Tape<f64>, p: &BoundParams| {
        let h = extract(t, &cfg, p, &x, Mode::Eval);
        let s = pretext_scores_from_embeddings(t, Task::Ts, p, h, &[vec![0, 3], vec![1, 4], vec![2, 5]])?;
        t.binary_logistic_loss(s, &[1.0, -1.0])
    };
    grad_check(&b, &f);
}

#[test]
fn ae_gradients_match_finite_differences() {
    let cfg = toy();
    // Seed picked so no ReLU input sits within the difference step of its kink.
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Ae, 7).unwrap();
    let x = random_input(2 * 128, 6);
    let f = move |t: &mut Tape<f64>, p: &BoundParams| {
        let h = extract(t, &cfg, p, &x, Mode::Eval);
        let y = decode_autoencoder(t, &cfg, p, h)?;
        t.mse(y, &x)
    };
    grad_check(&b, &f);
}

#[test]
fn supervised_gradients_match_finite_differences() {
    let cfg = toy();
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Supervised, 6).unwrap();
    let x = random_input(2 * 128, 7);
    let f = move |t: &mut Tape<f64>, p: &BoundParams| {
        let h = extract(t, &cfg, p, &x, Mode::Eval);
        let z = supervised_logits(t, p, h)?;
        t.weighted_cross_entropy(z, &[1, 4], &[1.0, 0.5, 2.0, 1.0, 3.0])
    };
    grad_check(&b, &f);
}

#[test]
fn shared_extractor_gradient_equals_sum_of_branches() {
    let cfg = toy();
    let b = ModelBundle::<f64>::init(cfg.clone(), Task::Rp, 8).unwrap();
    let x1 = random_input(2 * 128, 9);
    let x2 = random_input(2 * 128, 10);
    let y = [1.0, -1.0];

    let mut t = Tape::new();
    let p = b.bind(&mut t);
    let h1 = extract(&mut t, &cfg, &p, &x1, Mode::Eval);
    let h2 = extract(&mut t, &cfg, &p, &x2, Mode::Eval);
    let g = contrast_rp(&mut t, h1, h2).unwrap();
    let s = pretext_score(&mut t, g, p.get("head.weight").unwrap(), p.get("head.bias").unwrap()).unwrap();
    let l = t.binary_logistic_loss(s, &y).unwrap();
    let grads = t.backward(l).unwrap();
    let mut shared = b.clone();
    shared.accumulate(&grads, &p).unwrap();

    // Oracle: two independent copies of the extractor, one per branch.
    let mut t = Tape::new();
    let pa = b.extractor.bind(&mut t);
    let pb = b.extractor.bind(&mut t);
    let ph = b.head.bind(&mut t);
    let h1 = extract(&mut t, &cfg, &pa, &x1, Mode::Eval);
    let h2 = extract(&mut t, &cfg, &pb, &x2, Mode::Eval);
    let g = contrast_rp(&mut t, h1, h2).unwrap();
    let s = pretext_score(&mut t, g, ph.get("head.weight").unwrap(), ph.get("head.bias").unwrap()).unwrap();
    let l = t.binary_logistic_loss(s, &y).unwrap();
    let grads = t.backward(l).unwrap();
    let mut copy_a = b.extractor.clone();
    let mut copy_b = b.extractor.clone();
    copy_a.accumulate(&grads, &pa).unwrap();
    copy_b.accumulate(&grads, &pb).unwrap();

    for (name, t) in shared.extractor.iter() {
        let g = t.grad().unwrap();
        let ga = copy_a.get(name).unwrap().grad().unwrap();
        let gb = copy_b.get(name).unwrap().grad().unwrap();
        for i in 0..g.len() {
            assert!((g[i] - (ga[i] + gb[i])).abs() < 1e-10, "{name}[{i}]");
        }
    }
}

#[test]
fn rp_score_is_order_invariant() {
    let cfg = toy();
    let b = ModelBundle::<f32>::init(cfg.clone(), Task::Rp, 11).unwrap();
    let x: Vec<f32> = random_input(2 * 128, 12).into_iter().map(|v| v as f32).collect();
    let mut t = Tape::new();
    let p = b.bind(&mut t);
    let xv = t.constant(&[2, 2, 64], x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = feature_extractor_forward(&mut t, &cfg, &p, xv, Mode::Eval, &mut rng).unwrap();
    let ab = pretext_scores_from_embeddings(&mut t, Task::Rp, &p, h, &[vec![0], vec![1]]).unwrap();
    let ba = pretext_scores_from_embeddings(&mut t, Task::Rp, &p, h, &[vec![1], vec![0]]).unwrap();
    assert_eq!(t.value(ab)[0].to_bits(), t.value(ba)[0].to_bits());
}

#[test]
fn zero_distance_scores_bias_and_random_matches_dot_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (bsz, d) = (4, 7);
    let g: Vec<f64> = (0..bsz * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w0 = 0.3;
    let mut t = Tape::new();
    let gv = t.constant(&[bsz, d], g.clone()).unwrap();
    let wv = t.constant(&[d, 1], w.clone()).unwrap();
    let bv = t.constant(&[1], vec![w0]).unwrap();
    let s = pretext_score(&mut t, gv, wv, bv).unwrap();
    for i in 0..bsz {
        let mut acc = w0;
        for j in 0..d {
            acc += w[j] * g[i * d + j];
        }
        assert!((t.value(s)[i] - acc).abs() < 1e-12);
    }
    let h = t.constant(&[2, d], vec![0.5; 2 * d]).unwrap();
    let z = contrast_rp(&mut t, h, h).unwrap();
    let s = pretext_score(&mut t, z, wv, bv).unwrap();
    assert_eq!(t.value(s), &[w0, w0]);
}

#[test]
fn eval_embeddings_are_deterministic() {
    let b = ModelBundle::<f32>::init(toy(), Task::Rp, 14).unwrap();
    let x: Vec<f32> = random_input(128, 15).into_iter().map(|v| v as f32).collect();
    let e1 = b.embed(&[&x, &x], 4).unwrap();
    let e2 = b.embed(&[&x, &x], 1).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(&e1[..8], &e1[8..]);
}

#[test]
fn supervised_head_shapes_and_softmax_properties() {
    let mut b = ModelBundle::<f64>::init(toy(), Task::Supervised, 16).unwrap();
    for (_, t) in b.head.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut t = Tape::new();
    let p = b.bind(&mut t);
    let e = t.constant(&[3, 8], random_input(24, 17)).unwrap();
    let z = supervised_logits(&mut t, &p, e).unwrap();
    assert_eq!(t.shape(z), &[3, 5]);
    assert!(t.value(z).iter().all(|&v| v == 0.0));
    let ce = t.weighted_cross_entropy(z, &[0, 1, 2], &[1.0; 5]).unwrap();
    assert!((t.value(ce)[0] - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn forward_shapes_over_config_matrix() {
    for c in [1, 2, 3] {
        for (t_len, k, m) in [(256, 16, 4), (2000, 50, 13), (3840, 64, 16)] {
            let cfg = FeatureExtractorConfig {
                channels: c,
                window_samples: t_len,
                conv_kernel: k,
                pool_size: m,
                embed_dim: 100,
                dropout_rate: 0.5,
            };
            let b = ModelBundle::<f32>::init(cfg.clone(), Task::Ae, 0).unwrap();
            let x = vec![0.1f32; c * t_len];
            let e = b.embed(&[&x], 1).unwrap();
            assert_eq!(e.len(), 100);
            let mut tape = Tape::new();
            let p = b.bind(&mut tape);
            let ev = tape.constant(&[1, 100], e).unwrap();
            let y = decode_autoencoder(&mut tape, &cfg, &p, ev).unwrap();
            assert_eq!(tape.shape(y), &[1, c, t_len]);
        }
    }
}

#[test]
fn rp_checkpoint_extractor_loads_into_ts_model() {
    let rp = ModelBundle::<f32>::init(toy(), Task::Rp, 18).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&rp, &serde_json::Value::Null, &mut buf).unwrap();
    let (loaded, _) = read_checkpoint(&buf).unwrap();
    let mut ts = ModelBundle::<f32>::init(toy(), Task::Ts, 19).unwrap();
    ts.load_extractor_from(&loaded).unwrap();
    match ts.load_head_from(&loaded) {
        Err(ModelError::DimensionMismatch { expected, found, .. }) => {
            assert_eq!(expected, vec![16, 1]);
            assert_eq!(found, vec![8, 1]);
        }
        other => panic!("{other:?}"),
    }
}
