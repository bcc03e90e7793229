//! Noise-predictor network and residual diffusion: gradients against central
//! differences, receptive-field locality, schedule algebra, the reverse
//! chain with an exact noise oracle, and training behaviour.

mod common;

use common::nets::*;
use contingen_core::dataset::{GridImage, CHANNELS};
use contingen_core::diffusion::{
    forward_diffuse, make_schedule, objective, residual_noise, sample, sample_batch, train,
    Denoiser, FnDenoiser, SampleOptions, TrainConfig, TrainingPair, BASE_CHANNELS,
};
use contingen_core::tensor::Tensor;
use contingen_core::unet::{mse, DenoiserParams, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_central_differences() {
    for groups in [2, 0] {
        let params = DenoiserParams::<f64>::init(&tiny(groups), 11).unwrap();
        let x = random_tensor(6, 2, 6, 1);
        let r = random_tensor(6, 2, 6, 2);
        let (worst, at) = gradient_check(&params, &x, &[3, 17], &r);
        assert!(worst <= 1e-3, "groups={groups}: worst relative error {worst:e} at {at}");
    }
}

#[test]
fn gradients_match_after_training_steps() {
    let config = tiny(2);
    let pairs: Vec<TrainingPair> = (0..4).map(|s| TrainingPair::new(&random_image(6, 100 + s))).collect();
    let cfg = TrainConfig {
        t_max: 50,
        epochs: 50,
        batch: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    // 4 pairs in batches of 2 over 50 epochs: 100 optimizer steps.
    let out = train(&pairs, &cfg, DenoiserParams::<f64>::init(&config, 5).unwrap(), |_, _| {}).unwrap();
    let x = random_tensor(6, 2, 6, 3);
    let r = random_tensor(6, 2, 6, 4);
    let (worst, at) = gradient_check(&out.params, &x, &[1, 50], &r);
    assert!(worst <= 1e-3, "worst relative error {worst:e} at {at}");
}

#[test]
fn zero_upstream_gives_zero_gradient_and_frozen_names_are_omitted() {
    let params = DenoiserParams::<f64>::init(&tiny(2), 1).unwrap();
    let x = random_tensor(6, 1, 5, 9);
    let (_, grad) = params
        .forward_backward(&x, &[4], |y| Tensor::zeros(y.c, y.b, y.h, y.w))
        .unwrap();
    assert!(grad.iter().all(|&g| g == 0.0));
    let named = params.named_grads(&grad, &["time.w"]);
    assert!(!named.contains_key("time.w"));
    assert!(named.contains_key("time.b"));
    assert_eq!(named.len(), params.specs.len() - 1);
}

#[test]
fn parameter_count_closed_form() {
    // Block(cin, cout) = 9·cin·cout + cout (conv) + 2·cout (norm) + d·cout + cout (time projection).
    let block = |cin: usize, cout: usize, d: usize| 9 * cin * cout + cout + 2 * cout + d * cout + cout;
    let (w, d) = (32, 64);
    let expected = d * d + d                      // time MLP
        + (9 * w * w + w) + (9 * 2 * w * 2 * w + 2 * w)   // two downsampling convs
        + block(6, w, d) + block(w, 2 * w, d) + block(2 * w, 4 * w, d)
        + block(4 * w, 4 * w, d)
        + block(4 * w + 2 * w, 2 * w, d) + block(2 * w + w, w, d)
        + 9 * w * 6 + 6;
    let config = UNetConfig::for_size(14, w, 2);
    assert_eq!(config.param_count(), expected);
    assert_eq!(DenoiserParams::<f32>::init(&config, 0).unwrap().len(), expected);
}

#[test]
fn init_is_seeded_and_finite() {
    let config = UNetConfig::for_size(14, 8, 2);
    let a = DenoiserParams::<f32>::init(&config, 7).unwrap();
    assert_eq!(a, DenoiserParams::<f32>::init(&config, 7).unwrap());
    assert_ne!(a, DenoiserParams::<f32>::init(&config, 8).unwrap());
    let x = random_tensor(6, 3, 14, 0);
    let xf = Tensor {
        c: x.c,
        b: x.b,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v as f32).collect(),
    };
    let y = a.forward(&xf, &[1, 100, 200]).unwrap();
    assert_eq!(y.shape(), xf.shape());
    assert!(y.data.iter().all(|v| v.is_finite()));
}

#[test]
fn output_shape_matches_input_for_case_sizes() {
    for n in [6, 14, 30] {
        let config = UNetConfig::for_size(n, 8, 2);
        let p = DenoiserParams::<f64>::init(&config, 0).unwrap();
        let y = p.forward(&random_tensor(6, 1, n, 1), &[10]).unwrap();
        assert_eq!(y.shape(), (6, 1, n, n));
    }
}

#[test]
fn internal_padding_equals_manual_padding() {
    let config = UNetConfig::for_size(14, 8, 2);
    let p = DenoiserParams::<f64>::init(&config, 2).unwrap();
    let x = random_tensor(6, 1, 14, 3);
    let mut padded = Tensor::zeros(6, 1, 16, 16);
    for c in 0..6 {
        for i in 0..14 {
            for j in 0..14 {
                let d = padded.idx(c, 0, i, j);
                padded.data[d] = x.data[x.idx(c, 0, i, j)];
            }
        }
    }
    let a = p.forward(&x, &[5]).unwrap();
    let b = p.forward(&padded, &[5]).unwrap();
    for c in 0..6 {
        for i in 0..14 {
            for j in 0..14 {
                assert_eq!(a.data[a.idx(c, 0, i, j)], b.data[b.idx(c, 0, i, j)]);
            }
        }
    }
}

#[test]
fn perturbation_stays_within_receptive_field() {
    // Without normalization every layer is local. Fine-grid radius: 1 (enc0)
    // + 2 (stride-2 conv incl. alignment) + 2 + 2 (coarse blocks) + 1
    // (upsample alignment) + 1 (dec0) + 1 (out) = 10.
    let mut config = UNetConfig::for_size(30, 8, 1);
    config.groups = 0;
    let radius = 10usize;
    let p = DenoiserParams::<f64>::init(&config, 4).unwrap();
    let x = random_tensor(6, 1, 30, 5);
    let base = p.forward(&x, &[7]).unwrap();
    let (pi, pj) = (3usize, 4usize);
    let mut bumped = x.clone();
    let k = bumped.idx(2, 0, pi, pj);
    bumped.data[k] += 1.0;
    let moved = p.forward(&bumped, &[7]).unwrap();
    let mut changed_far = 0;
    let mut changed_near = 0;
    for c in 0..6 {
        for i in 0..30 {
            for j in 0..30 {
                let d = (moved.data[moved.idx(c, 0, i, j)] - base.data[base.idx(c, 0, i, j)]).abs();
                let dist = i.abs_diff(pi).max(j.abs_diff(pj));
                if d != 0.0 {
                    if dist > radius {
                        changed_far += 1;
                    } else {
                        changed_near += 1;
                    }
                }
            }
        }
    }
    assert_eq!(changed_far, 0);
    assert!(changed_near > 0);
}

#[test]
fn schedule_tables() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    assert!(s.alpha_bar(1000) < 5e-5);
    for t in 2..=1000 {
        assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-15);
    }
    let x0 = random_image(6, 1).data;
    let eps = random_image(6, 2).data;
    let xt = forward_diffuse(&x0, &eps, 1000, &s).unwrap();
    let dist = xt.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = x0.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dist <= 0.01 * norm + 1e-6);
    assert!(s.to_csv().lines().count() == 1001);
}

#[test]
fn forward_diffusion_inverts_and_is_linear() {
    let s = make_schedule(200, 1e-4, 0.02).unwrap();
    let (x0, x1) = (random_image(14, 1).data, random_image(14, 2).data);
    let (e0, e1) = (random_image(14, 3).data, random_image(14, 4).data);
    for t in [1, 57, 200] {
        let ab = s.alpha_bar(t);
        let xt = forward_diffuse(&x0, &e0, t, &s).unwrap();
        for ((v, x), e) in xt.iter().zip(&x0).zip(&e0) {
            assert!(((v - (1.0 - ab).sqrt() * e) / ab.sqrt() - x).abs() <= 1e-9);
        }
        let zero = forward_diffuse(&x0, &vec![0.0; x0.len()], t, &s).unwrap();
        for (v, x) in zero.iter().zip(&x0) {
            assert!((v - ab.sqrt() * x).abs() < 1e-15);
        }
        let sum_x: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| 2.0 * a - b).collect();
        let sum_e: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| 2.0 * a - b).collect();
        let lhs = forward_diffuse(&sum_x, &sum_e, t, &s).unwrap();
        let a = forward_diffuse(&x0, &e0, t, &s).unwrap();
        let b = forward_diffuse(&x1, &e1, t, &s).unwrap();
        for ((l, p), q) in lhs.iter().zip(&a).zip(&b) {
            assert!((l - (2.0 * p - q)).abs() < 1e-12);
        }
    }
}

#[test]
fn residual_is_exact_inverse() {
    let (y0, x0) = (random_image(6, 5).data, random_image(6, 6).data);
    let eps = residual_noise(&y0, &x0).unwrap();
    assert!(x0.iter().zip(&eps).zip(&y0).all(|((x, e), y)| x + e == *y || (x + e - y).abs() < 1e-15));
    assert!(residual_noise(&y0, &y0).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn exact_noise_oracle_reconstructs_target() {
    let s = make_schedule(200, 1e-4, 0.02).unwrap();
    let y0 = random_image(6, 9);
    let pair = TrainingPair::new(&y0);
    let eps = GridImage {
        n: 6,
        data: pair.eps.clone(),
    };
    let oracle = FnDenoiser(move |_: &GridImage, _| eps.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = sample(&oracle, &s, &y0, &mut rng, SampleOptions { deterministic: true });
    let err = out.data.iter().zip(&y0.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-3, "max deviation {err}");
    // The last step removes the stochastic terms as well.
    let out = sample(&oracle, &s, &y0, &mut rng, SampleOptions::default());
    let err = out.data.iter().zip(&y0.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-3, "max deviation {err}");
}

#[test]
fn sampling_is_seeded_and_keeps_base_channels() {
    let config = UNetConfig::for_size(6, 8, 1);
    let p = DenoiserParams::<f32>::init(&config, 1).unwrap();
    let s = make_schedule(20, 1e-4, 0.02).unwrap();
    let cond = random_image(6, 3);
    let run = |seed| sample(&p, &s, &cond, &mut ChaCha8Rng::seed_from_u64(seed), SampleOptions::default());
    let a = run(4);
    assert_eq!(a, run(4));
    for c in 0..BASE_CHANNELS {
        assert_eq!(a.channel(c), cond.channel(c));
    }
    // Batched sampling matches one-at-a-time sampling.
    let conds = vec![cond.clone(), random_image(6, 8)];
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(4), ChaCha8Rng::seed_from_u64(5)];
    let batch = sample_batch(&p, &s, &conds, &mut rngs, SampleOptions::default());
    let b1 = sample(&p, &s, &conds[1], &mut ChaCha8Rng::seed_from_u64(5), SampleOptions::default());
    let close = |x: &GridImage, y: &GridImage| x.data.iter().zip(&y.data).all(|(a, b)| (a - b).abs() < 1e-5);
    assert!(close(&batch[0], &a) && close(&batch[1], &b1));
}

#[test]
fn overfits_single_sample() {
    let y0 = random_image(6, 21);
    let pairs = vec![TrainingPair::new(&y0)];
    let cfg = TrainConfig {
        t_max: 50,
        epochs: 500,
        batch: 1,
        ..TrainConfig::default()
    };
    let out = train(&pairs, &cfg, DenoiserParams::<f32>::init(&UNetConfig::for_size(6, 8, 1), 0).unwrap(), |_, _| {}).unwrap();
    let first = out.loss_history[0];
    let last = out.loss_history[out.loss_history.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last * 10.0 <= first, "first {first}, last {last}");
}

#[test]
fn training_is_deterministic_and_improves_objective() {
    let pairs: Vec<TrainingPair> = (0..6).map(|s| TrainingPair::new(&random_image(6, 40 + s))).collect();
    let cfg = TrainConfig {
        t_max: 50,
        epochs: 60,
        batch: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = DenoiserParams::<f32>::init(&UNetConfig::for_size(6, 8, 1), 3).unwrap();
    let a = train(&pairs, &cfg, init.clone(), |_, _| {}).unwrap();
    let b = train(&pairs, &cfg, init.clone(), |_, _| {}).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.params, b.params);
    let sched = cfg.schedule().unwrap();
    let ts: Vec<usize> = (0..pairs.len()).map(|k| 1 + 8 * k).collect();
    assert!(objective(&a.params, &pairs, &ts, &sched, 1) <= objective(&init, &pairs, &ts, &sched, 1));
}

#[test]
fn zero_residual_drives_output_to_zero() {
    let mut img = random_image(6, 2);
    for c in 0..3 {
        let src = img.channel(c).to_vec();
        img.channel_mut(c + 3).copy_from_slice(&src);
    }
    let pairs = vec![TrainingPair::new(&img)];
    assert!(pairs[0].eps.iter().all(|&e| e == 0.0));
    let cfg = TrainConfig {
        t_max: 20,
        epochs: 1500,
        batch: 1,
        ..TrainConfig::default()
    };
    let out = train(&pairs, &cfg, DenoiserParams::<f32>::init(&UNetConfig::for_size(6, 8, 1), 0).unwrap(), |_, _| {}).unwrap();
    let last = *out.loss_history.last().unwrap();
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn mse_gradient_is_consistent() {
    let a = random_tensor(2, 1, 3, 1);
    let b = random_tensor(2, 1, 3, 2);
    let (l, g) = mse(&a, &b);
    let n = a.data.len() as f64;
    let expected: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    assert!((l - expected).abs() < 1e-14);
    for ((gv, x), y) in g.data.iter().zip(&a.data).zip(&b.data) {
        assert!((gv - 2.0 * (x - y) / n).abs() < 1e-14);
    }
}

#[test]
fn denoiser_trait_on_params_matches_forward() {
    let config = UNetConfig::for_size(6, 8, 1);
    let p = DenoiserParams::<f64>::init(&config, 1).unwrap();
    let img = random_image(6, 1);
    let out = p.predict(std::slice::from_ref(&img), &[3]);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].data.len(), CHANNELS * 36);
}
