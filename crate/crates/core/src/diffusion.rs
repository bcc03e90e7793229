//! Residual diffusion over grid images. The network predicts the residual
//! `ε = y0 − x0` between the critical and base states from a noised copy of
//! the critical state whose base channels are held at the (scaled) base
//! state. Sampling runs the ancestral reverse chain, feeding the update the
//! Gaussian noise implied by the predicted residual, with the base channels
//! clamped to the conditioning state after every step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GridImage, CHANNELS};
use crate::tensor::{Real, Tensor};
use crate::unet::{mse, DenoiserParams, UNetError};

/// Channels carrying the base state; the other three are generated.
pub const BASE_CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("bad noise schedule: {0}")]
    BadRange(String),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("timestep {t} outside 1..={t_max}")]
    BadTimestep { t: usize, t_max: usize },
    #[error("non-finite training loss at epoch {epoch} (last finite loss {last:?})")]
    NonFiniteLoss { epoch: usize, last: Option<f64> },
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Net(#[from] UNetError),
}

/// Linear β schedule with derived α, ᾱ and σ tables (index 0 ↔ t = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_max == 0 {
            return Err(DiffusionError::BadRange("T must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|k| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            t_max,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max {
            return Err(DiffusionError::BadTimestep {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar,sigma\n");
        for t in 1..=self.t_max {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t),
                self.sigma(t)
            ));
        }
        s
    }
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::new(t_max, beta_start, beta_end)
}

/// `y0 − x0` elementwise.
pub fn residual_noise(y0: &[f64], x0: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if y0.len() != x0.len() {
        return Err(DiffusionError::ShapeMismatch(y0.len(), x0.len()));
    }
    Ok(y0.iter().zip(x0).map(|(a, b)| a - b).collect())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(
    x0: &[f64],
    eps: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch(x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// The diffusion start point for a sample: base channels kept, target
/// channels replaced by copies of the base channels.
pub fn base_start(img: &GridImage) -> GridImage {
    let mut x0 = img.clone();
    for c in 0..BASE_CHANNELS {
        let src = img.channel(c).to_vec();
        x0.channel_mut(c + BASE_CHANNELS).copy_from_slice(&src);
    }
    x0
}

/// A training triple: start point, full target and their residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x0: GridImage,
    pub y0: GridImage,
    pub eps: Vec<f64>,
}

impl TrainingPair {
    pub fn new(y0: &GridImage) -> Self {
        let x0 = base_start(y0);
        let eps = residual_noise(&y0.data, &x0.data).expect("same shape");
        TrainingPair {
            x0,
            y0: y0.clone(),
            eps,
        }
    }
}

/// Anything that predicts the residual for a batch of noised images.
pub trait Denoiser {
    fn predict(&self, batch: &[GridImage], ts: &[usize]) -> Vec<GridImage>;
}

fn to_tensor<T: Real>(batch: &[GridImage]) -> Tensor<T> {
    let n = batch[0].n;
    let mut t = Tensor::zeros(CHANNELS, batch.len(), n, n);
    let hw = n * n;
    for (b, img) in batch.iter().enumerate() {
        for c in 0..CHANNELS {
            let dst = t.idx(c, b, 0, 0);
            for (d, &s) in t.data[dst..dst + hw].iter_mut().zip(img.channel(c)) {
                *d = T::of(s);
            }
        }
    }
    t
}

fn from_tensor<T: Real>(t: &Tensor<T>) -> Vec<GridImage> {
    let hw = t.h * t.w;
    (0..t.b)
        .map(|b| {
            let mut img = GridImage::zeros(t.h);
            for c in 0..CHANNELS {
                let s = t.idx(c, b, 0, 0);
                for (d, &v) in img.channel_mut(c).iter_mut().zip(&t.data[s..s + hw]) {
                    *d = v.f64();
                }
            }
            img
        })
        .collect()
}

impl<T: Real> Denoiser for DenoiserParams<T> {
    fn predict(&self, batch: &[GridImage], ts: &[usize]) -> Vec<GridImage> {
        if batch.is_empty() {
            return vec![];
        }
        let out = self
            .forward(&to_tensor::<T>(batch), ts)
            .expect("denoiser input shape");
        from_tensor(&out)
    }
}

/// Wraps a closure as a [`Denoiser`] (test stubs, oracles).
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&GridImage, usize) -> GridImage,
{
    fn predict(&self, batch: &[GridImage], ts: &[usize]) -> Vec<GridImage> {
        batch.iter().zip(ts).map(|(y, &t)| (self.0)(y, t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Drop the stochastic term of the reverse update.
    pub deterministic: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            deterministic: false,
        }
    }
}

/// Reverse chain for a batch of base conditions, one RNG per condition.
///
/// From `y_T ~ N(0, I)`, each step predicts the residual `ε̂`, converts it to
/// the implied noise `ẑ = (y_t − √ᾱ_t (x0 + ε̂)) / √(1−ᾱ_t)`, applies
/// `y ← (y − (1−α_t)/√(1−ᾱ_t)·ẑ)/√α_t + σ_t z` and clamps the base channels
/// to `√ᾱ_{t−1}·condition`. The last step lands on `x0 + ε̂`.
pub fn sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    conditions: &[GridImage],
    rngs: &mut [ChaCha8Rng],
    opts: SampleOptions,
) -> Vec<GridImage> {
    assert_eq!(conditions.len(), rngs.len());
    let clamp = |y: &mut GridImage, cond: &GridImage, scale: f64| {
        for c in 0..BASE_CHANNELS {
            for (d, &b) in y.channel_mut(c).iter_mut().zip(cond.channel(c)) {
                *d = scale * b;
            }
        }
    };
    let starts: Vec<GridImage> = conditions.iter().map(base_start).collect();
    let mut ys: Vec<GridImage> = conditions
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, rng)| {
            let mut y = GridImage {
                n: c.n,
                data: gaussian_image(c.n, rng),
            };
            clamp(&mut y, c, sched.alpha_bar(sched.t_max).sqrt());
            y
        })
        .collect();
    for t in (1..=sched.t_max).rev() {
        let ts = vec![t; ys.len()];
        let eps = denoiser.predict(&ys, &ts);
        let a = sched.alpha(t);
        let ab = sched.alpha_bar(t);
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let s = sched.sigma(t);
        let noisy = t > 1 && !opts.deterministic;
        for (((y, e), x0), (cond, rng)) in ys
            .iter_mut()
            .zip(&eps)
            .zip(&starts)
            .zip(conditions.iter().zip(rngs.iter_mut()))
        {
            for ((v, &ev), &xv) in y.data.iter_mut().zip(&e.data).zip(&x0.data) {
                let z_hat = (*v - ab.sqrt() * (xv + ev)) / (1.0 - ab).sqrt();
                *v = (*v - coef * z_hat) / a.sqrt();
                if noisy {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += s * z;
                }
            }
            clamp(y, cond, sched.alpha_bar(t - 1).sqrt());
        }
    }
    ys
}

pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    condition: &GridImage,
    rng: &mut ChaCha8Rng,
    opts: SampleOptions,
) -> GridImage {
    let mut rngs = [rng.clone()];
    let out = sample_batch(denoiser, sched, std::slice::from_ref(condition), &mut rngs, opts);
    *rng = rngs[0].clone();
    out.into_iter().next().expect("one sample")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Decay of the weight moving average returned for sampling; 0 returns
    /// the raw final weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-3,
            batch: 16,
            epochs: 600,
            seed: 0,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::new(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grad: &[T]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            let g = g.f64();
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let upd = self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            *p = T::of(p.f64() - upd);
        }
    }
}

/// Network input at step `t`: `√ᾱ_t·y0 + √(1−ᾱ_t)·z` with `z` zero on the
/// base channels, matching the clamped state seen during sampling.
pub fn noised_target(y0: &GridImage, z: &[f64], t: usize, sched: &NoiseSchedule) -> GridImage {
    let mut z = z.to_vec();
    let plane = y0.n * y0.n;
    z[..BASE_CHANNELS * plane].fill(0.0);
    GridImage {
        n: y0.n,
        data: forward_diffuse(&y0.data, &z, t, sched).expect("valid timestep"),
    }
}

/// Standard normal draws for one image.
pub fn gaussian_image<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..CHANNELS * n * n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Network inputs and residual targets for one minibatch.
pub fn diffused_batch<T: Real, R: Rng + ?Sized>(
    pairs: &[&TrainingPair],
    ts: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> (Tensor<T>, Tensor<T>) {
    let xs: Vec<GridImage> = pairs
        .iter()
        .zip(ts)
        .map(|(p, &t)| noised_target(&p.y0, &gaussian_image(p.y0.n, rng), t, sched))
        .collect();
    let es: Vec<GridImage> = pairs
        .iter()
        .map(|p| GridImage {
            n: p.x0.n,
            data: p.eps.clone(),
        })
        .collect();
    (to_tensor(&xs), to_tensor(&es))
}

/// Mean training loss over every pair at fixed timesteps (one per pair)
/// and noise drawn from `seed`.
pub fn objective<T: Real>(
    params: &DenoiserParams<T>,
    pairs: &[TrainingPair],
    ts: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
) -> f64 {
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, e) = diffused_batch::<T, _>(&refs, ts, sched, &mut rng);
    let pred = params.forward(&x, ts).expect("shape");
    mse(&pred, &e).0.f64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Moving-average weights (the raw weights when averaging is off).
    pub params: DenoiserParams<T>,
    pub last: DenoiserParams<T>,
    /// Mean minibatch loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Minimizes `‖ε − ε_θ(y_t, t)‖²` over the residual `ε` with Adam, using
/// shuffled minibatches, uniformly drawn timesteps and fresh Gaussian noise
/// in the generated channels of `y_t`. `on_epoch(epoch, loss)` is
/// called after each epoch.
pub fn train<T: Real, F: FnMut(usize, f64)>(
    pairs: &[TrainingPair],
    config: &TrainConfig,
    init: DenoiserParams<T>,
    mut on_epoch: F,
) -> Result<TrainOutcome<T>, DiffusionError> {
    if pairs.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let sched = config.schedule()?;
    let mut params = init;
    let mut adam = Adam::new(params.len(), config.lr);
    let mut ema: Vec<f64> = params.data.iter().map(|v| v.f64()).collect();
    let mut steps = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let batch = config.batch.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let refs: Vec<&TrainingPair> = chunk.iter().map(|&k| &pairs[k]).collect();
            let ts: Vec<usize> = chunk.iter().map(|_| rng.gen_range(1..=sched.t_max)).collect();
            let (x, e) = diffused_batch::<T, _>(&refs, &ts, &sched, &mut rng);
            let mut loss = T::zero();
            let (_, grad) = params.forward_backward(&x, &ts, |pred| {
                let (l, g) = mse(pred, &e);
                loss = l;
                g
            })?;
            let loss = loss.f64();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffusionError::NonFiniteLoss {
                    epoch,
                    last: history.last().copied(),
                });
            }
            adam.step(&mut params.data, &grad);
            steps += 1;
            // Warm-up keeps early averages from clinging to the initialization.
            let d = config.ema_decay.min((1.0 + steps as f64) / (10.0 + steps as f64));
            for (a, p) in ema.iter_mut().zip(&params.data) {
                *a = d * *a + (1.0 - d) * p.f64();
            }
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    let mut averaged = params.clone();
    if config.ema_decay > 0.0 {
        for (p, a) in averaged.data.iter_mut().zip(&ema) {
            *p = T::of(*a);
        }
    }
    Ok(TrainOutcome {
        params: averaged,
        last: params,
        loss_history: history,
    })
}

pub fn loss_history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (k, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{}\n", k + 1, l));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_basics() {
        let s = NoiseSchedule::new(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 0.7);
        assert!(NoiseSchedule::new(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(0, 0.1, 0.2).is_err());
        let s = NoiseSchedule::new(50, 1e-4, 0.02).unwrap();
        assert!((s.beta(50) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_timestep() {
        let s = NoiseSchedule::new(5, 1e-4, 0.02).unwrap();
        assert_eq!(
            forward_diffuse(&[1.0], &[0.0], 6, &s),
            Err(DiffusionError::BadTimestep { t: 6, t_max: 5 })
        );
        assert!(forward_diffuse(&[1.0], &[0.0], 0, &s).is_err());
        assert!(residual_noise(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn base_start_copies_channels() {
        let mut img = GridImage::zeros(2);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = k as f64;
        }
        let x0 = base_start(&img);
        for c in 0..3 {
            assert_eq!(x0.channel(c), img.channel(c));
            assert_eq!(x0.channel(c + 3), img.channel(c));
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0_f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
