//! Small-network fixtures: the tiny denoiser configuration, random inputs
//! and a central-difference gradient probe.

use contingen_core::dataset::GridImage;
use contingen_core::tensor::Tensor;
use contingen_core::unet::{DenoiserParams, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn tiny(groups: usize) -> UNetConfig {
    UNetConfig {
        in_channels: 6,
        base_width: 8,
        depth: 1,
        time_embed_dim: 8,
        pad_to: 6,
        groups,
    }
}

pub fn random_tensor(c: usize, b: usize, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(c, b, n, n);
    for v in &mut t.data {
        *v = rng.sample(StandardNormal);
    }
    t
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Worst relative error of analytic vs central-difference gradients of
/// `⟨R, f(x)⟩`, with relative error taken against the larger magnitude and a
/// floor of `1e-6` for entries that are numerically zero.
pub fn gradient_check(params: &DenoiserParams<f64>, x: &Tensor<f64>, ts: &[usize], r: &Tensor<f64>) -> (f64, String) {
    let (_, grad) = params.forward_backward(x, ts, |_| r.clone()).unwrap();
    let h = 1e-4;
    let mut p = params.clone();
    let mut worst = (0.0, String::new());
    for spec in &params.specs {
        for k in spec.offset..spec.offset + spec.len {
            let orig = p.data[k];
            p.data[k] = orig + h;
            let up = dot(r, &p.forward(x, ts).unwrap());
            p.data[k] = orig - h;
            let down = dot(r, &p.forward(x, ts).unwrap());
            p.data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{}]: {} vs {}", spec.name, k - spec.offset, grad[k], numeric));
            }
        }
    }
    worst
}

pub fn random_image(n: usize, seed: u64) -> GridImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GridImage::zeros(n);
    for v in &mut img.data {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}
