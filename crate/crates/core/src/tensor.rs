//! Minimal dense tensor kernels for the denoiser: 3×3 convolution via
//! im2col + GEMM, group normalization, SiLU, nearest upsampling and dense
//! layers, each with an explicit backward pass.
//!
//! Activations use a `[C, B, H, W]` layout so that a convolution over the
//! whole batch is a single matrix product.

use std::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `C ← α·op(A)·op(B) + β·C` on row-major slices. `op(A)` is `m×k`,
    /// `op(B)` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Logical `rows×cols`; stored row-major as-is or transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(ta, m, k);
                let (rsb, csb) = strides(tb, k, n);
                // SAFETY: bounds asserted above; strides describe dense
                // row-major storage of the given logical shapes.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn of(v: f64) -> Self {
                v as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `[C, B, H, W]` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            b,
            h,
            w,
            data: vec![T::zero(); c * b * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.c, self.b, self.h, self.w)
    }

    /// Elements per channel (`B·H·W`).
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.b + b) * self.h + y) * self.w + x
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Stacks `self` and `other` along channels.
    pub fn concat(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!((self.b, self.h, self.w), (other.b, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            c: self.c + other.c,
            b: self.b,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Splits channels at `at` (inverse of [`Tensor::concat`]).
    pub fn split(&self, at: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = at * self.plane();
        (
            Tensor {
                c: at,
                b: self.b,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                c: self.c - at,
                b: self.b,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

fn out_dim(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// `[Cin·9, B·Ho·Wo]` patch matrix for a 3×3 kernel with zero padding 1.
fn im2col<T: Real>(x: &Tensor<T>, stride: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (out_dim(x.h, stride), out_dim(x.w, stride));
    let ncols = x.b * ho * wo;
    let mut cols = vec![T::zero(); x.c * 9 * ncols];
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for b in 0..x.b {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = x.idx(ci, b, iy as usize, 0);
                        let dst = row + (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < x.w as isize {
                                cols[dst + ox] = x.data[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Real>(cols: &[T], c: usize, b: usize, h: usize, w: usize, stride: usize) -> Tensor<T> {
    let mut x = Tensor::zeros(c, b, h, w);
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let ncols = b * ho * wo;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for bb in 0..b {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = x.idx(ci, bb, iy as usize, 0);
                        let src = row + (bb * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let d = dst + ix as usize;
                                x.data[d] = x.data[d] + cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3×3 convolution, padding 1. `weight` is `[Cout, Cin, 3, 3]`.
pub fn conv3x3<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], stride: usize) -> Tensor<T> {
    let cout = bias.len();
    assert_eq!(weight.len(), cout * x.c * 9);
    let (cols, ho, wo) = im2col(x, stride);
    let n = x.b * ho * wo;
    let mut y = Tensor::zeros(cout, x.b, ho, wo);
    for (co, chunk) in y.data.chunks_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    T::gemm(false, false, cout, n, x.c * 9, T::one(), weight, &cols, T::one(), &mut y.data);
    y
}

/// Returns `dx` and accumulates into `dw`, `db`.
pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    stride: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let cout = dy.c;
    let (cols, _, _) = im2col(x, stride);
    let n = dy.plane();
    let k = x.c * 9;
    T::gemm(false, true, cout, k, n, T::one(), &dy.data, &cols, T::one(), dw);
    for (co, chunk) in dy.data.chunks(n).enumerate() {
        db[co] = chunk.iter().fold(db[co], |a, &v| a + v);
    }
    let mut dcols = vec![T::zero(); k * n];
    T::gemm(true, false, k, n, cout, T::one(), weight, &dy.data, T::zero(), &mut dcols);
    col2im(&dcols, x.c, x.b, x.h, x.w, stride)
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v * sigmoid(*v);
    }
    y
}

/// Gradient of SiLU given its input `x`.
pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *d = *d * s * (T::one() + v * (T::one() - s));
    }
    dx
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub const GN_EPS: f64 = 1e-5;

/// Saved statistics for the group-norm backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub xhat: Tensor<T>,
    /// `1/σ` per `(group, batch)`.
    pub inv_std: Vec<T>,
}

/// Group normalization per sample over `C/groups` channels × H × W.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, GroupNormCache<T>) {
    assert_eq!(x.c % groups, 0);
    let cpg = x.c / groups;
    let hw = x.h * x.w;
    let count = T::of((cpg * hw) as f64);
    let mut xhat = x.clone();
    let mut inv_std = vec![T::zero(); groups * x.b];
    for g in 0..groups {
        for b in 0..x.b {
            let mut mean = T::zero();
            for c in g * cpg..(g + 1) * cpg {
                let s = x.idx(c, b, 0, 0);
                mean = x.data[s..s + hw].iter().fold(mean, |a, &v| a + v);
            }
            mean = mean / count;
            let mut var = T::zero();
            for c in g * cpg..(g + 1) * cpg {
                let s = x.idx(c, b, 0, 0);
                var = x.data[s..s + hw].iter().fold(var, |a, &v| a + (v - mean) * (v - mean));
            }
            var = var / count;
            let is = T::one() / (var + T::of(GN_EPS)).sqrt();
            inv_std[g * x.b + b] = is;
            for c in g * cpg..(g + 1) * cpg {
                let s = x.idx(c, b, 0, 0);
                for v in &mut xhat.data[s..s + hw] {
                    *v = (*v - mean) * is;
                }
            }
        }
    }
    let mut y = xhat.clone();
    for c in 0..x.c {
        let s = c * x.plane();
        for v in &mut y.data[s..s + x.plane()] {
            *v = *v * gamma[c] + beta[c];
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

pub fn group_norm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    groups: usize,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let xhat = &cache.xhat;
    let cpg = xhat.c / groups;
    let hw = xhat.h * xhat.w;
    let plane = xhat.plane();
    for c in 0..xhat.c {
        let s = c * plane;
        let (mut gsum, mut bsum) = (T::zero(), T::zero());
        for (d, xh) in dy.data[s..s + plane].iter().zip(&xhat.data[s..s + plane]) {
            gsum = gsum + *d * *xh;
            bsum = bsum + *d;
        }
        dgamma[c] = dgamma[c] + gsum;
        dbeta[c] = dbeta[c] + bsum;
    }
    let mut dx = Tensor::zeros(xhat.c, xhat.b, xhat.h, xhat.w);
    let count = T::of((cpg * hw) as f64);
    for g in 0..groups {
        for b in 0..xhat.b {
            let (mut m1, mut m2) = (T::zero(), T::zero());
            for c in g * cpg..(g + 1) * cpg {
                let s = xhat.idx(c, b, 0, 0);
                for k in s..s + hw {
                    let dxh = dy.data[k] * gamma[c];
                    m1 = m1 + dxh;
                    m2 = m2 + dxh * xhat.data[k];
                }
            }
            m1 = m1 / count;
            m2 = m2 / count;
            let is = cache.inv_std[g * xhat.b + b];
            for c in g * cpg..(g + 1) * cpg {
                let s = xhat.idx(c, b, 0, 0);
                for k in s..s + hw {
                    let dxh = dy.data[k] * gamma[c];
                    dx.data[k] = is * (dxh - m1 - xhat.data[k] * m2);
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.c, x.b, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for b in 0..x.b {
            for yy in 0..y.h {
                for xx in 0..y.w {
                    let d = y.idx(c, b, yy, xx);
                    y.data[d] = x.data[x.idx(c, b, yy / 2, xx / 2)];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, dy.b, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for b in 0..dy.b {
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    let d = dx.idx(c, b, yy / 2, xx / 2);
                    dx.data[d] = dx.data[d] + dy.data[dy.idx(c, b, yy, xx)];
                }
            }
        }
    }
    dx
}

/// Dense layer on feature-major input `[In, B]` → `[Out, B]`; `weight` is
/// `[Out, In]`.
pub fn linear<T: Real>(x: &[T], batch: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let out = bias.len();
    let inp = x.len() / batch;
    let mut y = vec![T::zero(); out * batch];
    for o in 0..out {
        y[o * batch..(o + 1) * batch].fill(bias[o]);
    }
    T::gemm(false, false, out, batch, inp, T::one(), weight, x, T::one(), &mut y);
    y
}

pub fn linear_backward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let out = db.len();
    let inp = x.len() / batch;
    T::gemm(false, true, out, inp, batch, T::one(), dy, x, T::one(), dw);
    for o in 0..out {
        db[o] = dy[o * batch..(o + 1) * batch].iter().fold(db[o], |a, &v| a + v);
    }
    let mut dx = vec![T::zero(); inp * batch];
    T::gemm(true, false, inp, batch, out, T::one(), weight, dy, T::zero(), &mut dx);
    dx
}

/// Adds a per-`(channel, batch)` offset `[C, B]` to every pixel.
pub fn add_channel_bias<T: Real>(x: &mut Tensor<T>, offset: &[T]) {
    let hw = x.h * x.w;
    for c in 0..x.c {
        for b in 0..x.b {
            let o = offset[c * x.b + b];
            let s = x.idx(c, b, 0, 0);
            for v in &mut x.data[s..s + hw] {
                *v = *v + o;
            }
        }
    }
}

/// Spatial sums `[C, B]` (gradient of [`add_channel_bias`]).
pub fn channel_sums<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let hw = dy.h * dy.w;
    let mut out = vec![T::zero(); dy.c * dy.b];
    for c in 0..dy.c {
        for b in 0..dy.b {
            let s = dy.idx(c, b, 0, 0);
            out[c * dy.b + b] = dy.data[s..s + hw].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    out
}
