//! Symmetric U-Net noise predictor over 6-channel grid images with a
//! sinusoidal timestep embedding, forward and exact reverse-mode gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    add_channel_bias, channel_sums, conv3x3, conv3x3_backward, group_norm, group_norm_backward,
    linear, linear_backward, silu, silu_backward, silu_vec, silu_vec_backward, upsample2,
    upsample2_backward, GroupNormCache, Real, Tensor,
};

#[derive(Debug, Error, PartialEq)]
pub enum UNetError {
    #[error("invalid U-Net configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Spatial size after zero padding; multiple of `2^depth`.
    pub pad_to: usize,
    /// Group-norm groups per block; 0 disables normalization.
    pub groups: usize,
}

impl UNetConfig {
    /// Default architecture for an `n`-bus image.
    pub fn for_size(n: usize, base_width: usize, depth: usize) -> Self {
        let m = 1 << depth;
        UNetConfig {
            in_channels: crate::dataset::CHANNELS,
            base_width,
            depth,
            time_embed_dim: 64,
            pad_to: n.div_ceil(m) * m,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let bad = |s: &str| Err(UNetError::BadConfig(s.to_string()));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.base_width < 8 {
            return bad("base_width must be at least 8");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2");
        }
        if self.pad_to == 0 || self.pad_to % (1 << self.depth) != 0 {
            return bad("pad_to must be a positive multiple of 2^depth");
        }
        if self.groups > 0 && (0..=self.depth).any(|l| self.width(l) % self.groups != 0) {
            return bad("groups must divide every level width");
        }
        Ok(())
    }

    /// Channel width at encoder level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![("enc0".to_string(), self.in_channels, self.width(0))];
        for l in 1..=self.depth {
            out.push((format!("enc{l}"), self.width(l - 1), self.width(l)));
        }
        out.push(("mid".to_string(), self.width(self.depth), self.width(self.depth)));
        for l in (0..self.depth).rev() {
            out.push((format!("dec{l}"), self.width(l + 1) + self.width(l), self.width(l)));
        }
        out
    }

    /// Parameter tensors as `(name, shape)` in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.time_embed_dim;
        let mut v = vec![
            ("time.w".to_string(), vec![d, d]),
            ("time.b".to_string(), vec![d]),
        ];
        for l in 1..=self.depth {
            let c = self.width(l - 1);
            v.push((format!("down{l}.w"), vec![c, c, 3, 3]));
            v.push((format!("down{l}.b"), vec![c]));
        }
        for (name, cin, cout) in self.blocks() {
            v.push((format!("{name}.conv.w"), vec![cout, cin, 3, 3]));
            v.push((format!("{name}.conv.b"), vec![cout]));
            if self.groups > 0 {
                v.push((format!("{name}.norm.g"), vec![cout]));
                v.push((format!("{name}.norm.b"), vec![cout]));
            }
            v.push((format!("{name}.temb.w"), vec![cout, d]));
            v.push((format!("{name}.temb.b"), vec![cout]));
        }
        v.push(("out.w".to_string(), vec![self.in_channels, self.width(0), 3, 3]));
        v.push(("out.b".to_string(), vec![self.in_channels]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Named parameter tensors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: UNetConfig,
    pub specs: Vec<ParamSpec>,
    pub data: Vec<T>,
}

fn layout(config: &UNetConfig) -> (Vec<ParamSpec>, usize) {
    let mut offset = 0;
    let specs = config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product();
            let s = ParamSpec {
                name,
                shape,
                offset,
                len,
            };
            offset += len;
            s
        })
        .collect();
    (specs, offset)
}

impl<T: Real> DenoiserParams<T> {
    pub fn zeros(config: &UNetConfig) -> Result<Self, UNetError> {
        config.validate()?;
        let (specs, total) = layout(config);
        Ok(DenoiserParams {
            config: config.clone(),
            specs,
            data: vec![T::zero(); total],
        })
    }

    /// Fan-in scaled uniform initialization; norm gains start at one.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self, UNetError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in p.specs.clone() {
            let slice = &mut p.data[spec.offset..spec.offset + spec.len];
            if spec.name.ends_with(".norm.g") {
                slice.fill(T::one());
            } else if spec.shape.len() > 1 {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                for v in slice {
                    *v = T::of(dist.sample(&mut rng));
                }
            }
        }
        Ok(p)
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> &[T] {
        let s = self.spec(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [T] {
        let s = self.spec(name).unwrap_or_else(|| panic!("no parameter {name}")).clone();
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            specs: self.specs.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Splits a flat gradient into named tensors, omitting `frozen` names.
    pub fn named_grads(&self, grad: &[T], frozen: &[&str]) -> BTreeMap<String, Vec<T>> {
        self.specs
            .iter()
            .filter(|s| !frozen.contains(&s.name.as_str()))
            .map(|s| (s.name.clone(), grad[s.offset..s.offset + s.len].to_vec()))
            .collect()
    }
}

/// Sinusoidal embedding `[D, B]` of integer timesteps.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let b = ts.len();
    let mut out = vec![T::zero(); dim * b];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        for (j, &t) in ts.iter().enumerate() {
            let a = t as f64 * freq;
            out[k * b + j] = T::of(a.sin());
            out[(k + half) * b + j] = T::of(a.cos());
        }
    }
    out
}

struct BlockCache<T> {
    input: Tensor<T>,
    norm: Option<GroupNormCache<T>>,
    pre: Tensor<T>,
}

struct Cache<T> {
    emb: Vec<T>,
    temb_pre: Vec<T>,
    temb: Vec<T>,
    blocks: BTreeMap<String, BlockCache<T>>,
    down_in: Vec<Tensor<T>>,
    up_in: Vec<Tensor<T>>,
    out_in: Tensor<T>,
    batch: usize,
    n: usize,
}

impl<T: Real> DenoiserParams<T> {
    fn block(
        &self,
        name: &str,
        x: Tensor<T>,
        temb: &[T],
        cache: Option<&mut BTreeMap<String, BlockCache<T>>>,
    ) -> Tensor<T> {
        let batch = x.b;
        let mut h = conv3x3(
            &x,
            self.get(&format!("{name}.conv.w")),
            self.get(&format!("{name}.conv.b")),
            1,
        );
        let mut norm = None;
        if self.config.groups > 0 {
            let (y, c) = group_norm(
                &h,
                self.config.groups,
                self.get(&format!("{name}.norm.g")),
                self.get(&format!("{name}.norm.b")),
            );
            h = y;
            norm = Some(c);
        }
        let proj = linear(
            temb,
            batch,
            self.get(&format!("{name}.temb.w")),
            self.get(&format!("{name}.temb.b")),
        );
        add_channel_bias(&mut h, &proj);
        let out = silu(&h);
        if let Some(c) = cache {
            c.insert(
                name.to_string(),
                BlockCache {
                    input: x,
                    norm,
                    pre: h,
                },
            );
        }
        out
    }

    fn block_backward(
        &self,
        name: &str,
        c: &BlockCache<T>,
        dy: &Tensor<T>,
        temb: &[T],
        dtemb: &mut [T],
        grad: &mut [T],
    ) -> Tensor<T> {
        let batch = dy.b;
        let dpre = silu_backward(&c.pre, dy);
        let dproj = channel_sums(&dpre);
        let (tw, tb) = self.grad_pair(name, "temb");
        let (dw, db) = split_two(grad, tw, tb);
        let dt = linear_backward(temb, batch, self.get(&format!("{name}.temb.w")), &dproj, dw, db);
        for (a, b) in dtemb.iter_mut().zip(dt) {
            *a = *a + b;
        }
        let dconv = match &c.norm {
            Some(nc) => {
                let (ng, nb) = self.grad_pair(name, "norm");
                let gamma = self.get(&format!("{name}.norm.g"));
                let (dg, dbeta) = split_two(grad, ng, nb);
                group_norm_backward(nc, self.config.groups, gamma, &dpre, dg, dbeta)
            }
            None => dpre,
        };
        let (cw, cb) = self.grad_pair(name, "conv");
        let weight = self.get(&format!("{name}.conv.w"));
        let (dw, db) = split_two(grad, cw, cb);
        conv3x3_backward(&c.input, weight, &dconv, 1, dw, db)
    }

    /// Ranges of `{name}.{part}.w|g` and `{name}.{part}.b`.
    fn grad_pair(&self, name: &str, part: &str) -> (ParamSpec, ParamSpec) {
        let first = if part == "norm" { "g" } else { "w" };
        let a = self.spec(&format!("{name}.{part}.{first}")).unwrap().clone();
        let b = self.spec(&format!("{name}.{part}.b")).unwrap().clone();
        (a, b)
    }

    fn check_input(&self, x: &Tensor<T>, ts: &[usize]) -> Result<(), UNetError> {
        let cfg = &self.config;
        if x.c != cfg.in_channels || x.h != x.w || x.h > cfg.pad_to || x.h == 0 || ts.len() != x.b {
            return Err(UNetError::ShapeMismatch {
                expected: format!(
                    "[{}, {}, n, n] with n <= {}",
                    cfg.in_channels,
                    ts.len(),
                    cfg.pad_to
                ),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    fn forward_impl(&self, x: &Tensor<T>, ts: &[usize], mut cache: Option<&mut Cache<T>>) -> Tensor<T> {
        let cfg = &self.config;
        let (n, batch, p) = (x.h, x.b, cfg.pad_to);
        let d = cfg.time_embed_dim;

        let emb = timestep_embedding::<T>(ts, d);
        let temb_pre = linear(&emb, batch, self.get("time.w"), self.get("time.b"));
        let temb = silu_vec(&temb_pre);

        let mut padded = Tensor::zeros(x.c, batch, p, p);
        for c in 0..x.c {
            for b in 0..batch {
                for y in 0..n {
                    let s = x.idx(c, b, y, 0);
                    let dst = padded.idx(c, b, y, 0);
                    padded.data[dst..dst + n].copy_from_slice(&x.data[s..s + n]);
                }
            }
        }

        let mut blocks = BTreeMap::new();
        let mut bc = if cache.is_some() { Some(&mut blocks) } else { None };
        let mut down_in = Vec::new();
        let mut up_in = Vec::new();

        let mut skips = Vec::with_capacity(cfg.depth + 1);
        let mut h = self.block("enc0", padded, &temb, bc.as_deref_mut());
        for l in 1..=cfg.depth {
            skips.push(h.clone());
            let down = conv3x3(&h, self.get(&format!("down{l}.w")), self.get(&format!("down{l}.b")), 2);
            if bc.is_some() {
                down_in.push(h);
            }
            let down = silu(&down);
            // Keep the pre-activation for backward by recomputing; cheap enough.
            h = self.block(&format!("enc{l}"), down, &temb, bc.as_deref_mut());
        }
        h = self.block("mid", h, &temb, bc.as_deref_mut());
        for l in (0..cfg.depth).rev() {
            let up = upsample2(&h);
            if bc.is_some() {
                up_in.push(h);
            }
            let cat = up.concat(&skips[l]);
            h = self.block(&format!("dec{l}"), cat, &temb, bc.as_deref_mut());
        }
        let out_full = conv3x3(&h, self.get("out.w"), self.get("out.b"), 1);

        let mut out = Tensor::zeros(x.c, batch, n, n);
        for c in 0..x.c {
            for b in 0..batch {
                for y in 0..n {
                    let s = out_full.idx(c, b, y, 0);
                    let dst = out.idx(c, b, y, 0);
                    out.data[dst..dst + n].copy_from_slice(&out_full.data[s..s + n]);
                }
            }
        }

        if let Some(c) = cache.as_deref_mut() {
            *c = Cache {
                emb,
                temb_pre,
                temb,
                blocks,
                down_in,
                up_in,
                out_in: h,
                batch,
                n,
            };
        }
        out
    }

    /// Predicted noise for a batch `[C, B, n, n]` at timesteps `ts` (one per
    /// batch entry).
    pub fn forward(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, UNetError> {
        self.check_input(x, ts)?;
        Ok(self.forward_impl(x, ts, None))
    }

    /// Runs forward then backpropagates `upstream(eps_hat)`; returns the
    /// output and the flat parameter gradient.
    pub fn forward_backward<F>(
        &self,
        x: &Tensor<T>,
        ts: &[usize],
        upstream: F,
    ) -> Result<(Tensor<T>, Vec<T>), UNetError>
    where
        F: FnOnce(&Tensor<T>) -> Tensor<T>,
    {
        self.check_input(x, ts)?;
        let mut cache = Cache {
            emb: vec![],
            temb_pre: vec![],
            temb: vec![],
            blocks: BTreeMap::new(),
            down_in: vec![],
            up_in: vec![],
            out_in: Tensor::zeros(0, 0, 0, 0),
            batch: 0,
            n: 0,
        };
        let out = self.forward_impl(x, ts, Some(&mut cache));
        let dy = upstream(&out);
        if dy.shape() != out.shape() {
            return Err(UNetError::ShapeMismatch {
                expected: format!("{:?}", out.shape()),
                got: format!("{:?}", dy.shape()),
            });
        }
        Ok((out, self.backward(&cache, &dy)))
    }

    fn backward(&self, cache: &Cache<T>, dy: &Tensor<T>) -> Vec<T> {
        let cfg = &self.config;
        let (n, batch, p) = (cache.n, cache.batch, cfg.pad_to);
        let mut grad = vec![T::zero(); self.data.len()];
        let mut dtemb = vec![T::zero(); cfg.time_embed_dim * batch];

        let mut dfull = Tensor::zeros(dy.c, batch, p, p);
        for c in 0..dy.c {
            for b in 0..batch {
                for y in 0..n {
                    let s = dy.idx(c, b, y, 0);
                    let dst = dfull.idx(c, b, y, 0);
                    dfull.data[dst..dst + n].copy_from_slice(&dy.data[s..s + n]);
                }
            }
        }
        let (ow, ob) = (self.spec("out.w").unwrap().clone(), self.spec("out.b").unwrap().clone());
        let (dw, db) = split_two(&mut grad, ow, ob);
        let mut dh = conv3x3_backward(&cache.out_in, self.get("out.w"), &dfull, 1, dw, db);

        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; cfg.depth + 1];
        for (k, l) in (0..cfg.depth).enumerate() {
            let name = format!("dec{l}");
            let dcat = self.block_backward(&name, &cache.blocks[&name], &dh, &cache.temb, &mut dtemb, &mut grad);
            let up_c = cache.up_in[cfg.depth - 1 - k].c;
            let (dup, dskip) = dcat.split(up_c);
            dskips[l] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        dh = self.block_backward("mid", &cache.blocks["mid"], &dh, &cache.temb, &mut dtemb, &mut grad);
        for l in (1..=cfg.depth).rev() {
            let name = format!("enc{l}");
            let bc = &cache.blocks[&name];
            let ddown = self.block_backward(&name, bc, &dh, &cache.temb, &mut dtemb, &mut grad);
            // `bc.input` is silu(down_pre); recompute the pre-activation.
            let hin = &cache.down_in[l - 1];
            let down_pre = conv3x3(hin, self.get(&format!("down{l}.w")), self.get(&format!("down{l}.b")), 2);
            let dpre = silu_backward(&down_pre, &ddown);
            let (sw, sb) = (
                self.spec(&format!("down{l}.w")).unwrap().clone(),
                self.spec(&format!("down{l}.b")).unwrap().clone(),
            );
            let (dw, db) = split_two(&mut grad, sw, sb);
            dh = conv3x3_backward(hin, self.get(&format!("down{l}.w")), &dpre, 2, dw, db);
            if let Some(ds) = dskips[l - 1].take() {
                dh.add_assign(&ds);
            }
        }
        let _ = self.block_backward("enc0", &cache.blocks["enc0"], &dh, &cache.temb, &mut dtemb, &mut grad);

        let dpre = silu_vec_backward(&cache.temb_pre, &dtemb);
        let (tw, tb) = (self.spec("time.w").unwrap().clone(), self.spec("time.b").unwrap().clone());
        let (dw, db) = split_two(&mut grad, tw, tb);
        let _ = linear_backward(&cache.emb, batch, self.get("time.w"), &dpre, dw, db);
        grad
    }
}

/// Disjoint mutable views of two parameter ranges, `a` stored before `b`.
fn split_two<'a, T>(grad: &'a mut [T], a: ParamSpec, b: ParamSpec) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.offset + a.len <= b.offset);
    let (lo, hi) = grad.split_at_mut(b.offset);
    (&mut lo[a.offset..a.offset + a.len], &mut hi[..b.len])
}

/// Mean squared error over all elements and its gradient.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    let count = T::of(pred.data.len() as f64);
    let mut grad = pred.clone();
    let mut loss = T::zero();
    for (g, &t) in grad.data.iter_mut().zip(&target.data) {
        let d = *g - t;
        loss = loss + d * d;
        *g = (d + d) / count;
    }
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 6,
            base_width: 8,
            depth: 1,
            time_embed_dim: 8,
            pad_to: 6,
            groups: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.pad_to = 7;
        assert!(c.validate().is_err());
        c = tiny();
        c.base_width = 4;
        assert!(c.validate().is_err());
        c = tiny();
        c.groups = 3;
        assert!(c.validate().is_err());
        assert_eq!(UNetConfig::for_size(14, 32, 2).pad_to, 16);
        assert_eq!(UNetConfig::for_size(30, 32, 2).pad_to, 32);
        assert_eq!(UNetConfig::for_size(6, 32, 2).pad_to, 8);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = DenoiserParams::<f64>::zeros(&tiny()).unwrap();
        let mut x = Tensor::zeros(6, 2, 6, 6);
        x.data.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64);
        let y = p.forward(&x, &[1, 5]).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_input() {
        let p = DenoiserParams::<f64>::init(&tiny(), 0).unwrap();
        let x = Tensor::zeros(6, 1, 8, 8);
        assert!(matches!(p.forward(&x, &[1]), Err(UNetError::ShapeMismatch { .. })));
    }

    #[test]
    fn embedding_distinguishes_timesteps() {
        let e = timestep_embedding::<f64>(&[1, 2], 8);
        assert!((0..8).any(|k| (e[k * 2] - e[k * 2 + 1]).abs() > 1e-3));
    }
}
