//! Neural network layers with explicit forward caches and hand-derived
//! backward passes, generic over the scalar type.
//!
//! Convolutions lower to im2col followed by a matrix product, which ndarray
//! dispatches to a fast single-threaded GEMM for f32/f64. Layers hold their
//! parameters and gradient accumulators; forward passes are pure and return
//! a cache that the corresponding backward consumes, so one layer instance
//! can serve several forward passes per step.

use ndarray::{Array1, Array2, Array4, ArrayViewMut1, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Mutable view of one named parameter tensor and its gradient, used by the
/// optimizer and the checkpoint writer. Frozen parameters receive no update.
pub struct ParamSlot<'a, S> {
    pub name: String,
    pub value: ArrayViewMut1<'a, S>,
    pub grad: ArrayViewMut1<'a, S>,
    pub frozen: bool,
}

/// Stable layer initialization: standard normal via Box-Muller scaled by
/// sqrt(2 / fan_in), biases zero.
pub fn he_normal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let scale = (2.0 / fan_in as f64).sqrt();
    normal_vec(rng, n).into_iter().map(|z| S::of(z * scale)).collect()
}

/// Standard normal draws via Box-Muller on uniform f64s, stable across
/// platforms for a given rand_chacha version.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        out.push(r * t.cos());
        if out.len() < n {
            out.push(r * t.sin());
        }
    }
    out
}

pub fn seeded_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

/// Hash a layer name into an init-stream salt.
pub fn name_salt(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Lower (N, C, H, W) to ((N*Ho*Wo), (C*k*k)) patches.
pub fn im2col<S: Scalar>(
    x: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<S>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((n * ho * wo, c * k * k));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * k + ky) * k + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Transpose of im2col: scatter-add patch gradients back onto the input.
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ni, ci, iy as usize, ix as usize]] +=
                                cols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub name: String,
    /// (c_out, c_in, k, k)
    pub weight: Array4<S>,
    pub bias: Array1<S>,
    pub stride: usize,
    pub pad: usize,
    pub grad_weight: Array4<S>,
    pub grad_bias: Array1<S>,
    pub frozen: bool,
}

pub struct ConvCache<S> {
    cols: Array2<S>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let name = name.into();
        let mut rng = seeded_rng(seed, name_salt(&name));
        let fan_in = c_in * k * k;
        let w = he_normal::<S>(&mut rng, c_out * fan_in, fan_in);
        Conv2d {
            weight: Array4::from_shape_vec((c_out, c_in, k, k), w).expect("conv weight shape"),
            bias: Array1::zeros(c_out),
            stride,
            pad,
            grad_weight: Array4::zeros((c_out, c_in, k, k)),
            grad_bias: Array1::zeros(c_out),
            frozen: false,
            name,
        }
    }

    /// Zero weights and bias: used by attention convolutions so masks start
    /// at sigmoid(0) = 0.5.
    pub fn zeroed(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            weight: Array4::zeros((c_out, c_in, k, k)),
            bias: Array1::zeros(c_out),
            stride: 1,
            pad: 0,
            grad_weight: Array4::zeros((c_out, c_in, k, k)),
            grad_bias: Array1::zeros(c_out),
            frozen: false,
        }
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, ConvCache<S>) {
        let (n, c, h, w) = x.dim();
        let c_out = self.weight.dim().0;
        let k = self.weight.dim().2;
        let (cols, ho, wo) = im2col(x, k, self.stride, self.pad);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c * k * k))
            .expect("weight reshape");
        let mut out_mat = cols.dot(&w_mat.t());
        for mut row in out_mat.rows_mut() {
            row += &self.bias;
        }
        let out = out_mat
            .into_shape_with_order((n, ho, wo, c_out))
            .expect("output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            out,
            ConvCache {
                cols,
                in_dim: (n, c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<S>, grad_out: &Array4<S>) -> Array4<S> {
        let (n, c, h, w) = cache.in_dim;
        let (ho, wo) = cache.out_hw;
        let c_out = self.weight.dim().0;
        let k = self.weight.dim().2;
        let g_mat = grad_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * ho * wo, c_out))
            .expect("grad reshape");
        {
            let gw = g_mat.t().dot(&cache.cols);
            let mut gw_acc = self
                .grad_weight
                .view_mut()
                .into_shape_with_order((c_out, c * k * k))
                .expect("grad weight reshape");
            gw_acc += &gw;
            self.grad_bias += &g_mat.sum_axis(Axis(0));
        }
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c * k * k))
            .expect("weight reshape");
        let g_cols = g_mat.dot(&w_mat);
        col2im(&g_cols, n, c, h, w, k, self.stride, self.pad)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let n = self.weight.len();
        let nb = self.bias.len();
        vec![
            ParamSlot {
                name: format!("{}.weight", self.name),
                value: self
                    .weight
                    .view_mut()
                    .into_shape_with_order(n)
                    .expect("flatten"),
                grad: self
                    .grad_weight
                    .view_mut()
                    .into_shape_with_order(n)
                    .expect("flatten"),
                frozen: self.frozen,
            },
            ParamSlot {
                name: format!("{}.bias", self.name),
                value: self
                    .bias
                    .view_mut()
                    .into_shape_with_order(nb)
                    .expect("flatten"),
                grad: self
                    .grad_bias
                    .view_mut()
                    .into_shape_with_order(nb)
                    .expect("flatten"),
                frozen: self.frozen,
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub name: String,
    /// (d_out, d_in)
    pub weight: Array2<S>,
    pub bias: Array1<S>,
    pub grad_weight: Array2<S>,
    pub grad_bias: Array1<S>,
    pub frozen: bool,
}

pub struct LinearCache<S> {
    input: Array2<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, seed: u64) -> Self {
        let name = name.into();
        let mut rng = seeded_rng(seed, name_salt(&name));
        let w = he_normal::<S>(&mut rng, d_out * d_in, d_in);
        Linear {
            weight: Array2::from_shape_vec((d_out, d_in), w).expect("linear weight shape"),
            bias: Array1::zeros(d_out),
            grad_weight: Array2::zeros((d_out, d_in)),
            grad_bias: Array1::zeros(d_out),
            frozen: false,
            name,
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LinearCache<S>) {
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        (out, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<S>, grad_out: &Array2<S>) -> Array2<S> {
        self.grad_weight += &grad_out.t().dot(&cache.input);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, S>> {
        let n = self.weight.len();
        let nb = self.bias.len();
        vec![
            ParamSlot {
                name: format!("{}.weight", self.name),
                value: self
                    .weight
                    .view_mut()
                    .into_shape_with_order(n)
                    .expect("flatten"),
                grad: self
                    .grad_weight
                    .view_mut()
                    .into_shape_with_order(n)
                    .expect("flatten"),
                frozen: self.frozen,
            },
            ParamSlot {
                name: format!("{}.bias", self.name),
                value: self
                    .bias
                    .view_mut()
                    .into_shape_with_order(nb)
                    .expect("flatten"),
                grad: self
                    .grad_bias
                    .view_mut()
                    .into_shape_with_order(nb)
                    .expect("flatten"),
                frozen: self.frozen,
            },
        ]
    }
}

/// Elementwise SiLU over a 4-d feature tensor. SiLU is smooth and fixes
/// silu(0) = 0, which keeps the zero-input identity of bias-free stacks and
/// makes finite-difference gradient checks clean.
pub struct SiluCache<S> {
    input: Array4<S>,
}

pub fn silu_forward<S: Scalar>(x: &Array4<S>) -> (Array4<S>, SiluCache<S>) {
    (x.mapv(silu), SiluCache { input: x.clone() })
}

pub fn silu_backward<S: Scalar>(cache: &SiluCache<S>, grad_out: &Array4<S>) -> Array4<S> {
    let mut g = cache.input.mapv(silu_grad);
    g *= grad_out;
    g
}

/// Global average pool (N, C, H, W) -> (N, C).
pub fn gap_forward<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let denom = S::of((h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::zero();
            for y in 0..h {
                for xj in 0..w {
                    acc += x[[ni, ci, y, xj]];
                }
            }
            out[[ni, ci]] = acc / denom;
        }
    }
    out
}

pub fn gap_backward<S: Scalar>(
    grad_out: &Array2<S>,
    h: usize,
    w: usize,
) -> Array4<S> {
    let (n, c) = grad_out.dim();
    let denom = S::of((h * w) as f64);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out[[ni, ci]] / denom;
            for y in 0..h {
                for xj in 0..w {
                    gx[[ni, ci, y, xj]] = g;
                }
            }
        }
    }
    gx
}

/// Central-difference gradient verdict for one coordinate.
pub fn grad_close(analytic: f64, numeric: f64, rtol: f64) -> bool {
    (analytic - numeric).abs() <= rtol * analytic.abs().max(numeric.abs()) + 1e-8
}

/// Check an analytic gradient against central finite differences.
///
/// `loss` must be a deterministic function of the parameter vector. Returns
/// the first failing coordinate as (index, analytic, numeric).
pub fn check_gradient(
    loss: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    step: f64,
    rtol: f64,
) -> std::result::Result<(), (usize, f64, f64)> {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        if !grad_close(analytic[i], numeric, rtol) {
            return Err((i, analytic[i], numeric));
        }
    }
    Ok(())
}
