//! Core layers: linear, 3x3 convolution via im2col, group normalization,
//! SiLU, nearest upsampling and channel concat, each with explicit backward.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

use super::{c, kaiming_std, path, randn, Elem, Grads, Params};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer, `y = x W^T + b`, applied row-wise to (n, in) inputs.
#[derive(Debug, Clone)]
pub struct Linear<F: Elem> {
    pub w: Array2<F>, // (out, in)
    pub b: Array1<F>,
}

impl<F: Elem> Linear<F> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, std: Option<f64>) -> Self {
        let std = std.unwrap_or_else(|| kaiming_std(in_dim));
        let w = randn::<F>(rng, &[out_dim, in_dim], std).into_dimensionality().unwrap();
        Self { w, b: Array1::default(out_dim) }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Backward for inputs cached by the caller. Returns dx.
    pub fn backward(&self, name: &str, x: &Array2<F>, dy: &Array2<F>, grads: &mut Grads<F>) -> Array2<F> {
        grads.add(&path(name, "w"), dy.t().dot(x).into_dyn());
        grads.add(&path(name, "b"), dy.sum_axis(Axis(0)).into_dyn());
        dy.dot(&self.w)
    }

    pub fn forward_vec(&self, x: &Array1<F>) -> Array1<F> {
        self.w.dot(x) + &self.b
    }

    pub fn backward_vec(&self, name: &str, x: &Array1<F>, dy: &Array1<F>, grads: &mut Grads<F>) -> Array1<F> {
        let dw = dy
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        grads.add(&path(name, "w"), dw.into_dyn());
        grads.add(&path(name, "b"), dy.clone().into_dyn());
        self.w.t().dot(dy)
    }
}

impl<F: Elem> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&path(prefix, "w"), self.w.view().into_dyn());
        f(&path(prefix, "b"), self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&path(prefix, "w"), self.w.view_mut().into_dyn());
        f(&path(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution over (c, h, w) grids, lowered to a GEMM through im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Elem> {
    pub w: Array4<F>, // (out, in, k, k)
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F: Elem> {
    cols: Array2<F>, // (in*k*k, oh*ow)
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Elem> Conv2d<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: Option<f64>,
    ) -> Self {
        let std = std.unwrap_or_else(|| kaiming_std(in_ch * k * k));
        let w = randn::<F>(rng, &[out_ch, in_ch, k, k], std).into_dimensionality().unwrap();
        Self { w, b: Array1::default(out_ch), stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (ci, h, w) = x.dim();
        let k = self.w.dim().2;
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::default((ci * k * k, oh * ow));
        for ch in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, in_shape: (usize, usize, usize)) -> Array3<F> {
        let (ci, h, w) = in_shape;
        let k = self.w.dim().2;
        let (oh, ow) = self.out_hw(h, w);
        let mut dx = Array3::default((ci, h, w));
        for ch in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ch, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, ConvCache<F>) {
        let (co, ci, k, _) = self.w.dim();
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let w2 = self.w.view().into_shape_with_order((co, ci * k * k)).unwrap();
        let mut y2 = w2.dot(&cols); // (co, oh*ow)
        for (mut row, &b) in y2.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y2.into_shape_with_order((co, oh, ow)).unwrap();
        (y, ConvCache { cols, in_shape: x.dim(), out_hw: (oh, ow) })
    }

    pub fn backward(
        &self,
        name: &str,
        cache: &ConvCache<F>,
        dy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let (co, ci, k, _) = self.w.dim();
        let (oh, ow) = cache.out_hw;
        let dy2 = dy.view().into_shape_with_order((co, oh * ow)).unwrap();
        let dw2 = dy2.dot(&cache.cols.t()); // (co, ci*k*k)
        grads.add(
            &path(name, "w"),
            dw2.into_shape_with_order((co, ci, k, k)).unwrap().into_dyn(),
        );
        grads.add(&path(name, "b"), dy2.sum_axis(Axis(1)).into_dyn());
        let w2 = self.w.view().into_shape_with_order((co, ci * k * k)).unwrap();
        let dcols = w2.t().dot(&dy2);
        self.col2im(&dcols, cache.in_shape)
    }
}

impl<F: Elem> Params<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&path(prefix, "w"), self.w.view().into_dyn());
        f(&path(prefix, "b"), self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&path(prefix, "w"), self.w.view_mut().into_dyn());
        f(&path(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

/// Group normalization over (c, h, w); per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<F: Elem> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache<F: Elem> {
    xhat: Array3<F>,
    inv_std: Vec<F>, // per group
}

/// Largest divisor of `channels` that is <= 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl<F: Elem> GroupNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, c::<F>(1.0)),
            beta: Array1::default(channels),
            groups: norm_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, GroupNormCache<F>) {
        let (ch, h, w) = x.dim();
        let per = ch / self.groups;
        let mut xhat = Array3::default((ch, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let sl = x.slice(s![g * per..(g + 1) * per, .., ..]);
            let n = c::<F>((per * h * w) as f64);
            let mean = sl.sum() / n;
            let var = sl.iter().map(|&v| (v - mean) * (v - mean)).fold(F::zero(), |a, b| a + b) / n;
            let inv = (var + c::<F>(self.eps)).sqrt().recip();
            inv_std.push(inv);
            let mut dst = xhat.slice_mut(s![g * per..(g + 1) * per, .., ..]);
            dst.zip_mut_with(&sl, |d, &v| *d = (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for cc in 0..ch {
            let (gm, bt) = (self.gamma[cc], self.beta[cc]);
            y.slice_mut(s![cc, .., ..]).mapv_inplace(|v| v * gm + bt);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        name: &str,
        cache: &GroupNormCache<F>,
        dy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let (ch, h, w) = dy.dim();
        let per = ch / self.groups;
        let mut dgamma = Array1::<F>::default(ch);
        let mut dbeta = Array1::<F>::default(ch);
        for cc in 0..ch {
            let d = dy.slice(s![cc, .., ..]);
            let xh = cache.xhat.slice(s![cc, .., ..]);
            dbeta[cc] = d.sum();
            dgamma[cc] = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |a, b| a + b);
        }
        grads.add(&path(name, "g"), dgamma.into_dyn());
        grads.add(&path(name, "b"), dbeta.into_dyn());

        // dxhat = dy * gamma; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        let mut dx = Array3::default((ch, h, w));
        for g in 0..self.groups {
            let range = s![g * per..(g + 1) * per, .., ..];
            let xh = cache.xhat.slice(range);
            let d = dy.slice(range);
            let n = c::<F>((per * h * w) as f64);
            let mut dxhat = Array3::default((per, h, w));
            for (i, cc) in (g * per..(g + 1) * per).enumerate() {
                let gm = self.gamma[cc];
                let src = d.slice(s![i, .., ..]);
                dxhat.slice_mut(s![i, .., ..]).zip_mut_with(&src, |o, &v| *o = v * gm);
            }
            let mean_dxhat = dxhat.sum() / n;
            let mean_dxhat_xhat =
                dxhat.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |a, b| a + b) / n;
            let inv = cache.inv_std[g];
            let mut dst = dx.slice_mut(range);
            ndarray::Zip::from(&mut dst).and(&dxhat).and(&xh).for_each(|o, &dxh, &xhv| {
                *o = inv * (dxh - mean_dxhat - xhv * mean_dxhat_xhat);
            });
        }
        dx
    }
}

impl<F: Elem> Params<F> for GroupNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&path(prefix, "g"), self.gamma.view().into_dyn());
        f(&path(prefix, "b"), self.beta.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(&path(prefix, "g"), self.gamma.view_mut().into_dyn());
        f(&path(prefix, "b"), self.beta.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<F: Elem>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

/// `x * sigmoid(x)`, elementwise; returns the input as cache.
pub fn silu<F: Elem, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Backward of SiLU given the original input.
pub fn silu_backward<F: Elem, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (F::one() + v * (F::one() - s)));
    });
    dx
}

// ---------------------------------------------------------------------------
// Nearest 2x upsample
// ---------------------------------------------------------------------------

pub fn upsample2x<F: Elem>(x: &Array3<F>) -> Array3<F> {
    let (ch, h, w) = x.dim();
    let mut y = Array3::default((ch, h * 2, w * 2));
    for cc in 0..ch {
        for yy in 0..h * 2 {
            for xx in 0..w * 2 {
                y[[cc, yy, xx]] = x[[cc, yy / 2, xx / 2]];
            }
        }
    }
    y
}

pub fn upsample2x_backward<F: Elem>(dy: &Array3<F>) -> Array3<F> {
    let (ch, h2, w2) = dy.dim();
    let mut dx = Array3::default((ch, h2 / 2, w2 / 2));
    for cc in 0..ch {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[[cc, yy / 2, xx / 2]] += dy[[cc, yy, xx]];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Channel concat
// ---------------------------------------------------------------------------

pub fn concat_channels<F: Elem>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
}

pub fn split_channels<F: Elem>(x: &Array3<F>, first: usize) -> (Array3<F>, Array3<F>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep embedding
// ---------------------------------------------------------------------------

/// Transformer-style sinusoidal embedding of a scalar timestep.
pub fn sinusoidal_embedding<F: Elem>(t: usize, dim: usize) -> Array1<F> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut e = Array1::default(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = c::<F>(arg.sin());
        e[half + i] = c::<F>(arg.cos());
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_against_fd;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = rng();
        let conv: Conv2d<f64> = Conv2d::new(&mut r, 2, 3, 3, 1, 1, None);
        let x: Array3<f64> =
            randn::<f64>(&mut r, &[2, 5, 4], 1.0).into_dimensionality().unwrap();
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (3, 5, 4));
        // Direct nested-loop oracle.
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..4 {
                    let mut acc = conv.b[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += conv.w[[co, ci, ky, kx]]
                                        * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[co, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_strided_shape() {
        let mut r = rng();
        let conv: Conv2d<f64> = Conv2d::new(&mut r, 1, 2, 3, 2, 1, None);
        let x: Array3<f64> = randn::<f64>(&mut r, &[1, 8, 8], 1.0).into_dimensionality().unwrap();
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 4, 4));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let mut conv: Conv2d<f64> = Conv2d::new(&mut r, 2, 3, 3, 1, 1, None);
        let x: Array3<f64> =
            randn::<f64>(&mut r, &[2, 4, 4], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut conv,
            |m| {
                let (y, _) = m.forward(&x);
                y.iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (y, cache) = m.forward(&x);
                let dy = y.mapv(|v| 2.0 * v);
                m.backward("", &cache, &dy, grads);
            },
        );
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn conv_input_gradient_matches_fd() {
        let mut r = rng();
        let conv: Conv2d<f64> = Conv2d::new(&mut r, 2, 2, 3, 2, 1, None);
        let mut x: Array3<f64> =
            randn::<f64>(&mut r, &[2, 4, 4], 1.0).into_dimensionality().unwrap();
        let loss = |x: &Array3<f64>| {
            let (y, _) = conv.forward(x);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let dx = conv.backward("", &cache, &dy, &mut grads);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 1)] {
            let orig = x[idx];
            x[idx] = orig + h;
            let lp = loss(&x);
            x[idx] = orig - h;
            let lm = loss(&x);
            x[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx[idx]).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn groupnorm_normalizes_groups() {
        let mut r = rng();
        let gn: GroupNorm<f64> = GroupNorm::new(4);
        let x: Array3<f64> =
            randn::<f64>(&mut r, &[4, 6, 6], 3.0).into_dimensionality().unwrap();
        let (y, _) = gn.forward(&x);
        assert_eq!(gn.groups, 4);
        for g in 0..4 {
            let sl = y.slice(s![g..g + 1, .., ..]);
            let n = sl.len() as f64;
            let mean = sl.sum() / n;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut r = rng();
        let mut gn: GroupNorm<f64> = GroupNorm::new(4);
        // Non-trivial affine so gamma/beta gradients are exercised.
        gn.gamma = randn::<f64>(&mut r, &[4], 1.0).into_dimensionality().unwrap();
        gn.beta = randn::<f64>(&mut r, &[4], 1.0).into_dimensionality().unwrap();
        let x: Array3<f64> =
            randn::<f64>(&mut r, &[4, 3, 3], 1.5).into_dimensionality().unwrap();
        let target: Array3<f64> =
            randn::<f64>(&mut r, &[4, 3, 3], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut gn,
            |m| {
                let (y, _) = m.forward(&x);
                (&y - &target).iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (y, cache) = m.forward(&x);
                let dy = (&y - &target).mapv(|v| 2.0 * v);
                m.backward("", &cache, &dy, grads);
            },
        );
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn groupnorm_input_gradient_matches_fd() {
        let mut r = rng();
        let gn: GroupNorm<f64> = GroupNorm::new(2);
        let mut x: Array3<f64> =
            randn::<f64>(&mut r, &[2, 3, 3], 1.0).into_dimensionality().unwrap();
        let target: Array3<f64> =
            randn::<f64>(&mut r, &[2, 3, 3], 1.0).into_dimensionality().unwrap();
        let loss = |x: &Array3<f64>| {
            let (y, _) = gn.forward(x);
            (&y - &target).iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = gn.forward(&x);
        let dy = (&y - &target).mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let dx = gn.backward("", &cache, &dy, &mut grads);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 2), (0, 1, 2)] {
            let orig = x[idx];
            x[idx] = orig + h;
            let lp = loss(&x);
            x[idx] = orig - h;
            let lm = loss(&x);
            x[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - dx[idx]).abs() / fd.abs().max(1.0) < 1e-5,
                "fd {fd} vs analytic {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let mut lin: Linear<f64> = Linear::new(&mut r, 5, 3, None);
        let x: Array2<f64> = randn::<f64>(&mut r, &[4, 5], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut lin,
            |m| {
                let y = m.forward(&x);
                y.iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let y = m.forward(&x);
                let dy = y.mapv(|v| 2.0 * v);
                m.backward("", &x, &dy, grads);
            },
        );
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn silu_backward_matches_fd() {
        let x = ndarray::arr1(&[-2.0f64, -0.5, 0.0, 0.3, 1.7]);
        let dy = ndarray::arr1(&[1.0f64, 1.0, 1.0, 1.0, 1.0]);
        let dx = silu_backward(&x, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (silu(&xp).sum() - silu(&xm).sum()) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_roundtrip_gradient() {
        let mut r = rng();
        let x: Array3<f64> = randn::<f64>(&mut r, &[2, 3, 3], 1.0).into_dimensionality().unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.dim(), (2, 6, 6));
        assert_eq!(y[[1, 5, 5]], x[[1, 2, 2]]);
        // Backward sums each 2x2 block: gradient of sum(y) w.r.t. x is 4.
        let dy = Array3::from_elem((2, 6, 6), 1.0);
        let dx = upsample2x_backward(&dy);
        assert!(dx.iter().all(|&v| (v - 4.0f64).abs() < 1e-12));
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a: Array1<f64> = sinusoidal_embedding(10, 64);
        let b: Array1<f64> = sinusoidal_embedding(11, 64);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
