//! Single-head cross-attention from spatial features to text-derived
//! context tokens, with a pre-norm and a residual connection.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{GroupNorm, GroupNormCache, Linear};
use super::{c, path, Elem, Grads, Params};

#[derive(Debug, Clone)]
pub struct AttnBlock<F: Elem> {
    pub norm: GroupNorm<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
}

pub struct AttnCache<F: Elem> {
    gn: GroupNormCache<F>,
    tokens: Array2<F>, // (hw, c)
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>, // (hw, n_ctx), softmax rows
    o: Array2<F>,
    ctx: Array2<F>,
    hw: (usize, usize),
}

impl<F: Elem> AttnBlock<F> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, ctx_dim: usize) -> Self {
        Self {
            norm: GroupNorm::new(channels),
            wq: Linear::new(rng, channels, channels, None),
            wk: Linear::new(rng, ctx_dim, channels, None),
            wv: Linear::new(rng, ctx_dim, channels, None),
            // Small output init keeps the residual branch near-identity at start.
            wo: Linear::new(rng, channels, channels, Some(0.02)),
        }
    }

    pub fn forward(&self, x: &Array3<F>, ctx: &Array2<F>) -> (Array3<F>, AttnCache<F>) {
        let (ch, h, w) = x.dim();
        let (xn, gn) = self.norm.forward(x);
        let tokens = xn
            .into_shape_with_order((ch, h * w))
            .unwrap()
            .t()
            .to_owned(); // (hw, c)
        let q = self.wq.forward(&tokens);
        let k = self.wk.forward(ctx);
        let v = self.wv.forward(ctx);
        let scale = c::<F>(1.0 / (ch as f64).sqrt());
        let mut logits = q.dot(&k.t());
        logits.mapv_inplace(|v| v * scale);
        // Row softmax.
        let mut attn = logits;
        for mut row in attn.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let o = attn.dot(&v);
        let y2 = self.wo.forward(&o); // (hw, c)
        let y_spatial = y2
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ch, h, w))
            .unwrap();
        let y = x + &y_spatial;
        (
            y,
            AttnCache { gn, tokens, q, k, v, attn, o, ctx: ctx.clone(), hw: (h, w) },
        )
    }

    /// Returns (dx, dctx).
    pub fn backward(
        &self,
        name: &str,
        cache: &AttnCache<F>,
        dy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> (Array3<F>, Array2<F>) {
        let (ch, h, w) = dy.dim();
        debug_assert_eq!((h, w), cache.hw);
        let dy2 = dy
            .view()
            .into_shape_with_order((ch, h * w))
            .unwrap()
            .t()
            .to_owned(); // (hw, c)
        let d_o = self.wo.backward(&path(name, "wo"), &cache.o, &dy2, grads);
        let d_attn = d_o.dot(&cache.v.t()); // (hw, n_ctx)
        let d_v = cache.attn.t().dot(&d_o); // (n_ctx, c)

        // Softmax backward row-wise.
        let mut d_logits = Array2::default(d_attn.dim());
        for i in 0..d_attn.dim().0 {
            let a = cache.attn.row(i);
            let da = d_attn.row(i);
            let dot = a.iter().zip(da.iter()).map(|(&x, &y)| x * y).fold(F::zero(), |s, v| s + v);
            for j in 0..a.len() {
                d_logits[[i, j]] = a[j] * (da[j] - dot);
            }
        }
        let scale = c::<F>(1.0 / (ch as f64).sqrt());
        d_logits.mapv_inplace(|v| v * scale);

        let d_q = d_logits.dot(&cache.k);
        let d_k = d_logits.t().dot(&cache.q);
        let d_tokens = self.wq.backward(&path(name, "wq"), &cache.tokens, &d_q, grads);
        let mut d_ctx = self.wk.backward(&path(name, "wk"), &cache.ctx, &d_k, grads);
        d_ctx = d_ctx + self.wv.backward(&path(name, "wv"), &cache.ctx, &d_v, grads);

        let d_xn = d_tokens
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ch, h, w))
            .unwrap();
        let dx_norm = self.norm.backward(&path(name, "norm"), &cache.gn, &d_xn, grads);
        (dy + &dx_norm, d_ctx)
    }
}

impl<F: Elem> Params<F> for AttnBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.norm.visit(&path(prefix, "norm"), f);
        self.wq.visit(&path(prefix, "wq"), f);
        self.wk.visit(&path(prefix, "wk"), f);
        self.wv.visit(&path(prefix, "wv"), f);
        self.wo.visit(&path(prefix, "wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.norm.visit_mut(&path(prefix, "norm"), f);
        self.wq.visit_mut(&path(prefix, "wq"), f);
        self.wk.visit_mut(&path(prefix, "wk"), f);
        self.wv.visit_mut(&path(prefix, "wv"), f);
        self.wo.visit_mut(&path(prefix, "wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_against_fd;
    use crate::nn::randn;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn output_keeps_shape_and_depends_on_ctx() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block: AttnBlock<f64> = AttnBlock::new(&mut rng, 8, 6);
        let x = randn::<f64>(&mut rng, &[8, 4, 4], 1.0).into_dimensionality().unwrap();
        let ctx_a = randn::<f64>(&mut rng, &[3, 6], 1.0).into_dimensionality().unwrap();
        let ctx_b = randn::<f64>(&mut rng, &[3, 6], 1.0).into_dimensionality().unwrap();
        let (ya, _) = block.forward(&x, &ctx_a);
        let (yb, _) = block.forward(&x, &ctx_b);
        assert_eq!(ya.dim(), (8, 4, 4));
        assert_ne!(ya, yb);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block: AttnBlock<f64> = AttnBlock::new(&mut rng, 4, 5);
        // Use a generic output init so wo gradients are well-scaled.
        block.wo = Linear::new(&mut rng, 4, 4, None);
        let x = randn::<f64>(&mut rng, &[4, 3, 3], 1.0).into_dimensionality().unwrap();
        let ctx = randn::<f64>(&mut rng, &[3, 5], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut block,
            |m| {
                let (y, _) = m.forward(&x, &ctx);
                y.iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (y, cache) = m.forward(&x, &ctx);
                let dy = y.mapv(|v| 2.0 * v);
                m.backward("", &cache, &dy, grads);
            },
        );
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn ctx_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block: AttnBlock<f64> = AttnBlock::new(&mut rng, 4, 5);
        let x = randn::<f64>(&mut rng, &[4, 3, 3], 1.0).into_dimensionality().unwrap();
        let mut ctx: Array2<f64> =
            randn::<f64>(&mut rng, &[2, 5], 1.0).into_dimensionality().unwrap();
        let loss = |ctx: &Array2<f64>| {
            let (y, _) = block.forward(&x, ctx);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = block.forward(&x, &ctx);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let (_, dctx) = block.backward("", &cache, &dy, &mut grads);
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (0, 4)] {
            let orig = ctx[idx];
            ctx[idx] = orig + h;
            let lp = loss(&ctx);
            ctx[idx] = orig - h;
            let lm = loss(&ctx);
            ctx[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - dctx[idx]).abs() / fd.abs().max(1.0) < 1e-5,
                "fd {fd} vs {}",
                dctx[idx]
            );
        }
    }
}
