//! Conditional U-Net noise predictor.
//!
//! Input is the channel concatenation of the noisy mask latent and the image
//! latent. The timestep enters through a sinusoidal embedding projected by a
//! two-layer MLP and added per-channel inside every residual block; the text
//! embedding is projected by a small MLP into a handful of context tokens
//! that the cross-attention blocks at the configured scales attend to.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::attention::{AttnBlock, AttnCache};
use crate::nn::layers::{
    concat_channels, silu, silu_backward, sinusoidal_embedding, split_channels, upsample2x,
    upsample2x_backward, Conv2d, ConvCache, GroupNorm, GroupNormCache, Linear,
};
use crate::nn::{path, Elem, Grads, Params};

/// Architecture hyperparameters resolved to concrete channel counts.
#[derive(Debug, Clone)]
pub struct UNetShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub t_embed_dim: usize,
    pub d_text: usize,
    /// Downsampling factors (1, 2, 4, ...) whose stages get cross-attention.
    pub attn_scales: Vec<usize>,
    pub n_ctx: usize,
}

impl UNetShape {
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn time_dim(&self) -> usize {
        self.t_embed_dim * 2
    }

    pub fn ctx_dim(&self) -> usize {
        self.d_text
    }

    fn has_attn(&self, factor: usize) -> bool {
        self.attn_scales.contains(&factor)
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock<F: Elem> {
    gn1: GroupNorm<F>,
    conv1: Conv2d<F>,
    time_proj: Linear<F>,
    gn2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

pub struct ResCache<F: Elem> {
    gn1: GroupNormCache<F>,
    n1: Array3<F>,
    conv1: ConvCache<F>,
    gn2: GroupNormCache<F>,
    n2: Array3<F>,
    conv2: ConvCache<F>,
    skip: Option<ConvCache<F>>,
}

impl<F: Elem> ResBlock<F> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, time_dim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(c_in),
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1, None),
            time_proj: Linear::new(rng, time_dim, c_out, None),
            gn2: GroupNorm::new(c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1, None),
            skip: (c_in != c_out).then(|| Conv2d::new(rng, c_in, c_out, 1, 1, 0, None)),
        }
    }

    pub fn forward(&self, x: &Array3<F>, silu_temb: &Array1<F>) -> (Array3<F>, ResCache<F>) {
        let (n1, gn1) = self.gn1.forward(x);
        let a1 = silu(&n1);
        let (mut h, conv1) = self.conv1.forward(&a1);
        let tb = self.time_proj.forward_vec(silu_temb);
        for (mut plane, &b) in h.axis_iter_mut(Axis(0)).zip(tb.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
        let (n2, gn2) = self.gn2.forward(&h);
        let a2 = silu(&n2);
        let (y2, conv2) = self.conv2.forward(&a2);
        let (y, skip_cache) = match &self.skip {
            Some(sk) => {
                let (s, cache) = sk.forward(x);
                (y2 + &s, Some(cache))
            }
            None => (y2 + x, None),
        };
        (y, ResCache { gn1, n1, conv1, gn2, n2, conv2, skip: skip_cache })
    }

    /// Returns (dx, d_silu_temb).
    pub fn backward(
        &self,
        name: &str,
        cache: &ResCache<F>,
        silu_temb: &Array1<F>,
        dy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> (Array3<F>, Array1<F>) {
        let da2 = self.conv2.backward(&path(name, "conv2"), &cache.conv2, dy, grads);
        let dn2 = silu_backward(&cache.n2, &da2);
        let dh = self.gn2.backward(&path(name, "gn2"), &cache.gn2, &dn2, grads);
        let dtb = dh.sum_axis(Axis(2)).sum_axis(Axis(1));
        let d_silu_temb =
            self.time_proj.backward_vec(&path(name, "time_proj"), silu_temb, &dtb, grads);
        let da1 = self.conv1.backward(&path(name, "conv1"), &cache.conv1, &dh, grads);
        let dn1 = silu_backward(&cache.n1, &da1);
        let mut dx = self.gn1.backward(&path(name, "gn1"), &cache.gn1, &dn1, grads);
        match (&self.skip, &cache.skip) {
            (Some(sk), Some(sc)) => {
                dx = dx + sk.backward(&path(name, "skip"), sc, dy, grads);
            }
            _ => dx = dx + dy,
        }
        (dx, d_silu_temb)
    }
}

impl<F: Elem> Params<F> for ResBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.gn1.visit(&path(prefix, "gn1"), f);
        self.conv1.visit(&path(prefix, "conv1"), f);
        self.time_proj.visit(&path(prefix, "time_proj"), f);
        self.gn2.visit(&path(prefix, "gn2"), f);
        self.conv2.visit(&path(prefix, "conv2"), f);
        if let Some(sk) = &self.skip {
            sk.visit(&path(prefix, "skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.gn1.visit_mut(&path(prefix, "gn1"), f);
        self.conv1.visit_mut(&path(prefix, "conv1"), f);
        self.time_proj.visit_mut(&path(prefix, "time_proj"), f);
        self.gn2.visit_mut(&path(prefix, "gn2"), f);
        self.conv2.visit_mut(&path(prefix, "conv2"), f);
        if let Some(sk) = &mut self.skip {
            sk.visit_mut(&path(prefix, "skip"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

struct EncStage<F: Elem> {
    res: ResBlock<F>,
    attn: Option<AttnBlock<F>>,
    down: Conv2d<F>,
}

struct DecStage<F: Elem> {
    upconv: Conv2d<F>,
    res: ResBlock<F>,
    attn: Option<AttnBlock<F>>,
}

pub struct CondUNet<F: Elem> {
    pub shape: UNetShape,
    conv_in: Conv2d<F>,
    time_l1: Linear<F>,
    time_l2: Linear<F>,
    ctx_l1: Linear<F>,
    ctx_l2: Linear<F>,
    enc: Vec<EncStage<F>>,
    mid_res1: ResBlock<F>,
    mid_attn: Option<AttnBlock<F>>,
    mid_res2: ResBlock<F>,
    dec: Vec<DecStage<F>>, // stored in execution order: coarsest first
    out_norm: GroupNorm<F>,
    out_conv: Conv2d<F>,
}

pub struct UNetCache<F: Elem> {
    temb_sin: Array1<F>,
    t1: Array1<F>,
    t1a: Array1<F>,
    t2: Array1<F>,
    silu_temb: Array1<F>,
    text: Array1<F>,
    c1: Array1<F>,
    c1a: Array1<F>,
    ctx: Array2<F>,
    conv_in: ConvCache<F>,
    enc: Vec<(ResCache<F>, Option<AttnCache<F>>, ConvCache<F>)>,
    mid: (ResCache<F>, Option<AttnCache<F>>, ResCache<F>),
    dec: Vec<(ConvCache<F>, Array3<F>, ResCache<F>, Option<AttnCache<F>>)>,
    out_gn: GroupNormCache<F>,
    out_n: Array3<F>,
    out_conv: ConvCache<F>,
}

impl<F: Elem> CondUNet<F> {
    pub fn new(rng: &mut ChaCha8Rng, shape: UNetShape) -> Self {
        assert!(shape.depth >= 1, "unet needs at least one downsampling stage");
        let time_dim = shape.time_dim();
        let ctx_dim = shape.ctx_dim();
        let w0 = shape.width(0);

        let conv_in = Conv2d::new(rng, shape.in_channels, w0, 3, 1, 1, None);
        let time_l1 = Linear::new(rng, shape.t_embed_dim, time_dim, None);
        let time_l2 = Linear::new(rng, time_dim, time_dim, None);
        let ctx_l1 = Linear::new(rng, shape.d_text, time_dim, None);
        let ctx_l2 = Linear::new(rng, time_dim, shape.n_ctx * ctx_dim, None);

        let mut enc = Vec::new();
        for i in 0..shape.depth {
            let w = shape.width(i);
            enc.push(EncStage {
                res: ResBlock::new(rng, w, w, time_dim),
                attn: shape
                    .has_attn(1 << i)
                    .then(|| AttnBlock::new(rng, w, ctx_dim)),
                down: Conv2d::new(rng, w, shape.width(i + 1), 3, 2, 1, None),
            });
        }
        let wd = shape.width(shape.depth);
        let mid_res1 = ResBlock::new(rng, wd, wd, time_dim);
        let mid_attn = shape
            .has_attn(1 << shape.depth)
            .then(|| AttnBlock::new(rng, wd, ctx_dim));
        let mid_res2 = ResBlock::new(rng, wd, wd, time_dim);

        let mut dec = Vec::new();
        for i in (0..shape.depth).rev() {
            let w = shape.width(i);
            dec.push(DecStage {
                upconv: Conv2d::new(rng, shape.width(i + 1), w, 3, 1, 1, None),
                res: ResBlock::new(rng, 2 * w, w, time_dim),
                attn: shape
                    .has_attn(1 << i)
                    .then(|| AttnBlock::new(rng, w, ctx_dim)),
            });
        }

        let out_norm = GroupNorm::new(w0);
        // Small output init: the net starts near zero noise prediction.
        let out_conv = Conv2d::new(rng, w0, shape.out_channels, 3, 1, 1, Some(0.01));

        Self {
            shape,
            conv_in,
            time_l1,
            time_l2,
            ctx_l1,
            ctx_l2,
            enc,
            mid_res1,
            mid_attn,
            mid_res2,
            dec,
            out_norm,
            out_conv,
        }
    }

    pub fn forward(&self, z: &Array3<F>, t_net: usize, text: &Array1<F>) -> (Array3<F>, UNetCache<F>) {
        let temb_sin = sinusoidal_embedding::<F>(t_net, self.shape.t_embed_dim);
        let t1 = self.time_l1.forward_vec(&temb_sin);
        let t1a = silu(&t1);
        let t2 = self.time_l2.forward_vec(&t1a);
        let silu_temb = silu(&t2);

        let c1 = self.ctx_l1.forward_vec(text);
        let c1a = silu(&c1);
        let c2 = self.ctx_l2.forward_vec(&c1a);
        let ctx = c2
            .into_shape_with_order((self.shape.n_ctx, self.shape.ctx_dim()))
            .unwrap();

        let (mut x, conv_in) = self.conv_in.forward(z);
        let mut enc_caches = Vec::new();
        let mut skips = Vec::new();
        for stage in &self.enc {
            let (h, res_c) = stage.res.forward(&x, &silu_temb);
            x = h;
            let attn_c = match &stage.attn {
                Some(a) => {
                    let (h, c) = a.forward(&x, &ctx);
                    x = h;
                    Some(c)
                }
                None => None,
            };
            skips.push(x.clone());
            let (h, down_c) = stage.down.forward(&x);
            x = h;
            enc_caches.push((res_c, attn_c, down_c));
        }

        let (h, mid1_c) = self.mid_res1.forward(&x, &silu_temb);
        x = h;
        let mid_attn_c = match &self.mid_attn {
            Some(a) => {
                let (h, c) = a.forward(&x, &ctx);
                x = h;
                Some(c)
            }
            None => None,
        };
        let (h, mid2_c) = self.mid_res2.forward(&x, &silu_temb);
        x = h;

        let mut dec_caches = Vec::new();
        for stage in &self.dec {
            let up = upsample2x(&x);
            let (u, up_c) = stage.upconv.forward(&up);
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = concat_channels(&u, &skip);
            let (h, res_c) = stage.res.forward(&cat, &silu_temb);
            x = h;
            let attn_c = match &stage.attn {
                Some(a) => {
                    let (h, c) = a.forward(&x, &ctx);
                    x = h;
                    Some(c)
                }
                None => None,
            };
            dec_caches.push((up_c, up, res_c, attn_c));
        }

        let (n, out_gn) = self.out_norm.forward(&x);
        let a = silu(&n);
        let (y, out_conv) = self.out_conv.forward(&a);

        (
            y,
            UNetCache {
                temb_sin,
                t1,
                t1a,
                t2,
                silu_temb,
                text: text.clone(),
                c1,
                c1a,
                ctx,
                conv_in,
                enc: enc_caches,
                mid: (mid1_c, mid_attn_c, mid2_c),
                dec: dec_caches,
                out_gn,
                out_n: n,
                out_conv,
            },
        )
    }

    /// Backpropagate `dy` and accumulate parameter gradients. Returns the
    /// gradient with respect to the (concatenated) input latents.
    pub fn backward(&self, cache: &UNetCache<F>, dy: &Array3<F>, grads: &mut Grads<F>) -> Array3<F> {
        let st = &cache.silu_temb;
        let mut d_st = Array1::<F>::default(st.len());
        let mut d_ctx = Array2::<F>::default(cache.ctx.dim());

        let da = self.out_conv.backward("out.conv", &cache.out_conv, dy, grads);
        let dn = silu_backward(&cache.out_n, &da);
        let mut dx = self.out_norm.backward("out.norm", &cache.out_gn, &dn, grads);

        let mut d_skips: Vec<Array3<F>> = Vec::new();
        for (i, (stage, (up_c, up_in, res_c, attn_c))) in
            self.dec.iter().zip(cache.dec.iter()).enumerate().rev()
        {
            let stage_idx = self.shape.depth - 1 - i; // resolution index
            let name = format!("dec{stage_idx}");
            if let (Some(a), Some(ac)) = (&stage.attn, attn_c) {
                let (dh, dc) = a.backward(&path(&name, "attn"), ac, &dx, grads);
                dx = dh;
                d_ctx = d_ctx + dc;
            }
            let (dcat, dst) = stage.res.backward(&path(&name, "res"), res_c, st, &dx, grads);
            d_st = d_st + dst;
            let w = self.shape.width(stage_idx);
            let (du, dskip) = split_channels(&dcat, w);
            d_skips.push(dskip);
            let dup = stage.upconv.backward(&path(&name, "up"), up_c, &du, grads);
            debug_assert_eq!(dup.dim(), up_in.dim());
            dx = upsample2x_backward(&dup);
        }
        // d_skips now holds decoder-stage skip grads from coarsest to finest
        // resolution index order depth-1..0 reversed by the rev() above:
        // iteration went dec.last() (finest) first, so d_skips is finest-first.

        let (dh, dst) = self.mid_res2.backward("mid.res2", &cache.mid.2, st, &dx, grads);
        dx = dh;
        d_st = d_st + dst;
        if let (Some(a), Some(ac)) = (&self.mid_attn, &cache.mid.1) {
            let (dh, dc) = a.backward("mid.attn", ac, &dx, grads);
            dx = dh;
            d_ctx = d_ctx + dc;
        }
        let (dh, dst) = self.mid_res1.backward("mid.res1", &cache.mid.0, st, &dx, grads);
        dx = dh;
        d_st = d_st + dst;

        for (i, (stage, (res_c, attn_c, down_c))) in
            self.enc.iter().zip(cache.enc.iter()).enumerate().rev()
        {
            let name = format!("enc{i}");
            let mut d = stage.down.backward(&path(&name, "down"), down_c, &dx, grads);
            // The skip branch taps the same activation the downsample consumed.
            let dskip = d_skips
                .pop()
                .expect("decoder produced one skip gradient per encoder stage");
            d = d + &dskip;
            if let (Some(a), Some(ac)) = (&stage.attn, attn_c) {
                let (dh, dc) = a.backward(&path(&name, "attn"), ac, &d, grads);
                d = dh;
                d_ctx = d_ctx + dc;
            }
            let (dh, dst) = stage.res.backward(&path(&name, "res"), res_c, st, &d, grads);
            dx = dh;
            d_st = d_st + dst;
        }

        let dz = self.conv_in.backward("conv_in", &cache.conv_in, &dx, grads);

        // Time MLP.
        let dt2 = silu_backward(&cache.t2, &d_st);
        let dt1a = self.time_l2.backward_vec("time.l2", &cache.t1a, &dt2, grads);
        let dt1 = silu_backward(&cache.t1, &dt1a);
        let _ = self.time_l1.backward_vec("time.l1", &cache.temb_sin, &dt1, grads);

        // Context MLP.
        let dc2 = d_ctx
            .into_shape_with_order(self.shape.n_ctx * self.shape.ctx_dim())
            .unwrap();
        let dc1a = self.ctx_l2.backward_vec("ctx.l2", &cache.c1a, &dc2, grads);
        let dc1 = silu_backward(&cache.c1, &dc1a);
        let _ = self.ctx_l1.backward_vec("ctx.l1", &cache.text, &dc1, grads);

        dz
    }
}

impl<F: Elem> Params<F> for CondUNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv_in.visit(&path(prefix, "conv_in"), f);
        self.time_l1.visit(&path(prefix, "time.l1"), f);
        self.time_l2.visit(&path(prefix, "time.l2"), f);
        self.ctx_l1.visit(&path(prefix, "ctx.l1"), f);
        self.ctx_l2.visit(&path(prefix, "ctx.l2"), f);
        for (i, st) in self.enc.iter().enumerate() {
            let name = format!("enc{i}");
            st.res.visit(&path(prefix, &path(&name, "res")), f);
            if let Some(a) = &st.attn {
                a.visit(&path(prefix, &path(&name, "attn")), f);
            }
            st.down.visit(&path(prefix, &path(&name, "down")), f);
        }
        self.mid_res1.visit(&path(prefix, "mid.res1"), f);
        if let Some(a) = &self.mid_attn {
            a.visit(&path(prefix, "mid.attn"), f);
        }
        self.mid_res2.visit(&path(prefix, "mid.res2"), f);
        for (i, st) in self.dec.iter().enumerate() {
            let stage_idx = self.shape.depth - 1 - i;
            let name = format!("dec{stage_idx}");
            st.upconv.visit(&path(prefix, &path(&name, "up")), f);
            st.res.visit(&path(prefix, &path(&name, "res")), f);
            if let Some(a) = &st.attn {
                a.visit(&path(prefix, &path(&name, "attn")), f);
            }
        }
        self.out_norm.visit(&path(prefix, "out.norm"), f);
        self.out_conv.visit(&path(prefix, "out.conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv_in.visit_mut(&path(prefix, "conv_in"), f);
        self.time_l1.visit_mut(&path(prefix, "time.l1"), f);
        self.time_l2.visit_mut(&path(prefix, "time.l2"), f);
        self.ctx_l1.visit_mut(&path(prefix, "ctx.l1"), f);
        self.ctx_l2.visit_mut(&path(prefix, "ctx.l2"), f);
        for (i, st) in self.enc.iter_mut().enumerate() {
            let name = format!("enc{i}");
            st.res.visit_mut(&path(prefix, &path(&name, "res")), f);
            if let Some(a) = &mut st.attn {
                a.visit_mut(&path(prefix, &path(&name, "attn")), f);
            }
            st.down.visit_mut(&path(prefix, &path(&name, "down")), f);
        }
        self.mid_res1.visit_mut(&path(prefix, "mid.res1"), f);
        if let Some(a) = &mut self.mid_attn {
            a.visit_mut(&path(prefix, "mid.attn"), f);
        }
        self.mid_res2.visit_mut(&path(prefix, "mid.res2"), f);
        let depth = self.shape.depth;
        for (i, st) in self.dec.iter_mut().enumerate() {
            let stage_idx = depth - 1 - i;
            let name = format!("dec{stage_idx}");
            st.upconv.visit_mut(&path(prefix, &path(&name, "up")), f);
            st.res.visit_mut(&path(prefix, &path(&name, "res")), f);
            if let Some(a) = &mut st.attn {
                a.visit_mut(&path(prefix, &path(&name, "attn")), f);
            }
        }
        self.out_norm.visit_mut(&path(prefix, "out.norm"), f);
        self.out_conv.visit_mut(&path(prefix, "out.conv"), f);
    }
}

/// The width-4, depth-1 instance used by gradient-fidelity checks.
pub fn tiny_shape(in_channels: usize, out_channels: usize) -> UNetShape {
    UNetShape {
        in_channels,
        out_channels,
        base_width: 4,
        depth: 1,
        t_embed_dim: 8,
        d_text: 8,
        attn_scales: vec![1, 2],
        n_ctx: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_against_fd;
    use crate::nn::randn;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn resblock_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut block: ResBlock<f64> = ResBlock::new(&mut rng, 4, 6, 8);
        let x = randn::<f64>(&mut rng, &[4, 4, 4], 1.0).into_dimensionality().unwrap();
        let st = randn::<f64>(&mut rng, &[8], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut block,
            |m| {
                let (y, _) = m.forward(&x, &st);
                y.iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (y, cache) = m.forward(&x, &st);
                let dy = y.mapv(|v| 2.0 * v);
                m.backward("", &cache, &st, &dy, grads);
            },
        );
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net: CondUNet<f64> = CondUNet::new(&mut rng, tiny_shape(4, 2));
        let z = randn::<f64>(&mut rng, &[4, 8, 8], 1.0).into_dimensionality().unwrap();
        let text = randn::<f64>(&mut rng, &[8], 1.0).into_dimensionality().unwrap();
        let (y1, _) = net.forward(&z, 3, &text);
        let (y2, _) = net.forward(&z, 3, &text);
        assert_eq!(y1.dim(), (2, 8, 8));
        assert_eq!(y1, y2);
        // Timestep and text must both be live inputs.
        let (y3, _) = net.forward(&z, 4, &text);
        assert_ne!(y1, y3);
        let text2 = randn::<f64>(&mut rng, &[8], 1.0).into_dimensionality().unwrap();
        let (y4, _) = net.forward(&z, 3, &text2);
        assert_ne!(y1, y4);
    }

    #[test]
    fn unet_full_gradient_check_on_tiny_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut net: CondUNet<f64> = CondUNet::new(&mut rng, tiny_shape(4, 2));
        let z = randn::<f64>(&mut rng, &[4, 4, 4], 1.0).into_dimensionality().unwrap();
        let text = randn::<f64>(&mut rng, &[8], 1.0).into_dimensionality().unwrap();
        let target: Array3<f64> =
            randn::<f64>(&mut rng, &[2, 4, 4], 1.0).into_dimensionality().unwrap();
        let max_rel = check_against_fd(
            &mut net,
            |m| {
                let (y, _) = m.forward(&z, 2, &text);
                (&y - &target).iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (y, cache) = m.forward(&z, 2, &text);
                let dy = (&y - &target).mapv(|v| 2.0 * v);
                m.backward(&cache, &dy, grads);
            },
        );
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn unet_input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let net: CondUNet<f64> = CondUNet::new(&mut rng, tiny_shape(4, 2));
        let mut z: Array3<f64> =
            randn::<f64>(&mut rng, &[4, 4, 4], 1.0).into_dimensionality().unwrap();
        let text = randn::<f64>(&mut rng, &[8], 1.0).into_dimensionality().unwrap();
        let loss = |z: &Array3<f64>| {
            let (y, _) = net.forward(z, 1, &text);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = net.forward(&z, 1, &text);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let dz = net.backward(&cache, &dy, &mut grads);
        let h = 1e-6;
        for idx in [(0, 0, 0), (3, 2, 1), (1, 3, 3)] {
            let orig = z[idx];
            z[idx] = orig + h;
            let lp = loss(&z);
            z[idx] = orig - h;
            let lm = loss(&z);
            z[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - dz[idx]).abs() / fd.abs().max(1.0) < 1e-5,
                "fd {fd} vs {}",
                dz[idx]
            );
        }
    }
}
