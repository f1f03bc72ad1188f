//! The segmentation backbone: a UNet whose convolution blocks carry additive
//! residual connections, plus the student/teacher parameter pair kept in sync
//! by exponential moving average.
//!
//! Encoder stage `s` produces `base * 2^s` channels; when positional encoding
//! is enabled two coordinate channels are appended to every encoder stage
//! output (and only there). The decoder mirrors the encoder with nearest
//! upsampling, a 1x1 reduction and skip concatenation. A 1x1 head plus
//! logistic squashing yields a per-pixel foreground posterior in `(0, 1)`.

use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, upsample2,
    upsample2_backward, Conv2d, Grads, GroupNorm, ParamSet, ParamSpec, Registrar,
};
use crate::posenc::{self, PositionalEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of encoder stages; the last stage is the bottom of the U.
    pub depth: usize,
    pub norm_groups: usize,
    pub posenc: PositionalEncoding,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            norm_groups: 8,
            posenc: PositionalEncoding::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone needs depth, base_channels, in_channels >= 1: {self:?}"
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::InvalidConfig("norm_groups must be >= 1".into()));
        }
        let g = self.norm_groups.min(self.base_channels);
        if self.base_channels % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_channels {} not divisible by norm groups {g}",
                self.base_channels
            )));
        }
        Ok(())
    }

    fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.min(channels)
    }

    fn stage_out(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Spatial downsampling factor the input extents must divide by.
    pub fn stride_factor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Two 3x3 conv+norm+ReLU layers wrapped by an additive skip; the skip is a
/// 1x1 projection when the channel count changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    proj: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct ResBlockCache<F> {
    x: Array3<F>,
    c1: Array3<F>,
    r1: Array3<F>,
    c2: Array3<F>,
    /// Pre-activation of the residual sum.
    s: Array3<F>,
}

impl ResBlock {
    fn new(reg: &mut Registrar, name: &str, in_ch: usize, out_ch: usize, groups: usize) -> Self {
        Self {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), in_ch, out_ch, 3),
            gn1: GroupNorm::new(reg, &format!("{name}.gn1"), out_ch, groups),
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), out_ch, out_ch, 3),
            gn2: GroupNorm::new(reg, &format!("{name}.gn2"), out_ch, groups),
            proj: (in_ch != out_ch)
                .then(|| Conv2d::new(reg, &format!("{name}.proj"), in_ch, out_ch, 1)),
        }
    }

    fn forward<F: NdFloat>(&self, ps: &ParamSet<F>, x: Array3<F>) -> (Array3<F>, ResBlockCache<F>) {
        let c1 = self.conv1.forward(ps, &x.view());
        let n1 = self.gn1.forward(ps, &c1.view());
        let r1 = relu(&n1);
        let c2 = self.conv2.forward(ps, &r1.view());
        let n2 = self.gn2.forward(ps, &c2.view());
        let skip = match &self.proj {
            Some(p) => p.forward(ps, &x.view()),
            None => x.clone(),
        };
        let s = n2 + &skip;
        let y = relu(&s);
        (y, ResBlockCache { x, c1, r1, c2, s })
    }

    fn backward<F: NdFloat>(
        &self,
        ps: &ParamSet<F>,
        cache: &ResBlockCache<F>,
        dy: &Array3<F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let ds = relu_backward(&cache.s, dy);
        let dskip = match &self.proj {
            Some(p) => p.backward(ps, &cache.x.view(), &ds.view(), grads),
            None => ds.clone(),
        };
        let dc2 = self.gn2.backward(ps, &cache.c2.view(), &ds.view(), grads);
        let dr1 = self.conv2.backward(ps, &cache.r1.view(), &dc2.view(), grads);
        let dn1 = relu_backward(&cache.r1, &dr1);
        let dc1 = self.gn1.backward(ps, &cache.c1.view(), &dn1.view(), grads);
        let dx = self.conv1.backward(ps, &cache.x.view(), &dc1.view(), grads);
        dx + &dskip
    }
}

/// The residual UNet. The struct holds topology only; all tensors live in a
/// [`ParamSet`] created by [`UNet::init_params`].
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: BackboneConfig,
    enc: Vec<ResBlock>,
    reduce: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    head: Conv2d,
    specs: Vec<ParamSpec>,
}

pub struct UNetCache<F> {
    enc_caches: Vec<ResBlockCache<F>>,
    pool_idx: Vec<Vec<u8>>,
    pool_dims: Vec<(usize, usize, usize)>,
    reduce_in: Vec<Array3<F>>,
    dec_caches: Vec<ResBlockCache<F>>,
    head_in: Array3<F>,
    prob: Array3<F>,
}

impl UNet {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registrar::default();
        let extra = cfg.posenc.extra_channels();
        let depth = cfg.depth;
        let mut enc = Vec::with_capacity(depth);
        for sidx in 0..depth {
            let in_ch = if sidx == 0 {
                cfg.in_channels
            } else {
                cfg.stage_out(sidx - 1) + extra
            };
            let out_ch = cfg.stage_out(sidx);
            enc.push(ResBlock::new(
                &mut reg,
                &format!("enc{sidx}"),
                in_ch,
                out_ch,
                cfg.groups_for(out_ch),
            ));
        }
        let mut reduce = Vec::new();
        let mut dec = Vec::new();
        for sidx in 0..depth.saturating_sub(1) {
            let up_in = if sidx == depth - 2 {
                cfg.stage_out(depth - 1) + extra
            } else {
                cfg.stage_out(sidx + 1)
            };
            let out_ch = cfg.stage_out(sidx);
            reduce.push(Conv2d::new(
                &mut reg,
                &format!("dec{sidx}.reduce"),
                up_in,
                out_ch,
                1,
            ));
            let cat_ch = out_ch + out_ch + extra;
            dec.push(ResBlock::new(
                &mut reg,
                &format!("dec{sidx}.block"),
                cat_ch,
                out_ch,
                cfg.groups_for(out_ch),
            ));
        }
        let head_in = if depth == 1 {
            cfg.base_channels + extra
        } else {
            cfg.base_channels
        };
        let head = Conv2d::new(&mut reg, "head", head_in, 1, 1);
        Ok(Self {
            cfg,
            enc,
            reduce,
            dec,
            head,
            specs: reg.into_specs(),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Channel count of encoder stage `s` output, including any attached
    /// encoding channels.
    pub fn encoder_stage_channels(&self, s: usize) -> usize {
        self.cfg.stage_out(s) + self.cfg.posenc.extra_channels()
    }

    /// Total scalar parameter count of one parameter set.
    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn init_params<F: NdFloat>(&self, seed: u64) -> ParamSet<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamSet::init(&self.specs, &mut rng)
    }

    fn check_input<F: NdFloat>(&self, img: &ArrayView3<'_, F>) -> Result<()> {
        let (c, h, w) = img.dim();
        if c != self.cfg.in_channels {
            return Err(Error::shape_mismatch(
                "unet input channels",
                &[c, h, w],
                &[self.cfg.in_channels],
            ));
        }
        let f = self.cfg.stride_factor();
        if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} must be a multiple of {f} with at least {} pixels per side",
                2 * f
            )));
        }
        Ok(())
    }

    /// Forward pass producing the foreground posterior and the cache needed
    /// for [`UNet::backward`]. Evaluation-only callers can drop the cache;
    /// the pass is deterministic either way.
    pub fn forward<F: NdFloat>(
        &self,
        ps: &ParamSet<F>,
        img: &ArrayView3<'_, F>,
    ) -> Result<(Array2<F>, UNetCache<F>)> {
        self.check_input(img)?;
        let depth = self.cfg.depth;
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth.saturating_sub(1));
        let mut pool_dims = Vec::with_capacity(depth.saturating_sub(1));
        let mut skips: Vec<Array3<F>> = Vec::with_capacity(depth.saturating_sub(1));

        let mut cur = img.to_owned();
        for sidx in 0..depth {
            let (y, cache) = self.enc[sidx].forward(ps, cur);
            enc_caches.push(cache);
            let attached = posenc::attach(y, &self.cfg.posenc);
            if sidx < depth - 1 {
                let (pooled, idx) = maxpool2(&attached.view());
                pool_idx.push(idx);
                pool_dims.push(attached.dim());
                skips.push(attached);
                cur = pooled;
            } else {
                cur = attached;
            }
        }

        let mut reduce_in = Vec::with_capacity(depth.saturating_sub(1));
        let mut dec_caches = Vec::with_capacity(depth.saturating_sub(1));
        for sidx in (0..depth.saturating_sub(1)).rev() {
            let up = upsample2(&cur.view());
            let red = self.reduce[sidx].forward(ps, &up.view());
            reduce_in.push(up);
            let cat = concatenate(Axis(0), &[red.view(), skips[sidx].view()])
                .expect("skip concat");
            let (y, cache) = self.dec[sidx].forward(ps, cat);
            dec_caches.push(cache);
            cur = y;
        }

        let head_in = cur;
        let z = self.head.forward(ps, &head_in.view());
        let prob = sigmoid(&z);
        let (_, h, w) = prob.dim();
        let pred = prob
            .view()
            .into_shape_with_order((h, w))
            .expect("prediction shape")
            .to_owned();
        Ok((
            pred,
            UNetCache {
                enc_caches,
                pool_idx,
                pool_dims,
                reduce_in,
                dec_caches,
                head_in,
                prob,
            },
        ))
    }

    /// Prediction only, cache dropped.
    pub fn predict<F: NdFloat>(&self, ps: &ParamSet<F>, img: &ArrayView3<'_, F>) -> Result<Array2<F>> {
        Ok(self.forward(ps, img)?.0)
    }

    /// Backpropagates a gradient on the prediction map into parameter
    /// gradients (accumulated into `grads`).
    pub fn backward<F: NdFloat>(
        &self,
        ps: &ParamSet<F>,
        cache: &UNetCache<F>,
        dpred: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Result<()> {
        let depth = self.cfg.depth;
        let (h, w) = dpred.dim();
        let dprob = dpred
            .view()
            .into_shape_with_order((1, h, w))
            .expect("dpred shape")
            .to_owned();
        let dz = sigmoid_backward(&cache.prob, &dprob);
        let mut dcur = self
            .head
            .backward(ps, &cache.head_in.view(), &dz.view(), grads);

        // Decoder, reverse of the forward order.
        let mut dskips: Vec<Option<Array3<F>>> = vec![None; depth.saturating_sub(1)];
        for (cache_idx, sidx) in (0..depth.saturating_sub(1)).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let dcat = self.dec[sidx].backward(ps, &cache.dec_caches[cache_idx], &dcur, grads);
            let out_ch = self.cfg.stage_out(sidx);
            let dred = dcat.slice(s![..out_ch, .., ..]).to_owned();
            let dskip = dcat.slice(s![out_ch.., .., ..]).to_owned();
            dskips[sidx] = Some(dskip);
            let dup = self.reduce[sidx].backward(
                ps,
                &cache.reduce_in[cache_idx].view(),
                &dred.view(),
                grads,
            );
            dcur = upsample2_backward(&dup.view());
        }

        // Encoder, bottom to top. `dcur` currently holds the gradient on the
        // bottom stage's attached output.
        let mut d_attached = dcur;
        for sidx in (0..depth).rev() {
            let out_ch = self.cfg.stage_out(sidx);
            // Encoding channels carry no learnable state; their grads drop.
            let d_block_out = d_attached.slice(s![..out_ch, .., ..]).to_owned();
            let dx = self.enc[sidx].backward(ps, &cache.enc_caches[sidx], &d_block_out, grads);
            if sidx == 0 {
                break;
            }
            let d_pool_in = maxpool2_backward(
                &cache.pool_idx[sidx - 1],
                cache.pool_dims[sidx - 1],
                &dx.view(),
            );
            d_attached = match dskips[sidx - 1].take() {
                Some(ds) => d_pool_in + &ds,
                None => d_pool_in,
            };
        }
        Ok(())
    }
}

/// Student parameters are trained directly; teacher parameters follow them as
/// an exponential moving average and never receive gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentTeacherPair<F> {
    pub student: ParamSet<F>,
    pub teacher: ParamSet<F>,
}

/// Initialises the student with the fan-in scheme and the teacher as an exact
/// copy of it.
pub fn init_pair<F: NdFloat>(net: &UNet, seed: u64) -> StudentTeacherPair<F> {
    let student = net.init_params::<F>(seed);
    let teacher = student.clone();
    StudentTeacherPair { student, teacher }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise over
/// every parameter tensor. Computed as `t -= (1 - alpha) * (t - s)` so that
/// `teacher == student` is an exact fixed point.
pub fn ema_update<F: NdFloat>(pair: &mut StudentTeacherPair<F>, alpha: f64) {
    let b = F::one() - F::from(alpha).unwrap();
    assert_eq!(pair.student.len(), pair.teacher.len());
    for (t, s) in pair
        .teacher
        .entries_mut()
        .iter_mut()
        .zip(pair.student.entries().iter())
    {
        debug_assert_eq!(t.value.shape(), s.value.shape());
        t.value.zip_mut_with(&s.value, |tv, &sv| *tv = *tv - b * (*tv - sv));
    }
}
