//! Minimal neural-network plumbing: a flat parameter store plus stride-1
//! convolution, group normalisation, pooling and resampling primitives, each
//! with a hand-written backward pass.
//!
//! Layers hold indices into a [`ParamSet`] rather than owning tensors, which
//! keeps the optimizer, EMA updates and checkpointing trivial: they all just
//! walk the flat entry list. Backward passes take the layer's forward input
//! and accumulate parameter gradients into a [`Grads`] aligned with the set.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Ix1, Ix2, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Fan-in scaled normal, std = sqrt(2 / fan_in).
    HeNormal { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// Collects parameter specs while the network topology is being built and
/// hands out stable ids.
#[derive(Debug, Default)]
pub struct Registrar {
    specs: Vec<ParamSpec>,
}

impl Registrar {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: InitKind) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
}

fn normal_sample<F: NdFloat>(rng: &mut impl Rng, std: f64) -> F {
    // Box-Muller; the first uniform is kept away from zero.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    F::from(z * std).unwrap()
}

impl<F: NdFloat> ParamSet<F> {
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let entries = specs
            .iter()
            .map(|spec| {
                let value = match spec.init {
                    InitKind::Zero => ArrayD::zeros(spec.shape.clone()),
                    InitKind::One => ArrayD::from_elem(spec.shape.clone(), F::one()),
                    InitKind::HeNormal { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        let mut a = ArrayD::<F>::zeros(spec.shape.clone());
                        a.mapv_inplace(|_| normal_sample(rng, std));
                        a
                    }
                };
                ParamEntry {
                    name: spec.name.clone(),
                    value,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.entries[id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2d parameter")
    }

    pub fn view1(&self, id: ParamId) -> ndarray::ArrayView1<'_, F> {
        self.entries[id]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1d parameter")
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Largest absolute elementwise difference against another set.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(other.entries.iter()) {
            for (&x, &y) in a.value.iter().zip(b.value.iter()) {
                worst = worst.max((x - y).abs().to_f64().unwrap());
            }
        }
        worst
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: NdFloat> Grads<F> {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<F>) {
        match &mut self.slots[id] {
            Some(slot) => *slot += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.slots[id].as_ref()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Grads<F>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(other.slots) {
            if let Some(g) = src {
                match dst {
                    Some(d) => *d += &g,
                    None => *dst = Some(g),
                }
            }
        }
    }

    /// Multiplies every stored gradient by `scale`.
    pub fn scale(&mut self, scale: F) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * scale);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        let mut worst = 0.0f64;
        for slot in self.slots.iter().flatten() {
            for &v in slot.iter() {
                worst = worst.max(v.abs().to_f64().unwrap());
            }
        }
        worst
    }
}

/// Lowers a `C x H x W` image into a `(C*k*k) x (H*W)` matrix for a stride-1
/// "same" convolution with zero padding.
fn im2col<F: NdFloat>(x: &ArrayView3<'_, F>, k: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * k * k, h * w));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    // Destination x range with the source column in bounds.
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_base = (ci * h + sy as usize) * w + (x_lo + kx - pad);
                    let dst_base = row_base + y * w + x_lo;
                    let len = x_hi - x_lo;
                    cs[dst_base..dst_base + len]
                        .copy_from_slice(&xs[src_base..src_base + len]);
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatters column gradients back onto the image.
fn col2im<F: NdFloat>(dcols: &Array2<F>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<F> {
    let mut dx = Array3::<F>::zeros((c, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_base = row_base + y * w + x_lo;
                    let dst_base = (ci * h + sy as usize) * w + (x_lo + kx - pad);
                    for i in 0..(x_hi - x_lo) {
                        xs[dst_base + i] = xs[dst_base + i] + ds[src_base + i];
                    }
                }
            }
        }
    }
    dx
}

/// Stride-1 convolution with square kernel and zero "same" padding. The
/// weight is stored flat as `(out_ch, in_ch * k * k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(reg: &mut Registrar, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let fan_in = in_ch * k * k;
        let w = reg.add(
            format!("{name}.w"),
            vec![out_ch, fan_in],
            InitKind::HeNormal { fan_in },
        );
        let b = reg.add(format!("{name}.b"), vec![out_ch], InitKind::Zero);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            k,
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward<F: NdFloat>(&self, ps: &ParamSet<F>, x: &ArrayView3<'_, F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let cols = im2col(x, self.k, self.pad());
        let weight = ps.view2(self.w);
        let mut out2 = weight.dot(&cols); // (out_ch, H*W)
        let bias = ps.view1(self.b);
        for (mut row, &b) in out2.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out2.into_shape_with_order((self.out_ch, h, w)).expect("conv output shape")
    }

    /// Returns `dx`; accumulates `dw`/`db` into `grads`.
    pub fn backward<F: NdFloat>(
        &self,
        ps: &ParamSet<F>,
        x: &ArrayView3<'_, F>,
        dy: &ArrayView3<'_, F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let (c, h, w) = x.dim();
        let dy_std = dy.as_standard_layout();
        let dy2 = dy_std
            .view()
            .into_shape_with_order((self.out_ch, h * w))
            .expect("dy shape");
        let cols = im2col(x, self.k, self.pad());
        let dw = dy2.dot(&cols.t());
        let db = Array1::from_iter(dy2.rows().into_iter().map(|r| r.sum()));
        let weight = ps.view2(self.w);
        let dcols = weight.t().dot(&dy2);
        let dx = col2im(&dcols, c, h, w, self.k, self.pad());
        grads.accumulate(self.w, dw.into_dyn());
        grads.accumulate(self.b, db.into_dyn());
        dx
    }
}

/// Group normalisation with per-channel affine parameters. Statistics are
/// computed per sample, so outputs never depend on other batch members and
/// evaluation is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(reg: &mut Registrar, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let gamma = reg.add(format!("{name}.gamma"), vec![channels], InitKind::One);
        let beta = reg.add(format!("{name}.beta"), vec![channels], InitKind::Zero);
        Self {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    fn group_stats<F: NdFloat>(&self, x: &ArrayView3<'_, F>) -> Vec<(F, F)> {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let n = F::from(per * h * w).unwrap();
        let mut stats = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let slab = x.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
            let mean = slab.sum() / n;
            let mut var = F::zero();
            for &v in slab.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv_std = F::one() / (var + F::from(self.eps).unwrap()).sqrt();
            stats.push((mean, inv_std));
        }
        stats
    }

    pub fn forward<F: NdFloat>(&self, ps: &ParamSet<F>, x: &ArrayView3<'_, F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let per = c / self.groups;
        let stats = self.group_stats(x);
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        let mut out = Array3::<F>::zeros((c, h, w));
        for ci in 0..c {
            let (mean, inv_std) = stats[ci / per];
            let (g, b) = (gamma[ci], beta[ci]);
            let src = x.index_axis(ndarray::Axis(0), ci);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), ci);
            dst.zip_mut_with(&src, |o, &v| *o = (v - mean) * inv_std * g + b);
        }
        out
    }

    pub fn backward<F: NdFloat>(
        &self,
        ps: &ParamSet<F>,
        x: &ArrayView3<'_, F>,
        dy: &ArrayView3<'_, F>,
        grads: &mut Grads<F>,
    ) -> Array3<F> {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let n = F::from(per * h * w).unwrap();
        let stats = self.group_stats(x);
        let gamma = ps.view1(self.gamma);

        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dx = Array3::<F>::zeros((c, h, w));

        for g in 0..self.groups {
            let (mean, inv_std) = stats[g];
            let lo = g * per;
            let hi = lo + per;
            // Group-level sums for the normalisation backward formula.
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in lo..hi {
                let xc = x.index_axis(ndarray::Axis(0), ci);
                let dyc = dy.index_axis(ndarray::Axis(0), ci);
                let gam = gamma[ci];
                let mut dg = F::zero();
                let mut db = F::zero();
                for (&xv, &dv) in xc.iter().zip(dyc.iter()) {
                    let xhat = (xv - mean) * inv_std;
                    dg = dg + dv * xhat;
                    db = db + dv;
                    let dxhat = dv * gam;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
                dgamma[ci] = dgamma[ci] + dg;
                dbeta[ci] = dbeta[ci] + db;
            }
            let mean_dxhat = sum_dxhat / n;
            let mean_dxhat_xhat = sum_dxhat_xhat / n;
            for ci in lo..hi {
                let xc = x.index_axis(ndarray::Axis(0), ci);
                let dyc = dy.index_axis(ndarray::Axis(0), ci);
                let gam = gamma[ci];
                let mut dxc = dx.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut dxc).and(&xc).and(&dyc).for_each(|o, &xv, &dv| {
                    let xhat = (xv - mean) * inv_std;
                    let dxhat = dv * gam;
                    *o = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                });
            }
        }
        grads.accumulate(self.gamma, dgamma.into_dyn());
        grads.accumulate(self.beta, dbeta.into_dyn());
        dx
    }
}

pub fn relu<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward<F: NdFloat>(y: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the within-window
/// argmax (0..4, first maximum wins) for the backward pass.
pub fn maxpool2<F: NdFloat>(x: &ArrayView3<'_, F>) -> (Array3<F>, Vec<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even extents, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut idx = vec![0u8; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xph in 0..ow {
                let mut best = x[[ci, 2 * y, 2 * xph]];
                let mut arg = 0u8;
                let candidates = [
                    x[[ci, 2 * y, 2 * xph + 1]],
                    x[[ci, 2 * y + 1, 2 * xph]],
                    x[[ci, 2 * y + 1, 2 * xph + 1]],
                ];
                for (i, &v) in candidates.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = i as u8 + 1;
                    }
                }
                out[[ci, y, xph]] = best;
                idx[(ci * oh + y) * ow + xph] = arg;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<F: NdFloat>(idx: &[u8], in_dims: (usize, usize, usize), dy: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = in_dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..oh {
            for xph in 0..ow {
                let arg = idx[(ci * oh + y) * ow + xph];
                let (dy_off, dx_off) = ((arg / 2) as usize, (arg % 2) as usize);
                dx[[ci, 2 * y + dy_off, 2 * xph + dx_off]] = dy[[ci, y, xph]];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: NdFloat>(x: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..h {
            for xph in 0..w {
                let v = x[[ci, y, xph]];
                out[[ci, 2 * y, 2 * xph]] = v;
                out[[ci, 2 * y, 2 * xph + 1]] = v;
                out[[ci, 2 * y + 1, 2 * xph]] = v;
                out[[ci, 2 * y + 1, 2 * xph + 1]] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<F: NdFloat>(dy: &ArrayView3<'_, F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xph in 0..w {
                dx[[ci, y, xph]] = dy[[ci, 2 * y, 2 * xph]]
                    + dy[[ci, 2 * y, 2 * xph + 1]]
                    + dy[[ci, 2 * y + 1, 2 * xph]]
                    + dy[[ci, 2 * y + 1, 2 * xph + 1]];
            }
        }
    }
    dx
}

pub fn sigmoid<F: NdFloat>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Backward through the logistic function given its *output*.
pub fn sigmoid_backward<F: NdFloat>(y: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d = *d * yv * (F::one() - yv));
    dx
}
