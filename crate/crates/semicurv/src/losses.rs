//! Training objectives: Dice and weighted BCE for labelled data, MSE and
//! N-pair consistency for unlabelled data, and the combined total.
//!
//! Every loss comes with an explicit `*_backward` companion returning the
//! gradient with respect to the student prediction; teacher predictions are
//! always treated as constants.

use ndarray::{Array2, ArrayView2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    L2,
}

/// Settings for the N-pair consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NPairConfig {
    /// Softmax temperature, > 0.
    pub temperature: f64,
    /// Stabiliser added inside cosine similarity, > 0.
    pub delta: f64,
    pub similarity: SimilarityKind,
    /// Mini-batch size the trainer should assemble; the loss itself takes the
    /// batch size from its inputs and requires at least 2.
    pub batch_size: usize,
}

impl Default for NPairConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            delta: 1e-7,
            similarity: SimilarityKind::Cosine,
            batch_size: 4,
        }
    }
}

impl NPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.delta > 0.0 && self.batch_size >= 2 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "n-pair config requires temperature > 0, delta > 0, batch >= 2: {self:?}"
            )))
        }
    }
}

/// Per-step loss components; `total = supervised + gamma * consistency`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `total = supervised + gamma * consistency` with all parts recorded.
pub fn combined_loss(supervised: f64, consistency: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        supervised,
        consistency,
        gamma,
        total: supervised + gamma * consistency,
    }
}

fn check_same_shape<F: NdFloat>(
    context: &str,
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape_mismatch(context, a.shape(), b.shape()));
    }
    Ok(())
}

/// Dice loss `1 - 2 (g+d)·(y+d) / (|g+d|_1 + |y+d|_1)` for predictions and
/// (possibly soft) targets in `[0, 1]`.
pub fn dice_loss<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
    delta: f64,
) -> Result<F> {
    check_same_shape("dice_loss", pred, target)?;
    let d = F::from(delta).unwrap();
    let mut inter = F::zero();
    let mut mass = F::zero();
    for (&g, &y) in pred.iter().zip(target.iter()) {
        inter = inter + (g + d) * (y + d);
        mass = mass + (g + d) + (y + d);
    }
    Ok(F::one() - (F::from(2.0).unwrap() * inter) / mass)
}

pub fn dice_loss_backward<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
    delta: f64,
) -> Result<Array2<F>> {
    check_same_shape("dice_loss", pred, target)?;
    let d = F::from(delta).unwrap();
    let two = F::from(2.0).unwrap();
    let mut inter = F::zero();
    let mut mass = F::zero();
    for (&g, &y) in pred.iter().zip(target.iter()) {
        inter = inter + (g + d) * (y + d);
        mass = mass + (g + d) + (y + d);
    }
    // d/dg of (1 - 2 I / M): -2 [(y+d) M - I] / M^2.
    let mut grad = Array2::zeros(pred.raw_dim());
    for (g, &y) in grad.iter_mut().zip(target.iter()) {
        *g = -two * ((y + d) * mass - inter) / (mass * mass);
    }
    Ok(grad)
}

const BCE_CLAMP: f64 = 1e-7;

fn wbce_weights<F: NdFloat>(target: &ArrayView2<'_, F>) -> (F, F) {
    let n = F::from(target.len()).unwrap();
    let p = target.iter().fold(F::zero(), |acc, &y| acc + y);
    let two = F::from(2.0).unwrap();
    if p <= F::zero() || p >= n {
        // All-one or all-zero target: fall back to unweighted BCE.
        (F::one(), F::one())
    } else {
        (n / (two * p), n / (two * (n - p)))
    }
}

/// Inverse-class-frequency weighted binary cross entropy. Predictions are
/// clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn wbce_loss<F: NdFloat>(pred: &ArrayView2<'_, F>, target: &ArrayView2<'_, F>) -> Result<F> {
    check_same_shape("wbce_loss", pred, target)?;
    let (w_pos, w_neg) = wbce_weights(target);
    let lo = F::from(BCE_CLAMP).unwrap();
    let hi = F::one() - lo;
    let mut acc = F::zero();
    for (&g, &y) in pred.iter().zip(target.iter()) {
        let g = g.max(lo).min(hi);
        acc = acc + w_pos * y * g.ln() + w_neg * (F::one() - y) * (F::one() - g).ln();
    }
    Ok(-acc / F::from(pred.len()).unwrap())
}

pub fn wbce_loss_backward<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    check_same_shape("wbce_loss", pred, target)?;
    let (w_pos, w_neg) = wbce_weights(target);
    let lo = F::from(BCE_CLAMP).unwrap();
    let hi = F::one() - lo;
    let n = F::from(pred.len()).unwrap();
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((d, &g), &y) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        if g < lo || g > hi {
            // Clamp active: the loss is locally constant in this pixel.
            *d = F::zero();
        } else {
            *d = -(w_pos * y / g - w_neg * (F::one() - y) / (F::one() - g)) / n;
        }
    }
    Ok(grad)
}

/// Mean squared difference, normalised by pixel count so the value is
/// resolution independent.
pub fn mse_consistency<F: NdFloat>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Result<F> {
    check_same_shape("mse_consistency", a, b)?;
    let n = F::from(a.len()).unwrap();
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    Ok(acc / n)
}

/// Gradient of [`mse_consistency`] with respect to `a` (`b` held constant).
pub fn mse_consistency_backward<F: NdFloat>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    check_same_shape("mse_consistency", a, b)?;
    let scale = F::from(2.0).unwrap() / F::from(a.len()).unwrap();
    let mut grad = Array2::zeros(a.raw_dim());
    for ((g, &x), &y) in grad.iter_mut().zip(a.iter()).zip(b.iter()) {
        *g = scale * (x - y);
    }
    Ok(grad)
}

/// Cosine similarity of the delta-shifted, vectorised maps. For inputs in
/// `[0, 1]` the shifted vectors are strictly positive, so the value lies in
/// `(0, 1]`.
pub fn cosine_sim<F: NdFloat>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    delta: f64,
) -> Result<F> {
    check_same_shape("cosine_sim", a, b)?;
    let d = F::from(delta).unwrap();
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (u, v) = (x + d, y + d);
        dot = dot + u * v;
        na = na + u * u;
        nb = nb + v * v;
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Gradient of [`cosine_sim`] with respect to `a`.
fn cosine_sim_backward<F: NdFloat>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    delta: f64,
) -> (F, Array2<F>) {
    let d = F::from(delta).unwrap();
    let mut dot = F::zero();
    let mut na2 = F::zero();
    let mut nb2 = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (u, v) = (x + d, y + d);
        dot = dot + u * v;
        na2 = na2 + u * u;
        nb2 = nb2 + v * v;
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let s = dot / (na * nb);
    let mut grad = Array2::zeros(a.raw_dim());
    for ((g, &x), &y) in grad.iter_mut().zip(a.iter()).zip(b.iter()) {
        let (u, v) = (x + d, y + d);
        *g = v / (na * nb) - s * u / na2;
    }
    (s, grad)
}

/// The L2-induced logit `-|a - b|_2` fed to the N-pair softmax.
pub fn l2_sim_logit<F: NdFloat>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Result<F> {
    check_same_shape("l2_sim_logit", a, b)?;
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    Ok(-acc.sqrt())
}

fn l2_sim_logit_backward<F: NdFloat>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
) -> (F, Array2<F>) {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    let norm = acc.sqrt();
    let safe = norm.max(F::from(1e-12).unwrap());
    let mut grad = Array2::zeros(a.raw_dim());
    for ((g, &x), &y) in grad.iter_mut().zip(a.iter()).zip(b.iter()) {
        *g = -(x - y) / safe;
    }
    (-norm, grad)
}

fn similarity<F: NdFloat>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    cfg: &NPairConfig,
) -> Result<F> {
    match cfg.similarity {
        SimilarityKind::Cosine => cosine_sim(a, b, cfg.delta),
        SimilarityKind::L2 => l2_sim_logit(a, b),
    }
}

fn npair_validate<F: NdFloat>(student: &[Array2<F>], teacher: &[Array2<F>]) -> Result<()> {
    if student.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "n-pair loss needs a batch of at least 2, got {}",
            student.len()
        )));
    }
    if student.len() != teacher.len() {
        return Err(Error::InvalidConfig(format!(
            "n-pair batch sizes differ: {} student vs {} teacher",
            student.len(),
            teacher.len()
        )));
    }
    for (s, t) in student.iter().zip(teacher) {
        check_same_shape("npair_loss", &s.view(), &t.view())?;
    }
    Ok(())
}

/// N-pair consistency: for each anchor `i` the positive is `teacher[i]` and
/// the negatives are `teacher[j]` for `j != i`; the softmax denominator runs
/// over all `j` including the positive.
pub fn npair_loss<F: NdFloat>(
    student: &[Array2<F>],
    teacher: &[Array2<F>],
    cfg: &NPairConfig,
) -> Result<F> {
    npair_validate(student, teacher)?;
    cfg.validate()?;
    let n = student.len();
    let tau = F::from(cfg.temperature).unwrap();
    let mut loss = F::zero();
    for i in 0..n {
        let mut logits = Vec::with_capacity(n);
        for j in 0..n {
            logits.push(similarity(&student[i].view(), &teacher[j].view(), cfg)? / tau);
        }
        let max = logits.iter().cloned().fold(logits[0], F::max);
        let lse = logits
            .iter()
            .fold(F::zero(), |acc, &l| acc + (l - max).exp())
            .ln()
            + max;
        loss = loss + lse - logits[i];
    }
    Ok(loss / F::from(n).unwrap())
}

/// Gradients of [`npair_loss`] with respect to the student maps.
pub fn npair_loss_backward<F: NdFloat>(
    student: &[Array2<F>],
    teacher: &[Array2<F>],
    cfg: &NPairConfig,
) -> Result<Vec<Array2<F>>> {
    npair_validate(student, teacher)?;
    cfg.validate()?;
    let n = student.len();
    let tau = F::from(cfg.temperature).unwrap();
    let inv_n = F::one() / F::from(n).unwrap();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let mut logits = Vec::with_capacity(n);
        let mut sim_grads = Vec::with_capacity(n);
        for j in 0..n {
            let (s, g) = match cfg.similarity {
                SimilarityKind::Cosine => {
                    cosine_sim_backward(&student[i].view(), &teacher[j].view(), cfg.delta)
                }
                SimilarityKind::L2 => l2_sim_logit_backward(&student[i].view(), &teacher[j].view()),
            };
            logits.push(s / tau);
            sim_grads.push(g);
        }
        let max = logits.iter().cloned().fold(logits[0], F::max);
        let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z = exps.iter().fold(F::zero(), |a, &e| a + e);
        let mut grad = Array2::<F>::zeros(student[i].raw_dim());
        for j in 0..n {
            let p = exps[j] / z;
            let coeff = inv_n * (p - if j == i { F::one() } else { F::zero() }) / tau;
            grad.scaled_add(coeff, &sim_grads[j]);
        }
        grads.push(grad);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_difference_grad, max_rel_error};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        let mut m = Array2::zeros((h, w));
        m.mapv_inplace(|_| rng.random::<f64>());
        m
    }

    /// Band mask occupying rows `[r0, r1)`.
    fn band_mask(h: usize, w: usize, r0: usize, r1: usize) -> Array2<f64> {
        let mut m = Array2::zeros((h, w));
        for y in r0..r1 {
            for x in 0..w {
                m[[y, x]] = 1.0;
            }
        }
        m
    }

    #[test]
    fn dice_perfect_prediction_is_near_zero() {
        let y = band_mask(8, 8, 2, 4); // p = 16 positives of n = 64
        let loss = dice_loss(&y.view(), &y.view(), 1e-7).unwrap();
        let (n, p) = (64.0, 16.0);
        assert!(loss >= 0.0);
        assert!(loss <= 2.0 * 1e-7 * n / p + 1e-10);
    }

    #[test]
    fn dice_all_zero_prediction_is_near_one() {
        let y = band_mask(8, 8, 0, 2);
        let zeros = Array2::zeros((8, 8));
        let loss = dice_loss(&zeros.view(), &y.view(), 1e-7).unwrap();
        // Hand-evaluated: 1 - 2 d (p + n d) / (p + 2 n d), tiny below 1.
        let (n, p, d) = (64.0, 16.0, 1e-7);
        let expected = 1.0 - 2.0 * d * (p + n * d) / (p + 2.0 * n * d);
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        assert!(loss > 0.999);
    }

    #[test]
    fn dice_complement_prediction_on_half_mask_is_near_one() {
        // pred = 1 - target has zero overlap, so the loss sits at ~1 - 2d.
        let y = band_mask(8, 8, 0, 4);
        let pred = y.mapv(|v| 1.0 - v);
        let loss = dice_loss(&pred.view(), &y.view(), 1e-7).unwrap();
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn dice_uniform_half_prediction_on_half_mask_is_half() {
        let y = band_mask(8, 8, 0, 4);
        let pred = Array2::from_elem((8, 8), 0.5);
        let loss = dice_loss(&pred.view(), &y.view(), 1e-7).unwrap();
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn wbce_examples() {
        let y = band_mask(8, 8, 0, 2);
        let hard = y.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        assert!(wbce_loss(&hard.view(), &y.view()).unwrap() < 1e-6);

        let balanced = band_mask(8, 8, 0, 4);
        let (wp, wn) = wbce_weights(&balanced.view());
        assert_abs_diff_eq!(wp, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wn, 1.0, epsilon = 1e-12);

        let half = Array2::from_elem((8, 8), 0.5);
        let loss = wbce_loss(&half.view(), &y.view()).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn wbce_degenerate_targets_fall_back_to_unweighted() {
        let ones = Array2::from_elem((4, 4), 1.0);
        let zeros = Array2::zeros((4, 4));
        let (wp, wn) = wbce_weights(&ones.view());
        assert_eq!((wp, wn), (1.0, 1.0));
        let (wp, wn) = wbce_weights(&zeros.view());
        assert_eq!((wp, wn), (1.0, 1.0));
        assert!(wbce_loss(&ones.view(), &ones.view()).unwrap() < 1e-6);
    }

    #[test]
    fn mse_examples() {
        let zeros = Array2::<f64>::zeros((8, 8));
        let ones = Array2::<f64>::from_elem((8, 8), 1.0);
        assert_eq!(mse_consistency(&zeros.view(), &zeros.view()).unwrap(), 0.0);
        assert_eq!(mse_consistency(&ones.view(), &ones.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            mse_consistency(&zeros.view(), &ones.view()).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 8, 8);
        assert_abs_diff_eq!(cosine_sim(&m.view(), &m.view(), 1e-7).unwrap(), 1.0, epsilon = 1e-12);

        let zeros = Array2::<f64>::zeros((8, 8));
        assert_abs_diff_eq!(
            cosine_sim(&zeros.view(), &zeros.view(), 1e-7).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        // Two disjoint masks, each ~5% positive, similarity collapses to ~2 delta.
        let a = band_mask(20, 20, 0, 1);
        let b = band_mask(20, 20, 10, 11);
        let s = cosine_sim(&a.view(), &b.view(), 1e-7).unwrap();
        assert!(s > 0.0 && s < 1e-4, "similarity {s}");
    }

    #[test]
    fn l2_logit_examples() {
        let zeros = Array2::<f64>::zeros((8, 8));
        let ones = Array2::<f64>::from_elem((8, 8), 1.0);
        assert_eq!(l2_sim_logit(&zeros.view(), &zeros.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            l2_sim_logit(&zeros.view(), &ones.view()).unwrap(),
            -8.0, // sqrt(64)
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_map(&mut rng, 8, 8);
        let b = random_map(&mut rng, 8, 8);
        let direct = -a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(l2_sim_logit(&a.view(), &b.view()).unwrap(), direct, epsilon = 1e-10);
    }

    fn disjoint_batch(n: usize) -> Vec<Array2<f64>> {
        // n pairwise-disjoint single-row masks on an n x 20 canvas.
        (0..n).map(|i| band_mask(n, 20, i, i + 1)).collect()
    }

    #[test]
    fn npair_collapsed_batch_equals_log_n() {
        for n in [2usize, 4, 8, 16] {
            for kind in [SimilarityKind::Cosine, SimilarityKind::L2] {
                let maps: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((6, 6))).collect();
                let cfg = NPairConfig {
                    similarity: kind,
                    batch_size: n,
                    ..NPairConfig::default()
                };
                let loss = npair_loss(&maps, &maps, &cfg).unwrap();
                assert_abs_diff_eq!(loss, (n as f64).ln(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn npair_matched_disjoint_batch_matches_closed_form() {
        let n = 4;
        let maps = disjoint_batch(n);
        let cfg = NPairConfig {
            batch_size: n,
            ..NPairConfig::default()
        };
        let loss = npair_loss(&maps, &maps, &cfg).unwrap();
        // Mean measured cross-pair similarity.
        let mut eps_hat = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    eps_hat += cosine_sim(&maps[i].view(), &maps[j].view(), cfg.delta).unwrap();
                    count += 1;
                }
            }
        }
        eps_hat /= count as f64;
        let closed = (1.0 + (n as f64 - 1.0) * ((eps_hat - 1.0) / cfg.temperature).exp()).ln();
        assert_abs_diff_eq!(loss, closed, epsilon = 1e-6);
        assert!(loss < (n as f64).ln());
    }

    #[test]
    fn npair_swapped_positives_worse_than_uniform() {
        let maps = disjoint_batch(2);
        let swapped = vec![maps[1].clone(), maps[0].clone()];
        let cfg = NPairConfig {
            batch_size: 2,
            ..NPairConfig::default()
        };
        let loss = npair_loss(&maps, &swapped, &cfg).unwrap();
        assert!(loss > std::f64::consts::LN_2, "loss {loss}");
    }

    #[test]
    fn npair_needs_batch_of_two() {
        let maps = disjoint_batch(1);
        let cfg = NPairConfig::default();
        assert!(npair_loss(&maps, &maps, &cfg).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(0.3, 0.9, 0.0).total, 0.3);
        assert_eq!(combined_loss(0.3, 0.0, 0.7).total, 0.3);
        assert_abs_diff_eq!(combined_loss(0.3, 0.5, 0.2).total, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = band_mask(8, 8, 1, 3);
        let pred = random_map(&mut rng, 8, 8).mapv(|v| 0.05 + 0.9 * v);

        let g = dice_loss_backward(&pred.view(), &target.view(), 1e-7).unwrap();
        let fd = central_difference_grad(
            |x| dice_loss(&x.view(), &target.view(), 1e-7).unwrap(),
            &pred,
            1e-4,
        );
        assert!(max_rel_error(&g.view().into_dyn(), &fd.view().into_dyn()) < 1e-4);

        let g = wbce_loss_backward(&pred.view(), &target.view()).unwrap();
        let fd = central_difference_grad(
            |x| wbce_loss(&x.view(), &target.view()).unwrap(),
            &pred,
            1e-4,
        );
        assert!(max_rel_error(&g.view().into_dyn(), &fd.view().into_dyn()) < 1e-4);

        let other = random_map(&mut rng, 8, 8);
        let g = mse_consistency_backward(&pred.view(), &other.view()).unwrap();
        let fd = central_difference_grad(
            |x| mse_consistency(&x.view(), &other.view()).unwrap(),
            &pred,
            1e-4,
        );
        assert!(max_rel_error(&g.view().into_dyn(), &fd.view().into_dyn()) < 1e-4);
    }

    #[test]
    fn npair_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let student: Vec<Array2<f64>> = (0..n)
            .map(|_| random_map(&mut rng, 8, 8).mapv(|v| 0.05 + 0.9 * v))
            .collect();
        let teacher: Vec<Array2<f64>> = (0..n)
            .map(|_| random_map(&mut rng, 8, 8).mapv(|v| 0.05 + 0.9 * v))
            .collect();
        for kind in [SimilarityKind::Cosine, SimilarityKind::L2] {
            let cfg = NPairConfig {
                similarity: kind,
                batch_size: n,
                ..NPairConfig::default()
            };
            let grads = npair_loss_backward(&student, &teacher, &cfg).unwrap();
            for i in 0..n {
                let fd = central_difference_grad(
                    |x| {
                        let mut s = student.clone();
                        s[i] = x.clone();
                        npair_loss(&s, &teacher, &cfg).unwrap()
                    },
                    &student[i],
                    1e-4,
                );
                assert!(
                    max_rel_error(&grads[i].view().into_dyn(), &fd.view().into_dyn()) < 1e-4,
                    "kind {kind:?} anchor {i}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn npair_is_permutation_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4usize;
            let student: Vec<Array2<f64>> = (0..n).map(|_| random_map(&mut rng, 6, 6)).collect();
            let teacher: Vec<Array2<f64>> = (0..n).map(|_| random_map(&mut rng, 6, 6)).collect();
            let cfg = NPairConfig { batch_size: n, ..NPairConfig::default() };
            let base = npair_loss(&student, &teacher, &cfg).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let s2: Vec<_> = order.iter().map(|&i| student[i].clone()).collect();
            let t2: Vec<_> = order.iter().map(|&i| teacher[i].clone()).collect();
            let permuted = npair_loss(&s2, &t2, &cfg).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }

        #[test]
        fn dice_and_cosine_ranges(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, 6, 6);
            let b = random_map(&mut rng, 6, 6).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let d = dice_loss(&a.view(), &b.view(), 1e-7).unwrap();
            prop_assert!(d >= 0.0 && d <= 1.0 + 1e-5);
            let c = cosine_sim(&a.view(), &b.view(), 1e-7).unwrap();
            prop_assert!(c > 0.0 && c <= 1.0 + 1e-12);
            let np = npair_loss(
                &[a.clone(), b.clone()],
                &[b.clone(), a.clone()],
                &NPairConfig { batch_size: 2, ..NPairConfig::default() },
            ).unwrap();
            prop_assert!(np >= 0.0);
        }
    }
}
