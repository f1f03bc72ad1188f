//! Datasets: the synthetic curvilinear-structure generator used for
//! desk-scale verification, directory ingestion for real corpora,
//! semi-supervised splits and the IoU/F1 evaluation metrics.
//!
//! Directory layout for ingestion and export:
//!
//! ```text
//! root/
//!   images/<id>.png      8-bit grayscale
//!   masks/<id>.png       binarised at half of the mask's maximum value
//!   train.txt val.txt test.txt   one id per line (or all.txt for unsplit data)
//! ```

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, NdFloat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRole {
    TrainLabelled,
    TrainUnlabelled,
    Val,
    Test,
    Unsplit,
}

/// One image/mask pair held in memory. Images are `C x H x W` in `[0, 1]`;
/// masks are `H x W` binary `{0, 1}`.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
}

impl DatasetItem {
    pub fn image_as<F: NdFloat>(&self) -> Array3<F> {
        self.image.mapv(|v| F::from(v).unwrap())
    }

    pub fn mask_as<F: NdFloat>(&self) -> Array2<F> {
        self.mask.mapv(|v| F::from(v).unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationDataset {
    pub items: Vec<DatasetItem>,
    pub role: DatasetRole,
}

impl SegmentationDataset {
    pub fn new(items: Vec<DatasetItem>, role: DatasetRole) -> Result<Self> {
        let mut ids = HashSet::new();
        for item in &items {
            if !ids.insert(item.id.clone()) {
                return Err(Error::Dataset(format!("duplicate id '{}'", item.id)));
            }
            let (_, h, w) = item.image.dim();
            if item.mask.dim() != (h, w) {
                return Err(Error::shape_mismatch(
                    "image vs mask",
                    &[h, w],
                    &[item.mask.dim().0, item.mask.dim().1],
                ));
            }
            if item.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Dataset(format!(
                    "mask '{}' is not binary after loading",
                    item.id
                )));
            }
        }
        Ok(Self { items, role })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How to carve labelled/unlabelled/val/test partitions out of one corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of the *training* partition that keeps its labels.
    pub labelled_fraction: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labelled_fraction: 0.05,
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SslSplits {
    pub labelled: SegmentationDataset,
    pub unlabelled: SegmentationDataset,
    pub val: SegmentationDataset,
    pub test: SegmentationDataset,
}

/// Shuffles the corpus by seed, carves train/val/test by the configured
/// fractions, and withholds labels from all but `labelled_fraction` of the
/// training images. `labelled = max(1, round(fraction * train_size))`.
pub fn make_splits(dataset: &SegmentationDataset, spec: &SplitSpec) -> Result<SslSplits> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("make_splits on empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&spec.labelled_fraction)
        || spec.train_fraction <= 0.0
        || spec.val_fraction < 0.0
        || spec.train_fraction + spec.val_fraction > 1.0
    {
        return Err(Error::InvalidConfig(format!("bad split spec {spec:?}")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_train = ((n as f64) * spec.train_fraction).round() as usize;
    let n_val = ((n as f64) * spec.val_fraction).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let train_idx = &order[..n_train];
    let val_idx = &order[n_train..n_train + n_val];
    let test_idx = &order[n_train + n_val..];

    let (labelled_idx, unlabelled_idx) = split_train(train_idx, spec.labelled_fraction);

    let pick = |idx: &[usize], role: DatasetRole| -> Result<SegmentationDataset> {
        SegmentationDataset::new(
            idx.iter().map(|&i| dataset.items[i].clone()).collect(),
            role,
        )
    };
    Ok(SslSplits {
        labelled: pick(&labelled_idx, DatasetRole::TrainLabelled)?,
        unlabelled: pick(&unlabelled_idx, DatasetRole::TrainUnlabelled)?,
        val: pick(val_idx, DatasetRole::Val)?,
        test: pick(test_idx, DatasetRole::Test)?,
    })
}

/// Keeps `max(1, round(fraction * len))` labelled items from an already
/// shuffled training index list.
fn split_train(train_idx: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = train_idx.len();
    let n_labelled = if fraction >= 1.0 {
        n
    } else {
        (((n as f64) * fraction).round() as usize).clamp(1, n)
    };
    (
        train_idx[..n_labelled].to_vec(),
        train_idx[n_labelled..].to_vec(),
    )
}

/// Parameters of the procedural curve generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of curve count per image.
    pub curves_min: usize,
    pub curves_max: usize,
    /// Stroke width range in pixels.
    pub width_min: f64,
    pub width_max: f64,
    /// Target positive-pixel ratio range.
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Amplitude of the fine pixel noise added on top of the textured background.
    pub noise_amplitude: f64,
    /// Intensity drop of curve pixels relative to the background.
    pub dip_min: f64,
    pub dip_max: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            curves_min: 1,
            curves_max: 3,
            width_min: 1.0,
            width_max: 3.0,
            ratio_min: 0.02,
            ratio_max: 0.08,
            noise_amplitude: 0.06,
            dip_min: 0.18,
            dip_max: 0.45,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height >= 8
            && self.width >= 8
            && self.curves_min >= 1
            && self.curves_max >= self.curves_min
            && self.width_min >= 1.0
            && self.width_max >= self.width_min
            && self.ratio_min > 0.0
            && self.ratio_max >= self.ratio_min
            && self.ratio_max < 0.5
            && self.noise_amplitude >= 0.0
            && self.dip_min >= 0.0
            && self.dip_max >= self.dip_min;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "infeasible synthetic config: {self:?}"
            )));
        }
        // A single maximal curve must be able to reach the minimum ratio.
        let max_area = self.curves_max as f64
            * self.width_max
            * (self.height.max(self.width) as f64)
            * 1.5;
        if max_area / ((self.height * self.width) as f64) < self.ratio_min {
            return Err(Error::InvalidConfig(
                "positive-ratio range unreachable with the configured curve budget".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluates a cubic Bezier at `t`.
fn bezier(p: [(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let mut x = 0.0;
    let mut y = 0.0;
    for k in 0..4 {
        x += b[k] * p[k].0;
        y += b[k] * p[k].1;
    }
    (x, y)
}

/// Stamps one random smooth curve onto the mask, returning pixels set.
fn draw_curve(mask: &mut Array2<f32>, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> usize {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let margin = 3.0;
    let mut pt = || {
        (
            rng.random_range(margin..w - margin),
            rng.random_range(margin..h - margin),
        )
    };
    // Anchors biased to opposite halves so curves tend to span the image.
    let p0 = pt();
    let mut p3 = pt();
    for _ in 0..8 {
        let d = (p3.0 - p0.0).hypot(p3.1 - p0.1);
        if d > 0.5 * w.min(h) {
            break;
        }
        p3 = pt();
    }
    let control = [p0, pt(), pt(), p3];
    let stroke = rng.random_range(cfg.width_min..=cfg.width_max);
    let radius = stroke / 2.0;

    let steps = (4.0 * (w + h)) as usize;
    let mut set = 0usize;
    let mut stamp = |qx: i64, qy: i64| {
        if qx >= 0 && qy >= 0 && qx < cfg.width as i64 && qy < cfg.height as i64 {
            let cell = &mut mask[[qy as usize, qx as usize]];
            if *cell == 0.0 {
                *cell = 1.0;
                set += 1;
            }
        }
    };
    let r_ceil = radius.ceil() as i64;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (cx, cy) = bezier(control, t);
        let (px, py) = (cx.round() as i64, cy.round() as i64);
        // The rounded centre always lands; a dense sample step keeps
        // consecutive centres 8-connected.
        stamp(px, py);
        for dy in -r_ceil..=r_ceil {
            for dx in -r_ceil..=r_ceil {
                let (qx, qy) = (px + dx, py + dy);
                let dist2 = (qx as f64 - cx).powi(2) + (qy as f64 - cy).powi(2);
                if dist2 <= radius * radius {
                    stamp(qx, qy);
                }
            }
        }
    }
    set
}

fn box_blur(field: &Array2<f32>) -> Array2<f32> {
    let (h, w) = field.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            let mut count = 0.0f32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += field[[sy as usize, sx as usize]];
                        count += 1.0;
                    }
                }
            }
            out[[y, x]] = acc / count;
        }
    }
    out
}

/// Generates `n` image/mask pairs. Curves are thin connected structures that
/// darken a band-limited textured background; appearance (background level,
/// texture, dip strength) varies per image so a handful of labelled samples
/// never covers the full distribution.
pub fn generate_synthetic(cfg: &SyntheticConfig, n: usize) -> Result<SegmentationDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset("generate_synthetic with n = 0".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);

        let target_ratio = rng.random_range(cfg.ratio_min..=cfg.ratio_max);
        let mut mask = Array2::<f32>::zeros((h, w));
        let mut positives = 0usize;
        let total = (h * w) as f64;
        for c in 0..cfg.curves_max {
            positives += draw_curve(&mut mask, cfg, &mut rng);
            let enough = positives as f64 / total >= target_ratio;
            if c + 1 >= cfg.curves_min && enough {
                break;
            }
        }

        // Band-limited background texture.
        let mut texture = Array2::<f32>::zeros((h, w));
        texture.mapv_inplace(|_| rng.random::<f32>() - 0.5);
        for _ in 0..3 {
            texture = box_blur(&texture);
        }
        let tex_max = texture.iter().fold(0.0f32, |a, &v| a.max(v.abs())).max(1e-6);
        let tex_gain = rng.random_range(0.05..0.20) as f32 / tex_max;

        let base = rng.random_range(0.45..0.75) as f32;
        let dip = rng.random_range(cfg.dip_min..=cfg.dip_max) as f32;

        // Soft curve footprint so the intensity dip bleeds slightly.
        let soft = box_blur(&mask);
        let mut image = Array3::<f32>::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                let noise = (rng.random::<f32>() - 0.5) * 2.0 * cfg.noise_amplitude as f32;
                let v = base + texture[[y, x]] * tex_gain
                    - dip * soft[[y, x]].min(1.0)
                    + noise;
                image[[0, y, x]] = v.clamp(0.0, 1.0);
            }
        }
        items.push(DatasetItem {
            id: format!("syn{i:05}"),
            image,
            mask,
        });
    }
    SegmentationDataset::new(items, DatasetRole::Unsplit)
}

fn counts<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
    threshold: f64,
) -> Result<(u64, u64, u64)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape_mismatch("metric", pred.shape(), target.shape()));
    }
    let thr = F::from(threshold).unwrap();
    let half = F::from(0.5).unwrap();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let p = p >= thr;
        let t = t >= half;
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Intersection over union of the thresholded prediction against the mask;
/// defined as 1 when both sets are empty.
pub fn iou<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
    threshold: f64,
) -> Result<f64> {
    let (tp, fp, fn_) = counts(pred, target, threshold)?;
    let union = tp + fp + fn_;
    Ok(if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    })
}

/// F1 = 2PR/(P+R) at the given threshold; 1 when both sets are empty, 0 when
/// exactly one is.
pub fn f1<F: NdFloat>(
    pred: &ArrayView2<'_, F>,
    target: &ArrayView2<'_, F>,
    threshold: f64,
) -> Result<f64> {
    let (tp, fp, fn_) = counts(pred, target, threshold)?;
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean IoU/F1 of a prediction list against a dataset's masks.
pub fn mean_metrics<F: NdFloat>(
    preds: &[Array2<F>],
    dataset: &SegmentationDataset,
    threshold: f64,
) -> Result<(f64, f64)> {
    if preds.len() != dataset.len() || dataset.is_empty() {
        return Err(Error::Dataset(format!(
            "metric over {} predictions vs {} items",
            preds.len(),
            dataset.len()
        )));
    }
    let mut siou = 0.0;
    let mut sf1 = 0.0;
    for (p, item) in preds.iter().zip(&dataset.items) {
        let m = item.mask_as::<F>();
        siou += iou(&p.view(), &m.view(), threshold)?;
        sf1 += f1(&p.view(), &m.view(), threshold)?;
    }
    let n = preds.len() as f64;
    Ok((siou / n, sf1 / n))
}

fn load_gray_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn load_items(root: &Path, ids: &[String]) -> Result<Vec<DatasetItem>> {
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_gray_png(&root.join("images").join(format!("{id}.png")))?;
        let raw_mask = load_gray_png(&root.join("masks").join(format!("{id}.png")))?;
        let max = raw_mask.iter().fold(0.0f32, |a, &v| a.max(v));
        let mask = if max == 0.0 {
            raw_mask
        } else {
            raw_mask.mapv(|v| if v >= 0.5 * max { 1.0 } else { 0.0 })
        };
        let (h, w) = image.dim();
        let image3 = image
            .into_shape_with_order((1, h, w))
            .expect("grayscale reshape");
        items.push(DatasetItem {
            id: id.clone(),
            image: image3,
            mask,
        });
    }
    Ok(items)
}

/// Datasets loaded from a directory. When `train/val/test.txt` manifests are
/// present each named split loads separately; otherwise `all.txt` (or the
/// whole `images/` directory) loads as a single unsplit corpus.
pub enum LoadedData {
    Split {
        train: SegmentationDataset,
        val: SegmentationDataset,
        test: SegmentationDataset,
    },
    Unsplit(SegmentationDataset),
}

pub fn load_directory(root: &Path) -> Result<LoadedData> {
    let (train_m, val_m, test_m) = (
        root.join("train.txt"),
        root.join("val.txt"),
        root.join("test.txt"),
    );
    if train_m.exists() {
        let train = load_items(root, &read_manifest(&train_m)?)?;
        let val = if val_m.exists() {
            load_items(root, &read_manifest(&val_m)?)?
        } else {
            Vec::new()
        };
        let test = if test_m.exists() {
            load_items(root, &read_manifest(&test_m)?)?
        } else {
            Vec::new()
        };
        return Ok(LoadedData::Split {
            train: SegmentationDataset::new(train, DatasetRole::Unsplit)?,
            val: SegmentationDataset::new(val, DatasetRole::Val)?,
            test: SegmentationDataset::new(test, DatasetRole::Test)?,
        });
    }
    let all_m = root.join("all.txt");
    let ids = if all_m.exists() {
        read_manifest(&all_m)?
    } else {
        let mut ids: Vec<String> = std::fs::read_dir(root.join("images"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".png").map(String::from)
            })
            .collect();
        ids.sort();
        ids
    };
    if ids.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no ids found under {}",
            root.display()
        )));
    }
    Ok(LoadedData::Unsplit(SegmentationDataset::new(
        load_items(root, &ids)?,
        DatasetRole::Unsplit,
    )?))
}

fn save_gray_png(path: &Path, map: &ArrayView2<'_, f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = (map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        p.0[0] = v;
    }
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Exports a dataset in the directory convention, including an `all.txt`
/// manifest and deterministic train/val/test lists drawn with `split_seed`.
pub fn export_dataset(
    dataset: &SegmentationDataset,
    root: &Path,
    split: Option<&SplitSpec>,
) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    let mut all = String::new();
    for item in &dataset.items {
        let gray = item
            .image
            .index_axis(ndarray::Axis(0), 0);
        save_gray_png(&root.join("images").join(format!("{}.png", item.id)), &gray)?;
        save_gray_png(
            &root.join("masks").join(format!("{}.png", item.id)),
            &item.mask.view(),
        )?;
        all.push_str(&item.id);
        all.push('\n');
    }
    std::fs::write(root.join("all.txt"), all)?;
    if let Some(spec) = split {
        let n = dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order.shuffle(&mut rng);
        let n_train = ((n as f64) * spec.train_fraction).round() as usize;
        let n_val = (((n as f64) * spec.val_fraction).round() as usize).min(n - n_train);
        let write_list = |name: &str, idx: &[usize]| -> Result<()> {
            let mut text = String::new();
            for &i in idx {
                text.push_str(&dataset.items[i].id);
                text.push('\n');
            }
            std::fs::write(root.join(name), text)?;
            Ok(())
        };
        write_list("train.txt", &order[..n_train])?;
        write_list("val.txt", &order[n_train..n_train + n_val])?;
        write_list("test.txt", &order[n_train + n_val..])?;
    }
    Ok(())
}
