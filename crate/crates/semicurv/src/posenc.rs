//! Spatial coordinate encoding channels.
//!
//! Two extra channels carry where a pixel sits inside the image: `sin(K*pi*Sx)`
//! along width and `cos(K*pi*Sy)` along height, with `Sx`, `Sy` linearly
//! spaced over `[0, 1]` at the feature map's own resolution. The `linear`
//! kind keeps the raw coordinates instead.

use ndarray::{concatenate, Array3, Axis, NdFloat};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    None,
    Linear,
    Sinusoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub kind: EncodingKind,
    /// Period parameter K of the sinusoid encoding.
    pub k: f64,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        Self {
            kind: EncodingKind::Sinusoid,
            k: 4.0,
        }
    }
}

impl PositionalEncoding {
    /// Channels this encoding adds when attached.
    pub fn extra_channels(&self) -> usize {
        match self.kind {
            EncodingKind::None => 0,
            _ => 2,
        }
    }
}

/// Normalised coordinate of sample `i` out of `n`, spanning `[0, 1]`
/// inclusive at both ends; a single sample sits at 0.
fn coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Builds the two encoding channels at resolution `h x w`. Channel 0 varies
/// along width, channel 1 along height. For `kind = none` the result has no
/// channels.
pub fn encode<F: NdFloat>(h: usize, w: usize, cfg: &PositionalEncoding) -> Array3<F> {
    let mut out = Array3::zeros((cfg.extra_channels(), h, w));
    match cfg.kind {
        EncodingKind::None => {}
        EncodingKind::Linear => {
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = F::from(coord(x, w)).unwrap();
                    out[[1, y, x]] = F::from(coord(y, h)).unwrap();
                }
            }
        }
        EncodingKind::Sinusoid => {
            let kpi = cfg.k * std::f64::consts::PI;
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = F::from((kpi * coord(x, w)).sin()).unwrap();
                    out[[1, y, x]] = F::from((kpi * coord(y, h)).cos()).unwrap();
                }
            }
        }
    }
    out
}

/// Concatenates the encoding (computed at the feature map's resolution) as
/// the last channels. The original channels pass through unmodified; with
/// `kind = none` the input is returned as is.
pub fn attach<F: NdFloat>(features: Array3<F>, cfg: &PositionalEncoding) -> Array3<F> {
    if cfg.kind == EncodingKind::None {
        return features;
    }
    let (_, h, w) = features.dim();
    let enc = encode::<F>(h, w, cfg);
    concatenate(Axis(0), &[features.view(), enc.view()]).expect("channel concat")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn sinusoid(k: f64) -> PositionalEncoding {
        PositionalEncoding {
            kind: EncodingKind::Sinusoid,
            k,
        }
    }

    #[test]
    fn corner_values() {
        let enc = encode::<f64>(8, 8, &sinusoid(4.0));
        assert_abs_diff_eq!(enc[[0, 0, 0]], 0.0, epsilon = 1e-12); // sin 0
        assert_abs_diff_eq!(enc[[1, 0, 0]], 1.0, epsilon = 1e-12); // cos 0
    }

    #[test]
    fn k4_midpoint_is_zero() {
        // Width 9 puts Sx = 0.5 on the grid: sin(4 pi * 0.5) = sin(2 pi) = 0.
        let enc = encode::<f64>(3, 9, &sinusoid(4.0));
        assert_abs_diff_eq!(enc[[0, 0, 4]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn k4_width9_row_matches_direct_evaluation() {
        let enc = encode::<f64>(2, 9, &sinusoid(4.0));
        for x in 0..9 {
            let s = x as f64 / 8.0;
            assert_abs_diff_eq!(enc[[0, 0, x]], (4.0 * std::f64::consts::PI * s).sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_kind_spans_unit_interval() {
        let enc = encode::<f64>(5, 7, &PositionalEncoding { kind: EncodingKind::Linear, k: 4.0 });
        assert_eq!(enc[[0, 0, 0]], 0.0);
        assert_eq!(enc[[0, 0, 6]], 1.0);
        assert_eq!(enc[[1, 0, 0]], 0.0);
        assert_eq!(enc[[1, 4, 0]], 1.0);
        assert!(enc.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn attach_preserves_original_channels() {
        let mut features = Array3::<f64>::zeros((8, 6, 6));
        features.mapv_inplace(|_| 0.3);
        let orig = features.clone();
        let out = attach(features, &sinusoid(4.0));
        assert_eq!(out.dim(), (10, 6, 6));
        for c in 0..8 {
            assert_eq!(out.index_axis(Axis(0), c), orig.index_axis(Axis(0), c));
        }
        assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn attach_none_is_identity() {
        let features = Array3::<f64>::ones((4, 5, 5));
        let out = attach(
            features.clone(),
            &PositionalEncoding {
                kind: EncodingKind::None,
                k: 4.0,
            },
        );
        assert_eq!(out, features);
    }

    #[test]
    fn resolutions_agree_at_corners() {
        let a = encode::<f64>(6, 6, &sinusoid(4.0));
        let b = encode::<f64>(12, 12, &sinusoid(4.0));
        assert_abs_diff_eq!(a[[0, 0, 0]], b[[0, 0, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(a[[0, 5, 5]], b[[0, 11, 11]], epsilon = 1e-12);
        assert_abs_diff_eq!(a[[1, 5, 0]], b[[1, 11, 0]], epsilon = 1e-12);
    }

    #[test]
    fn encoding_varies_along_its_axis() {
        for k in [1.0, 2.0, 4.0, 8.0] {
            let enc = encode::<f64>(16, 16, &sinusoid(k));
            let row0: Vec<f64> = (0..16).map(|x| enc[[0, 0, x]]).collect();
            let col1: Vec<f64> = (0..16).map(|y| enc[[1, y, 0]]).collect();
            assert!(row0.iter().any(|&v| (v - row0[0]).abs() > 1e-9), "K={k}");
            assert!(col1.iter().any(|&v| (v - col1[0]).abs() > 1e-9), "K={k}");
        }
    }

    /// Count of strictly positive-to-negative transitions along a row.
    fn downward_crossings(vals: &[f64]) -> usize {
        let mut count = 0;
        let mut last_sign = 0i8;
        for &v in vals {
            let s = if v > 1e-9 {
                1
            } else if v < -1e-9 {
                -1
            } else {
                0
            };
            if s != 0 {
                if last_sign == 1 && s == -1 {
                    count += 1;
                }
                last_sign = s;
            }
        }
        count
    }

    #[test]
    fn period_grows_with_k() {
        // The sinusoid channel completes K/2 periods across a row, so the
        // number of downward zero crossings is floor(K/2) (K=1 never dips
        // below zero on [0,1]).
        let mut previous = 0;
        for k in [1.0f64, 2.0, 4.0, 8.0] {
            let enc = encode::<f64>(4, 64, &sinusoid(k));
            let row: Vec<f64> = (0..64).map(|x| enc[[0, 0, x]]).collect();
            let crossings = downward_crossings(&row);
            assert_eq!(crossings, (k / 2.0).floor() as usize, "K={k}");
            assert!(crossings >= previous);
            previous = crossings;
        }
    }

    #[test]
    fn degenerate_extent_uses_zero_coordinate() {
        let enc = encode::<f64>(1, 1, &sinusoid(4.0));
        assert_abs_diff_eq!(enc[[0, 0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(enc[[1, 0, 0]], 1.0, epsilon = 1e-12);
    }
}
