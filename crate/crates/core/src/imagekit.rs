//! Lane masks, binarization, RoI lateral-offset estimation, pixel-wise
//! segmentation metrics and the class-balanced cross-entropy loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{count, lit, Real};

pub const IMAGE_WIDTH: usize = 640;
pub const IMAGE_HEIGHT: usize = 480;

/// Horizontal image center used as the vehicle reference column.
pub const IMAGE_CENTER_X: usize = 320;

/// First and last row (inclusive) of the lane-centering band.
pub const ROI_ROWS: (usize, usize) = (336, 344);

/// Rightmost column of the left half; the right half starts one column later.
pub const LEFT_HALF_MAX_X: usize = 320;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_MIN_ROI_COUNT: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("lane centroid missing on the {0} side of the RoI")]
    MissingCentroid(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f32),
}

/// Probability image, row-major, origin top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Full-size (640×480) empty mask.
    pub fn blank() -> Self {
        Self::zeros(IMAGE_WIDTH, IMAGE_HEIGHT)
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferLength {
                expected: width * height,
                got: data.len(),
            });
        }
        if let Some(&bad) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Stores `value` clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &GrayMask) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Fills the inclusive rectangle `[x0, x1] × [y0, y1]`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, value: f32) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let x1 = x1.min(self.width - 1);
        let y1 = y1.min(self.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.set(x, y, value);
            }
        }
    }
}

/// Binarized mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Reinterprets the mask as probabilities 0.0 / 1.0.
    pub fn to_gray(&self) -> GrayMask {
        GrayMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

/// Pixel is foreground iff its probability is at least `threshold`.
pub fn binarize(mask: &GrayMask, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: mask.width,
        height: mask.height,
        data: mask
            .data
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect(),
    }
}

/// Mean foreground column of each image half inside the RoI band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoICentroids<T> {
    pub x_left: Option<T>,
    pub x_right: Option<T>,
    pub n_left: usize,
    pub n_right: usize,
}

/// Computes the left/right centroids of the RoI band (rows 336–344).
///
/// A side with fewer than `min_count` foreground pixels has no centroid.
/// Masks smaller than 640×480 are handled by clipping the band and halves.
pub fn roi_centroids<T: Real>(mask: &BinaryMask, min_count: usize) -> RoICentroids<T> {
    let (mut sum_l, mut n_l) = (0usize, 0usize);
    let (mut sum_r, mut n_r) = (0usize, 0usize);
    let last_row = ROI_ROWS.1.min(mask.height.saturating_sub(1));
    if mask.height > ROI_ROWS.0 {
        for y in ROI_ROWS.0..=last_row {
            for (x, &v) in mask.row(y).iter().enumerate().take(IMAGE_WIDTH) {
                if v == 0 {
                    continue;
                }
                if x <= LEFT_HALF_MAX_X {
                    sum_l += x;
                    n_l += 1;
                } else {
                    sum_r += x;
                    n_r += 1;
                }
            }
        }
    }
    let centroid =
        |sum: usize, n: usize| (n >= min_count.max(1)).then(|| count::<T>(sum) / count::<T>(n));
    RoICentroids {
        x_left: centroid(sum_l, n_l),
        x_right: centroid(sum_r, n_r),
        n_left: n_l,
        n_right: n_r,
    }
}

/// Lateral offset estimate in pixels. Positive `delta` means the lane center
/// lies left of the image center, i.e. the vehicle sits right of center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate<T> {
    pub delta0: T,
    pub delta: T,
    pub lane_width: T,
    pub alpha: T,
}

pub fn lateral_offset<T: Real>(
    c: &RoICentroids<T>,
    alpha: T,
) -> Result<OffsetEstimate<T>, ImageError> {
    let xl = c.x_left.ok_or(ImageError::MissingCentroid("left"))?;
    let xr = c.x_right.ok_or(ImageError::MissingCentroid("right"))?;
    let delta0 = count::<T>(IMAGE_CENTER_X) - (xl + xr) / lit(2.0);
    Ok(OffsetEstimate {
        delta0,
        delta: alpha * delta0,
        lane_width: xr - xl,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores<T> {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: T,
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

/// Pixel-wise accuracy, precision, recall and F1. Undefined ratios are 0.
pub fn seg_metrics<T: Real>(
    pred: &BinaryMask,
    gt: &BinaryMask,
) -> Result<SegScores<T>, ImageError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(ImageError::DimensionMismatch(
            pred.width,
            pred.height,
            gt.width,
            gt.height,
        ));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            T::zero()
        } else {
            count::<T>(num) / count::<T>(den)
        }
    };
    let total = tp + tn + fp + fn_;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == T::zero() {
        T::zero()
    } else {
        lit::<T>(2.0) * precision * recall / (precision + recall)
    };
    Ok(SegScores {
        tp,
        tn,
        fp,
        fn_,
        accuracy: ratio(tp + tn, total),
        precision,
        recall,
        f1,
    })
}

/// Class-balanced binary cross-entropy over logits.
///
/// Positives are weighted by `N/(P+N)` and negatives by `P/(P+N)`, where `P`
/// and `N` count positive and negative labels in the batch. Sigmoid outputs
/// are clamped away from 0 and 1 before taking logs.
pub fn weighted_ce<T: Real>(scores: &[T], labels: &[bool]) -> Result<T, ImageError> {
    if scores.len() != labels.len() {
        return Err(ImageError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(ImageError::EmptyBatch);
    }
    let p = labels.iter().filter(|&&y| y).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        log::warn!("weighted_ce: degenerate batch with P={p}, N={n}");
    }
    let total = count::<T>(p + n);
    let w_pos = count::<T>(n) / total;
    let w_neg = count::<T>(p) / total;
    let eps = lit::<T>(1e-12).max(T::epsilon());
    let (lo, hi) = (eps, T::one() - eps);
    let mut pos_sum = T::zero();
    let mut neg_sum = T::zero();
    for (&x, &y) in scores.iter().zip(labels) {
        let sigma = (T::one() / (T::one() + (-x).exp())).max(lo).min(hi);
        if y {
            pos_sum += sigma.ln();
        } else {
            neg_sum += (T::one() - sigma).ln();
        }
    }
    Ok(-(w_pos * pos_sum) - w_neg * neg_sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_column(mask: &mut BinaryMask, x: usize) {
        for y in ROI_ROWS.0..=ROI_ROWS.1 {
            mask.set(x, y, true);
        }
    }

    #[test]
    fn binarize_uniform_and_empty() {
        let m = GrayMask::filled(640, 480, 0.6);
        assert_eq!(binarize(&m, 0.5).count_ones(), 640 * 480);
        let z = GrayMask::blank();
        assert_eq!(binarize(&z, 0.3).count_ones(), 0);
    }

    #[test]
    fn binarize_checker() {
        let (w, h) = (8, 6);
        let data: Vec<f32> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { 0.3 } else { 0.7 })
            .collect();
        let m = GrayMask::from_vec(w, h, data.clone()).unwrap();
        let b = binarize(&m, 0.5);
        for (i, &p) in data.iter().enumerate() {
            assert_eq!(b.data()[i], u8::from(p >= 0.5));
        }
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let m = GrayMask::filled(2, 2, 0.5);
        assert_eq!(binarize(&m, 0.5).count_ones(), 4);
    }

    #[test]
    fn from_vec_rejects_out_of_range() {
        assert!(GrayMask::from_vec(1, 2, vec![0.2, 1.5]).is_err());
        assert!(GrayMask::from_vec(2, 2, vec![0.2]).is_err());
    }

    #[test]
    fn centroid_single_column() {
        let mut m = BinaryMask::zeros(640, 480);
        band_column(&mut m, 100);
        band_column(&mut m, 101);
        let c = roi_centroids::<f64>(&m, 10);
        assert_eq!(c.x_left, Some(100.5));
        assert_eq!(c.x_right, None);
        assert_eq!(c.n_left, 18);

        let mut m = BinaryMask::zeros(640, 480);
        band_column(&mut m, 100);
        let c = roi_centroids::<f64>(&m, 9);
        assert_eq!(c.x_left, Some(100.0));
    }

    #[test]
    fn centroid_empty_band() {
        let mut m = BinaryMask::zeros(640, 480);
        m.set(100, 300, true);
        let c = roi_centroids::<f64>(&m, 1);
        assert_eq!((c.x_left, c.x_right), (None, None));
    }

    #[test]
    fn centroid_two_columns_mean() {
        let mut m = BinaryMask::zeros(640, 480);
        band_column(&mut m, 90);
        band_column(&mut m, 110);
        let c = roi_centroids::<f64>(&m, 10);
        assert_eq!(c.x_left, Some(100.0));
    }

    #[test]
    fn centroid_half_boundaries() {
        let mut m = BinaryMask::zeros(640, 480);
        band_column(&mut m, 320);
        band_column(&mut m, 321);
        let c = roi_centroids::<f64>(&m, 9);
        assert_eq!(c.x_left, Some(320.0));
        assert_eq!(c.x_right, Some(321.0));
    }

    #[test]
    fn centroid_below_min_count_is_absent() {
        let mut m = BinaryMask::zeros(640, 480);
        band_column(&mut m, 500);
        let c = roi_centroids::<f64>(&m, 10);
        assert_eq!(c.n_right, 9);
        assert_eq!(c.x_right, None);
    }

    #[test]
    fn offset_examples() {
        let c = RoICentroids {
            x_left: Some(280.0f64),
            x_right: Some(360.0),
            n_left: 10,
            n_right: 10,
        };
        let o = lateral_offset(&c, 0.6).unwrap();
        assert_eq!((o.delta0, o.delta, o.lane_width), (0.0, 0.0, 80.0));

        let c = RoICentroids {
            x_left: Some(300.0),
            x_right: Some(380.0),
            ..c
        };
        let o = lateral_offset(&c, 0.6).unwrap();
        assert_eq!(o.delta0, -20.0);
        assert!((o.delta - -12.0).abs() < 1e-12);
        assert_eq!(o.lane_width, 80.0);
        assert_eq!(DEFAULT_ALPHA, 0.6);

        let missing = RoICentroids::<f64> { x_right: None, ..c };
        assert_eq!(
            lateral_offset(&missing, 0.6),
            Err(ImageError::MissingCentroid("right"))
        );
    }

    #[test]
    fn metrics_examples() {
        let mut gt = BinaryMask::zeros(4, 4);
        for x in 0..4 {
            for y in 0..2 {
                gt.set(x, y, true);
            }
        }
        let s = seg_metrics::<f64>(&gt, &gt).unwrap();
        assert_eq!(
            (s.accuracy, s.precision, s.recall, s.f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        let pred = BinaryMask::zeros(4, 4);
        let s = seg_metrics::<f64>(&pred, &gt).unwrap();
        assert_eq!(
            (s.accuracy, s.precision, s.recall, s.f1),
            (0.5, 0.0, 0.0, 0.0)
        );

        // tp=1, fp=1, fn=0, tn=2
        let mut pred = BinaryMask::zeros(2, 2);
        pred.set(0, 0, true);
        pred.set(1, 0, true);
        let mut gt = BinaryMask::zeros(2, 2);
        gt.set(0, 0, true);
        let s = seg_metrics::<f64>(&pred, &gt).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.tn), (1, 1, 0, 2));
        assert_eq!((s.accuracy, s.precision, s.recall), (0.75, 0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);

        assert!(seg_metrics::<f64>(&BinaryMask::zeros(2, 3), &gt).is_err());
    }

    #[test]
    fn weighted_ce_examples() {
        let l = weighted_ce(&[0.0f64, 0.0], &[true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let l = weighted_ce(&[60.0f64, -60.0], &[true, false]).unwrap();
        assert!(l < 1e-12);

        let l = weighted_ce(&[0.3f64, -2.0, 5.0], &[false, false, false]).unwrap();
        assert_eq!(l, 0.0);

        assert_eq!(weighted_ce::<f64>(&[], &[]), Err(ImageError::EmptyBatch));
        assert!(weighted_ce(&[0.0f64], &[true, false]).is_err());
    }

    #[test]
    fn weighted_ce_saturated_scores_stay_finite() {
        let l = weighted_ce(&[-1e6f64, 1e6], &[true, false]).unwrap();
        assert!(l.is_finite());
        let l32 = weighted_ce(&[-1e6f32, 1e6], &[true, false]).unwrap();
        assert!(l32.is_finite());
    }
}
