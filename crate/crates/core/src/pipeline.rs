//! Per-frame orchestration: mask averaging, binarization, RoI offset,
//! clustering, ground mapping, lane fitting, path prediction, curvature and
//! Kalman smoothing, plus the camera-view overlay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clusterer::{self, dbscan_counted, extract_dots, rank_lane_clusters};
use crate::estfilter::{
    self, kalman_estimate, CurvatureWindow, FilterError, KalmanParams, MaskBuffer,
};
use crate::imagekit::{self, binarize, lateral_offset, roi_centroids, GrayMask};
use crate::lanefit::{
    self, curvature, fit_parallel, middle_line, path_polynomial, world_curvature, CurvatureFormula,
    FitParams, LaneModel, PathMode, Quadratic, RlsState,
};
use crate::pnm::RgbImage;
use crate::scalar::{count, lit, Real};
use crate::viewgeom::{ipm, lateral_scale_at, pm, Homography, PixelPoint, TdvPoint};

/// Image row at the middle of the RoI band.
pub const ROI_CENTER_ROW: usize = 340;
/// Ground points farther than this are not used for fitting.
pub const DEFAULT_MAX_RANGE: f64 = 20.0;
/// Step between TDV samples drawn into the overlay, meters.
pub const OVERLAY_STEP: f64 = 0.5;

pub const LANE_COLOR: [u8; 3] = [0, 0, 255];
pub const PATH_COLOR: [u8; 3] = [0, 255, 0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("homography is not calibrated for this image: {0}")]
    NotCalibrated(String),
    #[error("no lane model available")]
    NoLaneModel,
    #[error(transparent)]
    Mask(#[from] FilterError),
}

/// A parameter that violates its precondition.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig<T> {
    pub threshold: f32,
    pub eps: T,
    pub min_pts: usize,
    pub min_cluster_dots: usize,
    pub alpha: T,
    pub beta: T,
    pub u_s: T,
    pub u_f: T,
    pub max_range: T,
    pub fit: FitParams<T>,
    pub kalman: KalmanParams<T>,
    pub min_roi_count: usize,
    pub path_mode: PathMode,
    pub curvature_formula: CurvatureFormula,
    pub mask_window: usize,
    pub kappa_window: usize,
    /// When false every frame is processed independently: no mask
    /// averaging, no RLS prior, and `kappa_hat` equals `kappa_raw`.
    pub temporal: bool,
    pub overlay: bool,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            threshold: imagekit::DEFAULT_THRESHOLD,
            eps: lit(clusterer::DEFAULT_EPS),
            min_pts: clusterer::DEFAULT_MIN_PTS,
            min_cluster_dots: clusterer::DEFAULT_MIN_CLUSTER_DOTS,
            alpha: lit(imagekit::DEFAULT_ALPHA),
            beta: T::one(),
            u_s: lit(lanefit::DEFAULT_U_START),
            u_f: lit(lanefit::DEFAULT_U_FINAL),
            max_range: lit(DEFAULT_MAX_RANGE),
            fit: FitParams::default(),
            kalman: KalmanParams::default(),
            min_roi_count: imagekit::DEFAULT_MIN_ROI_COUNT,
            path_mode: PathMode::default(),
            curvature_formula: CurvatureFormula::default(),
            mask_window: estfilter::MASK_WINDOW,
            kappa_window: estfilter::CURVATURE_WINDOW,
            temporal: true,
            overlay: false,
        }
    }
}

impl<T: Real> PipelineConfig<T> {
    pub fn validate(&self) -> Result<(), ParamError> {
        let fail = |field, reason| Err(ParamError { field, reason });
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold", "must lie in (0, 1)");
        }
        if !(self.eps > T::zero()) {
            return fail("eps", "must be > 0");
        }
        if self.min_pts < 1 {
            return fail("min_pts", "must be >= 1");
        }
        if !self.alpha.is_finite() {
            return fail("alpha", "must be finite");
        }
        if !(self.beta > T::zero()) {
            return fail("beta", "must be > 0");
        }
        if !(self.u_s >= T::zero()) {
            return fail("u_s", "must be >= 0");
        }
        if !(self.u_f > self.u_s) {
            return fail("u_f", "must be > u_s");
        }
        if !(self.max_range > T::zero()) {
            return fail("max_range", "must be > 0");
        }
        if !(self.fit.forgetting > T::zero() && self.fit.forgetting <= T::one()) {
            return fail("forgetting", "must lie in (0, 1]");
        }
        if !(self.fit.ridge >= T::zero()) {
            return fail("ridge", "must be >= 0");
        }
        if !(self.kalman.q >= T::zero()) {
            return fail("q", "must be >= 0");
        }
        if !(self.kalman.r > T::zero()) {
            return fail("r", "must be > 0");
        }
        if self.mask_window < 1 {
            return fail("mask_window", "must be >= 1");
        }
        if self.kappa_window < 1 {
            return fail("kappa_window", "must be >= 1");
        }
        Ok(())
    }
}

/// Work done on one frame, for complexity checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub foreground_pixels: usize,
    pub dots: usize,
    pub distance_checks: u64,
    pub fit_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult<T> {
    pub frame_idx: usize,
    pub kappa_raw: Option<T>,
    pub kappa_hat: Option<T>,
    pub delta_px: Option<T>,
    pub delta_m: Option<T>,
    pub kappa_avail: bool,
    pub delta_avail: bool,
    pub lane_model: Option<LaneModel<T>>,
    pub path: Option<Quadratic<T>>,
    /// True when the lane model was fitted on this frame rather than reused.
    pub fit_fresh: bool,
    pub ops: OpCounts,
    pub overlay: Option<RgbImage>,
}

/// One in-order frame stream with its temporal state.
#[derive(Debug, Clone)]
pub struct Session<T: Real> {
    h: Homography<T>,
    cfg: PipelineConfig<T>,
    meters_per_px: T,
    masks: MaskBuffer,
    rls: Option<RlsState<T>>,
    last_model: Option<LaneModel<T>>,
    window: CurvatureWindow<T>,
    next_idx: usize,
}

impl<T: Real> Session<T> {
    /// Fails with `NotCalibrated` unless the RoI center maps to a finite
    /// ground point ahead of the camera.
    pub fn new(h: Homography<T>, cfg: PipelineConfig<T>) -> Result<Self, PipelineError> {
        let row = count::<T>(ROI_CENTER_ROW);
        let col = count::<T>(imagekit::IMAGE_CENTER_X);
        let g = pm(&h, PixelPoint::new(col, row))
            .map_err(|e| PipelineError::NotCalibrated(e.to_string()))?;
        if !(g.u > T::zero() && g.u.is_finite() && g.v.is_finite()) {
            return Err(PipelineError::NotCalibrated(
                "RoI row does not map ahead of the camera".into(),
            ));
        }
        let meters_per_px = lateral_scale_at(&h, col, row)
            .map_err(|e| PipelineError::NotCalibrated(e.to_string()))?;
        let mask_window = if cfg.temporal { cfg.mask_window } else { 1 };
        Ok(Self {
            h,
            cfg,
            meters_per_px,
            masks: MaskBuffer::new(mask_window),
            rls: None,
            last_model: None,
            window: CurvatureWindow::new(cfg.kappa_window),
            next_idx: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig<T> {
        &self.cfg
    }

    pub fn homography(&self) -> &Homography<T> {
        &self.h
    }

    /// Ground meters per pixel column at the RoI center row.
    pub fn meters_per_px(&self) -> T {
        self.meters_per_px
    }

    pub fn last_model(&self) -> Option<&LaneModel<T>> {
        self.last_model.as_ref()
    }

    pub fn process_frame(&mut self, mask: GrayMask) -> Result<FrameResult<T>, PipelineError> {
        let cfg = self.cfg;
        let frame_idx = self.next_idx;
        let averaged = self.masks.push_and_average(mask)?;
        self.next_idx += 1;
        let bin = binarize(&averaged, cfg.threshold);
        let mut ops = OpCounts {
            foreground_pixels: bin.count_ones(),
            ..OpCounts::default()
        };

        let centroids = roi_centroids::<T>(&bin, cfg.min_roi_count);
        let offset = lateral_offset(&centroids, cfg.alpha).ok();
        let delta_px = offset.map(|o| o.delta);
        let delta_m = delta_px.map(|d| d * self.meters_per_px);

        let dots = extract_dots::<T>(&bin);
        ops.dots = dots.len();
        let db = dbscan_counted(&dots, cfg.eps, cfg.min_pts);
        ops.distance_checks = db.distance_checks;
        let sel = rank_lane_clusters(&db.clustering, &dots, &self.h, cfg.min_cluster_dots);
        let in_range = |pts: Vec<TdvPoint<T>>| -> Vec<TdvPoint<T>> {
            pts.into_iter().filter(|p| p.u <= cfg.max_range).collect()
        };
        let left = sel.left.map(|c| in_range(c.ground)).unwrap_or_default();
        let right = sel.right.map(|c| in_range(c.ground)).unwrap_or_default();
        ops.fit_points = left.len() + right.len();

        let prior = if cfg.temporal {
            self.rls.as_ref()
        } else {
            None
        };
        let both = !left.is_empty() && !right.is_empty();
        let attempt = if both || prior.is_some() {
            fit_parallel(&left, &right, prior, &cfg.fit)
        } else {
            Err(lanefit::FitError::InsufficientData(
                "no lane line on one side",
            ))
        };
        let fit_fresh = match attempt {
            Ok((model, state)) => {
                self.last_model = Some(model);
                self.rls = Some(state);
                true
            }
            Err(e) => {
                log::debug!("frame {frame_idx}: fit failed ({e}), reusing previous model");
                false
            }
        };

        let mut path = None;
        let mut kappa_raw = None;
        if let Some(model) = &self.last_model {
            let p = path_polynomial(&middle_line(model), cfg.u_s, cfg.u_f, cfg.path_mode)
                .expect("u_f > u_s is validated");
            let k0 = curvature(&p, cfg.u_s, cfg.curvature_formula);
            path = Some(p);
            kappa_raw = Some(world_curvature(k0, cfg.beta));
        }
        let kappa_hat = match kappa_raw {
            Some(k) if cfg.temporal => {
                self.window.push(k);
                Some(kalman_estimate(&self.window, &cfg.kalman)?)
            }
            other => other,
        };

        let mut result = FrameResult {
            frame_idx,
            kappa_raw,
            kappa_hat,
            delta_px,
            delta_m,
            kappa_avail: kappa_hat.is_some(),
            delta_avail: delta_m.is_some(),
            lane_model: self.last_model,
            path,
            fit_fresh,
            ops,
            overlay: None,
        };
        if cfg.overlay && result.lane_model.is_some() {
            let ov = render_overlay(&result, &self.h, &cfg, Some(&averaged))?;
            result.overlay = Some(ov.image);
        }
        Ok(result)
    }
}

/// Rendered overlay and the pixel positions of the sampled curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay<T> {
    pub image: RgbImage,
    pub left: Vec<PixelPoint<T>>,
    pub right: Vec<PixelPoint<T>>,
    pub path: Vec<PixelPoint<T>>,
}

fn sample_curve<T: Real>(h: &Homography<T>, q: &Quadratic<T>, u0: T, u1: T) -> Vec<PixelPoint<T>> {
    let step = lit::<T>(OVERLAY_STEP);
    let n = ((u1 - u0) / step).floor().to_usize().unwrap_or(0);
    (0..=n)
        .filter_map(|i| {
            let u = u0 + count::<T>(i) * step;
            ipm(h, TdvPoint::new(u, q.eval(u))).ok()
        })
        .filter(|p| p.x.is_finite() && p.y.is_finite())
        .collect()
}

fn draw_polyline<T: Real>(img: &mut RgbImage, pts: &[PixelPoint<T>], rgb: [u8; 3]) {
    let px = |p: &PixelPoint<T>| {
        (
            p.x.round().to_i64().unwrap_or(i64::MIN / 2),
            p.y.round().to_i64().unwrap_or(i64::MIN / 2),
        )
    };
    for w in pts.windows(2) {
        img.draw_line(px(&w[0]), px(&w[1]), rgb);
    }
    if let [only] = pts {
        let (x, y) = px(only);
        img.put(x, y, rgb);
    }
}

/// Draws the fitted lane lines (blue) and the driving path (green) over
/// `[u_s, u_f]` on a camera-view canvas.
pub fn render_overlay<T: Real>(
    result: &FrameResult<T>,
    h: &Homography<T>,
    cfg: &PipelineConfig<T>,
    background: Option<&GrayMask>,
) -> Result<Overlay<T>, PipelineError> {
    let model = result
        .lane_model
        .as_ref()
        .ok_or(PipelineError::NoLaneModel)?;
    let path = match result.path {
        Some(p) => p,
        None => path_polynomial(&middle_line(model), cfg.u_s, cfg.u_f, cfg.path_mode)
            .map_err(|_| PipelineError::NoLaneModel)?,
    };
    let mut image = match background {
        Some(m) => RgbImage::from_mask(m),
        None => RgbImage::new(imagekit::IMAGE_WIDTH, imagekit::IMAGE_HEIGHT),
    };
    let left = sample_curve(h, &model.left(), cfg.u_s, cfg.u_f);
    let right = sample_curve(h, &model.right(), cfg.u_s, cfg.u_f);
    let path_px = sample_curve(h, &path, cfg.u_s, cfg.u_f);
    draw_polyline(&mut image, &left, LANE_COLOR);
    draw_polyline(&mut image, &right, LANE_COLOR);
    draw_polyline(&mut image, &path_px, PATH_COLOR);
    Ok(Overlay {
        image,
        left,
        right,
        path: path_px,
    })
}
