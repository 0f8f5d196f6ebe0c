//! Perspective mapping between the camera view (pixels) and the top-down
//! ground view (meters), plus pinhole calibration and DLT estimation.
//!
//! Ground coordinates: `u` forward of the camera's ground point, `v` lateral,
//! positive to the left. Image coordinates: `x` right, `y` down, origin at
//! the top-left pixel center.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::scalar::{count, lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point maps to infinity (on or beyond the horizon)")]
    PointAtInfinity,
    #[error("homography is singular")]
    Singular,
    #[error("degenerate camera: {0}")]
    DegenerateCamera(&'static str),
    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("calibration must hold exactly one of `camera` or a 9-entry `matrix`")]
    BadCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint<T> {
    pub x: T,
    pub y: T,
}

impl<T> PixelPoint<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdvPoint<T> {
    pub u: T,
    pub v: T,
}

impl<T> TdvPoint<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }
}

/// Invertible projective map, stored normalized (`m[2][2] = 1` when that
/// entry is nonzero) together with its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    m: Mat<T, 3>,
    inv: Mat<T, 3>,
}

fn normalize<T: Real>(mut m: Mat<T, 3>) -> Mat<T, 3> {
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    let d = m[2][2];
    let k = if d.abs() > scale * lit(1e-12) {
        d
    } else {
        scale
    };
    if k != T::zero() {
        for v in m.iter_mut().flat_map(|r| r.iter_mut()) {
            *v /= k;
        }
    }
    m
}

fn apply_mat<T: Real>(m: &Mat<T, 3>, x: T, y: T) -> Result<(T, T), GeomError> {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    let scale = (m[2][0] * x).abs() + (m[2][1] * y).abs() + m[2][2].abs();
    let tol = lit::<T>(1e-10).max(T::epsilon() * lit(100.0));
    if !(w.abs() > scale * tol) || !w.is_finite() {
        return Err(GeomError::PointAtInfinity);
    }
    let px = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
    let py = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
    Ok((px, py))
}

impl<T: Real> Homography<T> {
    pub fn from_matrix(m: Mat<T, 3>) -> Result<Self, GeomError> {
        let m = normalize(m);
        let inv = linalg::inv3(&m).ok_or(GeomError::Singular)?;
        Ok(Self {
            m,
            inv: normalize(inv),
        })
    }

    /// Builds from 9 row-major entries.
    pub fn from_row_major(e: &[T]) -> Result<Self, GeomError> {
        if e.len() != 9 {
            return Err(GeomError::BadCalibration);
        }
        Self::from_matrix([[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]])
    }

    pub fn identity() -> Self {
        let m = linalg::identity::<T, 3>();
        Self { m, inv: m }
    }

    pub fn matrix(&self) -> &Mat<T, 3> {
        &self.m
    }

    pub fn inverse_matrix(&self) -> &Mat<T, 3> {
        &self.inv
    }

    pub fn inverse(&self) -> Self {
        Self {
            m: self.inv,
            inv: self.m,
        }
    }

    pub fn apply(&self, x: T, y: T) -> Result<(T, T), GeomError> {
        apply_mat(&self.m, x, y)
    }

    pub fn apply_inverse(&self, x: T, y: T) -> Result<(T, T), GeomError> {
        apply_mat(&self.inv, x, y)
    }
}

/// Camera view to top-down view.
pub fn pm<T: Real>(h: &Homography<T>, p: PixelPoint<T>) -> Result<TdvPoint<T>, GeomError> {
    let (u, v) = h.apply(p.x, p.y)?;
    Ok(TdvPoint { u, v })
}

/// Top-down view back to camera view.
pub fn ipm<T: Real>(h: &Homography<T>, q: TdvPoint<T>) -> Result<PixelPoint<T>, GeomError> {
    let (x, y) = h.apply_inverse(q.u, q.v)?;
    Ok(PixelPoint { x, y })
}

/// Ground meters per image column at `row`, measured between the principal
/// column and its right neighbour.
pub fn lateral_scale_at<T: Real>(h: &Homography<T>, column: T, row: T) -> Result<T, GeomError> {
    let a = pm(h, PixelPoint::new(column, row))?;
    let b = pm(h, PixelPoint::new(column + T::one(), row))?;
    Ok(((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt())
}

/// Forward-looking pinhole camera mounted `height` meters above flat ground,
/// pitched down by `pitch` radians, with zero roll and yaw. Images are 640×480.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel<T> {
    pub height: T,
    pub pitch: T,
    pub focal: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Default for CameraModel<T> {
    fn default() -> Self {
        Self {
            height: lit(1.2),
            pitch: lit(0.04),
            focal: lit(500.0),
            cx: lit(320.0),
            cy: lit(240.0),
        }
    }
}

impl<T: Real> CameraModel<T> {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.height > T::zero()) {
            return Err(GeomError::DegenerateCamera("height must be > 0"));
        }
        if !(self.focal > T::zero()) {
            return Err(GeomError::DegenerateCamera("focal must be > 0"));
        }
        if !(self.pitch > T::zero() && self.pitch < T::from(std::f64::consts::FRAC_PI_2).unwrap()) {
            return Err(GeomError::DegenerateCamera("pitch must lie in (0, pi/2)"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeomError::DegenerateCamera(
                "principal point must be finite",
            ));
        }
        Ok(())
    }

    /// Homogeneous ground→image matrix acting on `(u, v, 1)`.
    pub fn ground_to_image(&self) -> Mat<T, 3> {
        let (s, c) = self.pitch.sin_cos();
        let (f, h) = (self.focal, self.height);
        [
            [self.cx * c, -f, self.cx * h * s],
            [self.cy * c - f * s, T::zero(), f * h * c + self.cy * h * s],
            [c, T::zero(), h * s],
        ]
    }

    /// Depth along the optical axis of a ground point.
    pub fn depth(&self, g: TdvPoint<T>) -> T {
        let (s, c) = self.pitch.sin_cos();
        g.u * c + self.height * s
    }

    /// Pinhole projection of a ground point; `None` behind the image plane.
    pub fn project(&self, g: TdvPoint<T>) -> Option<PixelPoint<T>> {
        let (s, c) = self.pitch.sin_cos();
        let x_cam = -g.v;
        let y_cam = -g.u * s + self.height * c;
        let z_cam = g.u * c + self.height * s;
        if !(z_cam > lit(1e-6)) {
            return None;
        }
        Some(PixelPoint {
            x: self.cx + self.focal * x_cam / z_cam,
            y: self.cy + self.focal * y_cam / z_cam,
        })
    }

    /// Image row of the vanishing line of the ground plane.
    pub fn horizon_row(&self) -> T {
        self.cy - self.focal * self.pitch.tan()
    }
}

/// Image→ground homography for a calibrated pinhole camera.
pub fn homography_from_camera<T: Real>(cam: &CameraModel<T>) -> Result<Homography<T>, GeomError> {
    cam.validate()?;
    let g2i = Homography::from_matrix(cam.ground_to_image())?;
    Ok(g2i.inverse())
}

/// Calibration document: either a camera model or an explicit image→ground
/// matrix (row-major, 9 entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraModel<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<T>>,
}

impl<T: Real> Calibration<T> {
    pub fn homography(&self) -> Result<Homography<T>, GeomError> {
        match (&self.camera, &self.matrix) {
            (Some(cam), None) => homography_from_camera(cam),
            (None, Some(m)) => Homography::from_row_major(m),
            _ => Err(GeomError::BadCalibration),
        }
    }
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to √2.
fn hartley<T: Real>(pts: &[(T, T)]) -> Mat<T, 3> {
    let n = count::<T>(pts.len());
    let mx = pts.iter().map(|p| p.0).sum::<T>() / n;
    let my = pts.iter().map(|p| p.1).sum::<T>() / n;
    let mean_d = pts
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<T>()
        / n;
    let s = if mean_d > T::zero() {
        lit::<T>(2.0).sqrt() / mean_d
    } else {
        T::one()
    };
    [
        [s, T::zero(), -s * mx],
        [T::zero(), s, -s * my],
        [T::zero(), T::zero(), T::one()],
    ]
}

fn transform<T: Real>(t: &Mat<T, 3>, p: (T, T)) -> (T, T) {
    (
        t[0][0] * p.0 + t[0][1] * p.1 + t[0][2],
        t[1][0] * p.0 + t[1][1] * p.1 + t[1][2],
    )
}

fn collinear<T: Real>(a: (T, T), b: (T, T), c: (T, T)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let l1 = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let l2 = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
    cross.abs() <= lit::<T>(1e-9) * l1 * l2
}

/// Image point and the ground point it maps to.
pub type Correspondence<T> = ((T, T), (T, T));

/// Normalized DLT: least-squares homography mapping each `src` to its `dst`.
/// Exact on four non-degenerate pairs.
pub fn fit_homography<T: Real>(pairs: &[Correspondence<T>]) -> Result<Homography<T>, GeomError> {
    if pairs.len() < 4 {
        return Err(GeomError::DegenerateConfiguration("need at least 4 pairs"));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    if pairs.len() == 4 {
        for i in 0..4 {
            for j in i + 1..4 {
                for k in j + 1..4 {
                    if collinear(src[i], src[j], src[k]) || collinear(dst[i], dst[j], dst[k]) {
                        return Err(GeomError::DegenerateConfiguration("three collinear points"));
                    }
                }
            }
        }
    }
    let ts = hartley(&src);
    let td = hartley(&dst);
    let mut ata = linalg::zeros::<T, 9>();
    for (s, d) in src.iter().zip(&dst) {
        let (x, y) = transform(&ts, *s);
        let (xp, yp) = transform(&td, *d);
        let o = T::one();
        let z = T::zero();
        let r1 = [-x, -y, -o, z, z, z, xp * x, xp * y, xp];
        let r2 = [z, z, z, -x, -y, -o, yp * x, yp * y, yp];
        for row in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
    }
    let (vals, vecs) = linalg::sym_eigen(&ata);
    let top = vals[8].abs().max(T::min_positive_value());
    if vals[1].abs() <= top * lit(1e-12) {
        return Err(GeomError::DegenerateConfiguration(
            "correspondences do not determine a unique homography",
        ));
    }
    let hn: Mat<T, 3> = std::array::from_fn(|r| std::array::from_fn(|c| vecs[r * 3 + c][0]));
    let td_inv = linalg::inv3(&td).ok_or(GeomError::Singular)?;
    let h = linalg::mat_mul(&td_inv, &linalg::mat_mul(&hn, &ts));
    Homography::from_matrix(h)
        .map_err(|_| GeomError::DegenerateConfiguration("estimated homography is singular"))
}
