//! Parallel quadratic lane fitting, driving-path construction and curvature.
//!
//! Both lane lines are modelled as `v = a·u² + b·u + c` in the top-down view
//! with shared `(a, b)` and separate intercepts. The least-squares normal
//! equations of each line are accumulated across frames with exponential
//! forgetting, which gives the recursive least-squares behaviour.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::scalar::{count, lit, Real};
use crate::viewgeom::TdvPoint;

pub const DEFAULT_FORGETTING: f64 = 0.9;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_U_START: f64 = 5.0;
pub const DEFAULT_U_FINAL: f64 = 30.0;
/// Minimum forward extent of a line's points when there is no prior state.
pub const MIN_SPAN: f64 = 5.0;
/// Condition number beyond which the joint system is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Forward distances are divided by this before forming normal equations.
const U_SCALE: f64 = 10.0;
const REFINE_STEPS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("insufficient data: {0}")]
    InsufficientData(&'static str),
    #[error("normal equations ill-conditioned (condition estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("fitted lines cross: c_left={0} <= c_right={1}")]
    CrossedLines(f64, f64),
    #[error("degenerate interval: u_f={1} must exceed u_s={0}")]
    DegenerateInterval(f64, f64),
}

/// `f(u) = a·u² + b·u + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Quadratic<T> {
    pub fn new(a: T, b: T, c: T) -> Self {
        Self { a, b, c }
    }

    pub fn eval(&self, u: T) -> T {
        (self.a * u + self.b) * u + self.c
    }

    pub fn slope(&self, u: T) -> T {
        lit::<T>(2.0) * self.a * u + self.b
    }

    pub fn second(&self) -> T {
        lit::<T>(2.0) * self.a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneModel<T> {
    pub a: T,
    pub b: T,
    pub c_left: T,
    pub c_right: T,
    pub n_points_used: usize,
    pub residual_rms: T,
}

impl<T: Real> LaneModel<T> {
    pub fn left(&self) -> Quadratic<T> {
        Quadratic::new(self.a, self.b, self.c_left)
    }

    pub fn right(&self) -> Quadratic<T> {
        Quadratic::new(self.a, self.b, self.c_right)
    }
}

/// Accumulated normal equations of one line in the scaled basis
/// `(s², s, 1)` with `s = u / 10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineNormals<T> {
    pub g: Mat<T, 3>,
    pub r: [T; 3],
}

impl<T: Real> Default for LineNormals<T> {
    fn default() -> Self {
        Self {
            g: linalg::zeros(),
            r: [T::zero(); 3],
        }
    }
}

impl<T: Real> LineNormals<T> {
    pub fn from_points(points: &[TdvPoint<T>]) -> Self {
        let mut out = Self::default();
        for p in points {
            let s = p.u / lit(U_SCALE);
            let phi = [s * s, s, T::one()];
            for i in 0..3 {
                for j in 0..3 {
                    out.g[i][j] += phi[i] * phi[j];
                }
                out.r[i] += phi[i] * p.v;
            }
        }
        out
    }

    fn blended(&self, prev: Option<&LineNormals<T>>, gamma: T) -> Self {
        let mut out = *self;
        if let Some(p) = prev {
            for i in 0..3 {
                for j in 0..3 {
                    out.g[i][j] += gamma * p.g[i][j];
                }
                out.r[i] += gamma * p.r[i];
            }
        }
        out
    }
}

/// Recursive least-squares state carried between frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlsState<T> {
    pub left: LineNormals<T>,
    pub right: LineNormals<T>,
    pub forgetting: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams<T> {
    /// Weight `γ ∈ (0, 1]` applied to the previous frame's normal equations.
    pub forgetting: T,
    /// Ridge `λ` added to the joint normal matrix diagonal.
    pub ridge: T,
}

impl<T: Real> Default for FitParams<T> {
    fn default() -> Self {
        Self {
            forgetting: lit(DEFAULT_FORGETTING),
            ridge: lit(DEFAULT_RIDGE),
        }
    }
}

fn span<T: Real>(points: &[TdvPoint<T>]) -> T {
    let lo = points.iter().map(|p| p.u).fold(T::infinity(), T::min);
    let hi = points.iter().map(|p| p.u).fold(T::neg_infinity(), T::max);
    hi - lo
}

/// Joint normal matrix over `(a', b', c_L, c_R)` in the scaled basis.
pub(crate) fn joint_system<T: Real>(l: &LineNormals<T>, r: &LineNormals<T>) -> (Mat<T, 4>, [T; 4]) {
    let z = T::zero();
    let g = [
        [
            l.g[0][0] + r.g[0][0],
            l.g[0][1] + r.g[0][1],
            l.g[0][2],
            r.g[0][2],
        ],
        [
            l.g[1][0] + r.g[1][0],
            l.g[1][1] + r.g[1][1],
            l.g[1][2],
            r.g[1][2],
        ],
        [l.g[2][0], l.g[2][1], l.g[2][2], z],
        [r.g[2][0], r.g[2][1], z, r.g[2][2]],
    ];
    let rhs = [l.r[0] + r.r[0], l.r[1] + r.r[1], l.r[2], r.r[2]];
    (g, rhs)
}

/// Fits the parallel pair, blending in the prior state when given.
///
/// Without a prior, each side needs at least 3 points spanning 5 m forward.
/// The ridge-stabilised solve is followed by a few steps of iterative
/// refinement against the unregularised system, so a well-conditioned
/// problem converges to the plain least-squares solution.
pub fn fit_parallel<T: Real>(
    left: &[TdvPoint<T>],
    right: &[TdvPoint<T>],
    state: Option<&RlsState<T>>,
    params: &FitParams<T>,
) -> Result<(LaneModel<T>, RlsState<T>), FitError> {
    if state.is_none() {
        let sides = [
            (
                left,
                "left line has fewer than 3 points",
                "left line spans less than 5 m",
            ),
            (
                right,
                "right line has fewer than 3 points",
                "right line spans less than 5 m",
            ),
        ];
        for (pts, too_few, too_short) in sides {
            if pts.len() < 3 {
                return Err(FitError::InsufficientData(too_few));
            }
            if span(pts) < lit(MIN_SPAN) {
                return Err(FitError::InsufficientData(too_short));
            }
        }
    }
    let gamma = params.forgetting;
    let now_l = LineNormals::from_points(left);
    let now_r = LineNormals::from_points(right);
    let bl = now_l.blended(state.map(|s| &s.left), gamma);
    let br = now_r.blended(state.map(|s| &s.right), gamma);
    let (g, rhs) = joint_system(&bl, &br);

    let mut reg = g;
    for (i, row) in reg.iter_mut().enumerate() {
        row[i] += params.ridge;
    }
    let (eig, _) = linalg::sym_eigen(&reg);
    let cond = if eig[0] > T::zero() {
        eig[3] / eig[0]
    } else {
        T::infinity()
    };
    if !(cond <= lit(MAX_CONDITION)) {
        return Err(FitError::IllConditioned(crate::scalar::to_f64(cond)));
    }
    let mut x = linalg::solve(&reg, &rhs).ok_or(FitError::IllConditioned(f64::INFINITY))?;
    for _ in 0..REFINE_STEPS {
        let gx = linalg::mat_vec(&g, &x);
        let resid: [T; 4] = std::array::from_fn(|i| rhs[i] - gx[i]);
        match linalg::solve(&reg, &resid) {
            Some(dx) => (0..4).for_each(|i| x[i] += dx[i]),
            None => break,
        }
    }

    let k = lit::<T>(U_SCALE);
    let model_a = x[0] / (k * k);
    let model_b = x[1] / k;
    let (c_left, c_right) = (x[2], x[3]);
    if !(c_left > c_right) {
        return Err(FitError::CrossedLines(
            crate::scalar::to_f64(c_left),
            crate::scalar::to_f64(c_right),
        ));
    }
    let ql = Quadratic::new(model_a, model_b, c_left);
    let qr = Quadratic::new(model_a, model_b, c_right);
    let sq: T = left
        .iter()
        .map(|p| (ql.eval(p.u) - p.v).powi(2))
        .chain(right.iter().map(|p| (qr.eval(p.u) - p.v).powi(2)))
        .sum();
    let n = left.len() + right.len();
    let residual_rms = if n > 0 {
        (sq / count(n)).sqrt()
    } else {
        T::zero()
    };
    Ok((
        LaneModel {
            a: model_a,
            b: model_b,
            c_left,
            c_right,
            n_points_used: n,
            residual_rms,
        },
        RlsState {
            left: bl,
            right: br,
            forgetting: gamma,
        },
    ))
}

pub fn middle_line<T: Real>(model: &LaneModel<T>) -> Quadratic<T> {
    Quadratic::new(model.a, model.b, (model.c_left + model.c_right) / lit(2.0))
}

/// How the start point of the driving path is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// Start on the middle line (the path then coincides with it).
    #[default]
    Middle,
    /// Start at the vehicle's lateral position `v = 0`.
    Anchored,
}

/// Quadratic through the start and end of the middle line with the middle
/// line's tangent at the start.
pub fn path_polynomial<T: Real>(
    middle: &Quadratic<T>,
    u_s: T,
    u_f: T,
    mode: PathMode,
) -> Result<Quadratic<T>, FitError> {
    if !(u_f > u_s) {
        return Err(FitError::DegenerateInterval(
            crate::scalar::to_f64(u_s),
            crate::scalar::to_f64(u_f),
        ));
    }
    let start = match mode {
        PathMode::Middle => middle.eval(u_s),
        PathMode::Anchored => T::zero(),
    };
    let end = middle.eval(u_f);
    let tangent = middle.slope(u_s);
    let len = u_f - u_s;
    // f(u) = A (u - u_s)² + B (u - u_s) + C
    let c0 = start;
    let b0 = tangent;
    let a0 = (end - c0 - b0 * len) / (len * len);
    Ok(Quadratic {
        a: a0,
        b: b0 - lit::<T>(2.0) * a0 * u_s,
        c: a0 * u_s * u_s - b0 * u_s + c0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureFormula {
    /// `f'' / (1 + f'²)^{3/2}`
    #[default]
    Standard,
    /// `f'' / (1 + f')^{3/2}`, the unsquared variant, for comparison.
    LinearSlope,
}

/// Signed curvature of `f` at `u_s`; positive when the path bends left.
pub fn curvature<T: Real>(f: &Quadratic<T>, u_s: T, formula: CurvatureFormula) -> T {
    let d1 = f.slope(u_s);
    let base = match formula {
        CurvatureFormula::Standard => T::one() + d1 * d1,
        CurvatureFormula::LinearSlope => T::one() + d1,
    };
    f.second() / base.powf(lit(1.5))
}

/// Scales a view-space curvature into world units.
pub fn world_curvature<T: Real>(kappa0: T, beta: T) -> T {
    beta * kappa0
}
