//! Lane-perception post-processing and path prediction.
//!
//! Every numeric stage is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod clusterer;
pub mod estfilter;
pub mod evalkit;
pub mod imagekit;
pub mod lanefit;
pub mod linalg;
pub mod netarch;
pub mod pipeline;
pub mod pnm;
pub mod scalar;
pub mod simworld;
pub mod viewgeom;

pub use scalar::Real;

pub type Homography = viewgeom::Homography<f64>;
pub type CameraModel = viewgeom::CameraModel<f64>;
pub type Calibration = viewgeom::Calibration<f64>;
pub type LaneModel = lanefit::LaneModel<f64>;
pub type Quadratic = lanefit::Quadratic<f64>;
pub type RlsState = lanefit::RlsState<f64>;
pub type FitParams = lanefit::FitParams<f64>;
pub type KalmanParams = estfilter::KalmanParams<f64>;
pub type CurvatureWindow = estfilter::CurvatureWindow<f64>;
