//! Temporal smoothing: mask averaging, scalar Kalman filtering of curvature
//! and block averaging of plotted series.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagekit::{GrayMask, ImageError};
use crate::scalar::{count, lit, Real};

pub const MASK_WINDOW: usize = 5;
pub const CURVATURE_WINDOW: usize = 15;
pub const BLOCK_SIZE: usize = 11;
pub const DEFAULT_Q: f64 = 1e-4;
pub const DEFAULT_R: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("curvature window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Sliding window of the most recent probability masks.
#[derive(Debug, Clone)]
pub struct MaskBuffer {
    capacity: usize,
    frames: VecDeque<GrayMask>,
}

impl Default for MaskBuffer {
    fn default() -> Self {
        Self::new(MASK_WINDOW)
    }
}

impl MaskBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            frames: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Appends `mask`, evicting the oldest beyond capacity, and returns the
    /// pixel-wise mean of the buffered masks.
    pub fn push_and_average(&mut self, mask: GrayMask) -> Result<GrayMask, FilterError> {
        if let Some(first) = self.frames.front() {
            first.same_shape(&mask)?;
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(mask);
        let n = self.frames.len();
        if n == 1 {
            return Ok(self.frames[0].clone());
        }
        let mut out = self.frames[0].clone();
        let mut acc: Vec<f32> = out.data().to_vec();
        for f in self.frames.iter().skip(1) {
            for (a, &p) in acc.iter_mut().zip(f.data()) {
                *a += p;
            }
        }
        let inv = 1.0 / n as f32;
        for (o, a) in out.data_mut().iter_mut().zip(acc) {
            *o = (a * inv).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams<T> {
    /// Process-noise variance.
    pub q: T,
    /// Measurement-noise variance.
    pub r: T,
}

impl<T: Real> Default for KalmanParams<T> {
    fn default() -> Self {
        Self {
            q: lit(DEFAULT_Q),
            r: lit(DEFAULT_R),
        }
    }
}

/// Random-walk scalar Kalman filter.
#[derive(Debug, Clone, Copy)]
pub struct ScalarKalman<T> {
    params: KalmanParams<T>,
    state: Option<(T, T)>,
}

impl<T: Real> ScalarKalman<T> {
    pub fn new(params: KalmanParams<T>) -> Self {
        Self {
            params,
            state: None,
        }
    }

    /// Feeds one measurement; the first one initialises `x = z`, `P = r`.
    pub fn update(&mut self, z: T) -> T {
        let KalmanParams { q, r } = self.params;
        let (x, p) = match self.state {
            None => (z, r),
            Some((x, p)) => {
                let p_pred = p + q;
                let k = p_pred / (p_pred + r);
                (x + k * (z - x), (T::one() - k) * p_pred)
            }
        };
        self.state = Some((x, p));
        x
    }

    pub fn estimate(&self) -> Option<T> {
        self.state.map(|s| s.0)
    }

    pub fn variance(&self) -> Option<T> {
        self.state.map(|s| s.1)
    }
}

/// The most recent curvature measurements, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureWindow<T> {
    capacity: usize,
    values: VecDeque<T>,
}

impl<T: Real> Default for CurvatureWindow<T> {
    fn default() -> Self {
        Self::new(CURVATURE_WINDOW)
    }
}

impl<T: Real> CurvatureWindow<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn from_values(capacity: usize, values: &[T]) -> Self {
        let mut w = Self::new(capacity);
        values.iter().for_each(|&v| w.push(v));
        w
    }

    pub fn push(&mut self, kappa: T) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(kappa);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().copied()
    }
}

/// Runs a fresh filter over the window, oldest to newest, and returns the
/// final posterior mean.
pub fn kalman_estimate<T: Real>(
    window: &CurvatureWindow<T>,
    params: &KalmanParams<T>,
) -> Result<T, FilterError> {
    let mut kf = ScalarKalman::new(*params);
    let mut out = None;
    for z in window.values() {
        out = Some(kf.update(z));
    }
    out.ok_or(FilterError::EmptyWindow)
}

/// Means of consecutive blocks of `block` values; a trailing partial block
/// contributes the mean of its members.
///
/// # Panics
/// If `block` is zero.
pub fn block_average<T: Real>(series: &[T], block: usize) -> Vec<T> {
    assert!(block >= 1, "block size must be at least 1");
    series
        .chunks(block)
        .map(|c| c.iter().copied().sum::<T>() / count(c.len()))
        .collect()
}

/// One block of a series with missing entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    /// Mean of the present members; `None` if every member was missing.
    pub mean: Option<T>,
    /// Frames in the block, present or not.
    pub len: usize,
    pub partial: bool,
}

/// Block averaging that skips missing values.
pub fn block_average_masked<T: Real>(series: &[Option<T>], block: usize) -> Vec<Block<T>> {
    assert!(block >= 1, "block size must be at least 1");
    series
        .chunks(block)
        .map(|c| {
            let present: Vec<T> = c.iter().flatten().copied().collect();
            Block {
                mean: (!present.is_empty())
                    .then(|| present.iter().copied().sum::<T>() / count(present.len())),
                len: c.len(),
                partial: c.len() < block,
            }
        })
        .collect()
}
