//! Synthetic flat track, mask renderer, Frenet-frame kinematic bicycle and
//! the static / closed-loop drivers that pair pipeline output with ground
//! truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagekit::{GrayMask, IMAGE_CENTER_X, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::pipeline::{PipelineConfig, PipelineError, Session, ROI_CENTER_ROW};
use crate::viewgeom::{homography_from_camera, pm, CameraModel, GeomError, PixelPoint, TdvPoint};

pub const DEFAULT_LANE_WIDTH: f64 = 3.5;
pub const MAX_TRACK_CURVATURE: f64 = 0.07;
/// Trapezoid step for positions along curvature blends, meters.
pub const INTEGRATION_STEP: f64 = 0.1;
/// Spacing of lane-line samples when rendering, meters.
pub const SAMPLE_STEP: f64 = 0.25;
pub const VIEW_RANGE: f64 = 60.0;
pub const DEFAULT_LINE_WIDTH: f64 = 0.12;
pub const WHEELBASE: f64 = 2.7;
pub const STEER_GAIN: f64 = 0.8;
pub const MAX_STEER: f64 = 0.5;
pub const FRAME_RATE: f64 = 20.0;
pub const DEFAULT_SPEED_KMH: f64 = 50.0;
pub const MAX_SPEED_KMH: f64 = 70.0;
pub const BENCHMARK_LENGTH: f64 = 3919.0;

/// Nearest ground distance at which quad corners are still projected.
const MIN_RENDER_U: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid track: {0}")]
    InvalidSpec(String),
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("vehicle left the lane at s = {s:.2} m (d = {d:.3} m)")]
    OffLane { s: f64, d: f64 },
    #[error(transparent)]
    Camera(#[from] GeomError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub length: f64,
    pub curvature: f64,
    /// Length at the start of this segment over which curvature ramps
    /// linearly from the previous segment's value. Ignored on the first
    /// segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blend: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    /// Blend used by segments that do not set their own.
    #[serde(default)]
    pub default_blend: f64,
    pub segments: Vec<SegmentSpec>,
}

fn default_lane_width() -> f64 {
    DEFAULT_LANE_WIDTH
}

impl TrackSpec {
    pub fn straight(length: f64) -> Self {
        Self::constant(length, 0.0)
    }

    pub fn constant(length: f64, curvature: f64) -> Self {
        Self {
            lane_width: DEFAULT_LANE_WIDTH,
            default_blend: 0.0,
            segments: vec![SegmentSpec {
                length,
                curvature,
                blend: None,
            }],
        }
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn max_abs_curvature(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.curvature.abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return bad("lane_width must be > 0".into());
        }
        if !(self.default_blend >= 0.0) {
            return bad("default_blend must be >= 0".into());
        }
        if self.segments.is_empty() {
            return bad("at least one segment is required".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.length > 0.0 && s.length.is_finite()) {
                return bad(format!("segments[{i}].length must be > 0"));
            }
            if !(s.curvature.abs() <= MAX_TRACK_CURVATURE) {
                return bad(format!(
                    "segments[{i}].curvature must satisfy |k| <= {MAX_TRACK_CURVATURE}"
                ));
            }
            let blend = s.blend.unwrap_or(self.default_blend);
            if !(blend >= 0.0 && blend <= s.length) {
                return bad(format!("segments[{i}].blend must lie in [0, length]"));
            }
        }
        Ok(())
    }

    /// 3919 m mix of straights, R100–R500 arcs in both directions and
    /// blended transitions, including one S-bend.
    pub fn benchmark() -> Self {
        let seg = |length: f64, radius: f64, blend: f64| SegmentSpec {
            length,
            curvature: if radius == 0.0 { 0.0 } else { 1.0 / radius },
            blend: Some(blend),
        };
        Self {
            lane_width: DEFAULT_LANE_WIDTH,
            default_blend: 0.0,
            segments: vec![
                seg(300.0, 0.0, 0.0),
                seg(400.0, 200.0, 60.0),
                seg(250.0, 0.0, 60.0),
                seg(300.0, -100.0, 80.0),
                seg(250.0, 150.0, 100.0),
                seg(300.0, 0.0, 60.0),
                seg(400.0, -500.0, 40.0),
                seg(350.0, 300.0, 80.0),
                seg(280.0, 0.0, 60.0),
                seg(300.0, 120.0, 80.0),
                seg(789.0, 0.0, 80.0),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    /// Point `offset` meters to the left of this pose.
    pub fn left_of(&self, offset: f64) -> (f64, f64) {
        (
            self.x - offset * self.theta.sin(),
            self.y + offset * self.theta.cos(),
        )
    }
}

/// Pose after `ds` meters of constant curvature `k`.
fn advance_constant(p: Pose, k: f64, ds: f64) -> Pose {
    let theta = p.theta + k * ds;
    if (k * ds).abs() < 1e-9 {
        let mid = p.theta + 0.5 * k * ds;
        return Pose {
            x: p.x + ds * mid.cos(),
            y: p.y + ds * mid.sin(),
            theta,
        };
    }
    Pose {
        x: p.x + (theta.sin() - p.theta.sin()) / k,
        y: p.y - (theta.cos() - p.theta.cos()) / k,
        theta,
    }
}

#[derive(Debug, Clone)]
struct Piece {
    s0: f64,
    len: f64,
    k0: f64,
    k1: f64,
    start: Pose,
    /// Positions every `INTEGRATION_STEP` along a blend; empty otherwise.
    table: Vec<(f64, f64)>,
}

impl Piece {
    fn kappa(&self, ds: f64) -> f64 {
        self.k0 + (self.k1 - self.k0) * ds / self.len
    }

    fn theta(&self, ds: f64) -> f64 {
        self.start.theta + self.k0 * ds + 0.5 * (self.k1 - self.k0) * ds * ds / self.len
    }

    fn is_blend(&self) -> bool {
        self.k0 != self.k1
    }

    fn build_table(&mut self) {
        let n = (self.len / INTEGRATION_STEP).ceil() as usize;
        let mut table = Vec::with_capacity(n + 1);
        let (mut x, mut y) = (self.start.x, self.start.y);
        table.push((x, y));
        for j in 0..n {
            let a = j as f64 * INTEGRATION_STEP;
            let b = ((j + 1) as f64 * INTEGRATION_STEP).min(self.len);
            let (ta, tb) = (self.theta(a), self.theta(b));
            x += 0.5 * (b - a) * (ta.cos() + tb.cos());
            y += 0.5 * (b - a) * (ta.sin() + tb.sin());
            table.push((x, y));
        }
        self.table = table;
    }

    fn pose(&self, ds: f64) -> Pose {
        if !self.is_blend() {
            return advance_constant(self.start, self.k0, ds);
        }
        let j = ((ds / INTEGRATION_STEP).floor() as usize).min(self.table.len() - 1);
        let a = j as f64 * INTEGRATION_STEP;
        let (x, y) = self.table[j];
        let (ta, tb) = (self.theta(a), self.theta(ds));
        Pose {
            x: x + 0.5 * (ds - a) * (ta.cos() + tb.cos()),
            y: y + 0.5 * (ds - a) * (ta.sin() + tb.sin()),
            theta: tb,
        }
    }
}

/// Arc-length parameterised centerline. Beyond either end the track
/// continues with the curvature it has there.
#[derive(Debug, Clone)]
pub struct Track {
    pieces: Vec<Piece>,
    length: f64,
    lane_width: f64,
}

impl Track {
    pub fn build(spec: &TrackSpec) -> Result<Self, SimError> {
        spec.validate()?;
        let mut pieces: Vec<Piece> = Vec::new();
        let mut s0 = 0.0;
        let mut pose = Pose::default();
        let mut k_prev = spec.segments[0].curvature;
        for (i, seg) in spec.segments.iter().enumerate() {
            let blend = if i == 0 {
                0.0
            } else {
                seg.blend.unwrap_or(spec.default_blend)
            };
            let mut parts = Vec::with_capacity(2);
            if blend > 0.0 && k_prev != seg.curvature {
                parts.push((blend, k_prev, seg.curvature));
                if seg.length > blend {
                    parts.push((seg.length - blend, seg.curvature, seg.curvature));
                }
            } else {
                parts.push((seg.length, seg.curvature, seg.curvature));
            }
            for (len, k0, k1) in parts {
                let mut p = Piece {
                    s0,
                    len,
                    k0,
                    k1,
                    start: pose,
                    table: Vec::new(),
                };
                if p.is_blend() {
                    p.build_table();
                }
                pose = p.pose(len);
                s0 += len;
                pieces.push(p);
            }
            k_prev = seg.curvature;
        }
        Ok(Self {
            pieces,
            length: s0,
            lane_width: spec.lane_width,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    fn locate(&self, s: f64) -> (&Piece, f64) {
        let i = self.pieces.partition_point(|p| p.s0 <= s).saturating_sub(1);
        let p = &self.pieces[i];
        (p, s - p.s0)
    }

    fn end_pose(&self) -> (Pose, f64) {
        let last = self.pieces.last().expect("track has pieces");
        (last.pose(last.len), last.k1)
    }

    pub fn curvature(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.pieces[0].k0;
        }
        if s >= self.length {
            return self.end_pose().1;
        }
        let (p, ds) = self.locate(s);
        p.kappa(ds)
    }

    pub fn pose(&self, s: f64) -> Pose {
        if s < 0.0 {
            let first = &self.pieces[0];
            return advance_constant(first.start, first.k0, s);
        }
        if s > self.length {
            let (end, k) = self.end_pose();
            return advance_constant(end, k, s - self.length);
        }
        let (p, ds) = self.locate(s);
        p.pose(ds)
    }

    pub fn heading(&self, s: f64) -> f64 {
        self.pose(s).theta
    }

    /// Point on the line `offset` meters left of the centerline.
    pub fn line_point(&self, s: f64, offset: f64) -> (f64, f64) {
        self.pose(s).left_of(offset)
    }
}

/// Host state in track coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub s: f64,
    /// Lateral offset, positive left of the centerline.
    pub d: f64,
    /// Heading relative to the centerline tangent.
    pub psi: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn world_pose(&self, track: &Track) -> Pose {
        let c = track.pose(self.s);
        let (x, y) = c.left_of(self.d);
        Pose {
            x,
            y,
            theta: c.theta + self.psi,
        }
    }
}

/// World point expressed in the frame of `pose` (u forward, v left).
pub fn to_vehicle_frame(pose: &Pose, x: f64, y: f64) -> TdvPoint<f64> {
    let (dx, dy) = (x - pose.x, y - pose.y);
    let (s, c) = pose.theta.sin_cos();
    TdvPoint::new(dx * c + dy * s, -dx * s + dy * c)
}

/// Image rectangle blanked over a range of frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    /// First frame affected.
    pub start_frame: usize,
    /// One past the last frame affected.
    pub end_frame: usize,
    pub x0: usize,
    pub y0: usize,
    /// Exclusive.
    pub x1: usize,
    /// Exclusive.
    pub y1: usize,
}

impl Occluder {
    pub fn active(&self, frame: usize) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderOptions {
    #[serde(default = "default_line_width")]
    pub line_width: f64,
    #[serde(default)]
    pub pixel_noise_sd: f64,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    #[serde(default)]
    pub seed: u64,
}

fn default_line_width() -> f64 {
    DEFAULT_LINE_WIDTH
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            line_width: DEFAULT_LINE_WIDTH,
            pixel_noise_sd: 0.0,
            dropout_rate: 0.0,
            occluders: Vec::new(),
            seed: 0,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.into()));
        if !(self.line_width > 0.0) {
            return bad("line_width must be > 0");
        }
        if !(self.pixel_noise_sd >= 0.0 && self.pixel_noise_sd.is_finite()) {
            return bad("pixel_noise_sd must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1]");
        }
        for o in &self.occluders {
            if o.end_frame < o.start_frame || o.x1 < o.x0 || o.y1 < o.y0 {
                return bad("occluder ranges must be ordered");
            }
        }
        Ok(())
    }

    /// Occluders spread evenly over `n_frames`, covering `fraction` of them
    /// in blocks of `block` frames, each blanking rows `rows.0..rows.1`
    /// across the full width.
    pub fn periodic_occluders(
        n_frames: usize,
        fraction: f64,
        block: usize,
        rows: (usize, usize),
    ) -> Vec<Occluder> {
        let total = (n_frames as f64 * fraction).round() as usize;
        let block = block.max(1);
        let n_blocks = total.div_ceil(block);
        if n_blocks == 0 {
            return Vec::new();
        }
        let period = n_frames / n_blocks;
        let mut left = total;
        (0..n_blocks)
            .map(|i| {
                let len = left.min(block);
                left -= len;
                let start = i * period + period.saturating_sub(len) / 2;
                Occluder {
                    start_frame: start,
                    end_frame: start + len,
                    x0: 0,
                    y0: rows.0,
                    x1: IMAGE_WIDTH,
                    y1: rows.1,
                }
            })
            .collect()
    }
}

/// Fills the convex polygon `pts` (image coordinates) with 1.0, including
/// pixels whose index lies inside or on the boundary.
fn fill_convex(mask: &mut GrayMask, pts: &[(f64, f64)]) {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = (ymin.ceil().max(0.0), ymax.floor().min(h - 1.0));
    if y0 > y1 {
        return;
    }
    for y in (y0 as usize)..=(y1 as usize) {
        let yf = y as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            let (ya, yb) = (a.1.min(b.1), a.1.max(b.1));
            if yf < ya || yf > yb {
                continue;
            }
            let (xa, xb) = if (b.1 - a.1).abs() < 1e-12 {
                (a.0, b.0)
            } else {
                let x = a.0 + (yf - a.1) * (b.0 - a.0) / (b.1 - a.1);
                (x, x)
            };
            lo = lo.min(xa.min(xb));
            hi = hi.max(xa.max(xb));
        }
        let (x0, x1) = (lo.ceil().max(0.0), hi.floor().min(w - 1.0));
        if x0 > x1 {
            continue;
        }
        for x in (x0 as usize)..=(x1 as usize) {
            mask.set(x, y, 1.0);
        }
    }
}

/// Ideal CNN output for the ego-lane lines seen from `vehicle`, followed by
/// dropout, Gaussian pixel noise and occluders. Deterministic in
/// `(opts.seed, frame_idx)`.
pub fn render_mask(
    track: &Track,
    vehicle: &VehicleState,
    cam: &CameraModel<f64>,
    opts: &RenderOptions,
    frame_idx: usize,
) -> GrayMask {
    let mut mask = GrayMask::zeros(IMAGE_WIDTH, IMAGE_HEIGHT);
    let pose = vehicle.world_pose(track);
    let half = 0.5 * track.lane_width();
    let hw = 0.5 * opts.line_width;
    let n = (VIEW_RANGE / SAMPLE_STEP).ceil() as usize + 8;
    // start a little behind the camera so the nearest visible rows are covered
    let s_first = vehicle.s - 4.0 * SAMPLE_STEP;
    for offset in [half, -half] {
        let mut prev: Option<[TdvPoint<f64>; 2]> = None;
        for k in 0..=n {
            let c = track.pose(s_first + k as f64 * SAMPLE_STEP);
            let edge = |o: f64| {
                let (x, y) = c.left_of(o);
                to_vehicle_frame(&pose, x, y)
            };
            let cur = [edge(offset - hw), edge(offset + hw)];
            if let Some(p) = prev {
                let corners = [p[0], p[1], cur[1], cur[0]];
                if corners
                    .iter()
                    .all(|g| g.u >= MIN_RENDER_U && g.u <= VIEW_RANGE + 1.0)
                {
                    let px: Option<Vec<(f64, f64)>> = corners
                        .iter()
                        .map(|g| cam.project(*g).map(|q| (q.x, q.y)))
                        .collect();
                    if let Some(px) = px {
                        fill_convex(&mut mask, &px);
                    }
                }
            }
            prev = Some(cur);
        }
    }
    degrade(&mut mask, opts, frame_idx);
    mask
}

fn degrade(mask: &mut GrayMask, opts: &RenderOptions, frame_idx: usize) {
    if opts.dropout_rate > 0.0 || opts.pixel_noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(frame_idx as u64);
        let (w, h) = (mask.width(), mask.height());
        if opts.dropout_rate > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y) > 0.0 && rng.random::<f64>() < opts.dropout_rate {
                        mask.set(x, y, 0.0);
                    }
                }
            }
        }
        if opts.pixel_noise_sd > 0.0 {
            let normal = Normal::new(0.0f32, opts.pixel_noise_sd as f32)
                .expect("noise sd validated as finite and >= 0");
            for y in 0..h {
                for x in 0..w {
                    let p = mask.get(x, y) + normal.sample(&mut rng);
                    mask.set(x, y, p);
                }
            }
        }
    }
    for o in opts.occluders.iter().filter(|o| o.active(frame_idx)) {
        mask.fill_rect(o.x0, o.y0, o.x1, o.y1, 0.0);
    }
}

/// Reference curvature one fit-window start ahead and the lateral offset
/// `−d` (positive when the vehicle is right of the lane center).
pub fn ground_truth(track: &Track, vehicle: &VehicleState, u_s: f64) -> (f64, f64) {
    (track.curvature(vehicle.s + u_s), -vehicle.d)
}

/// One forward-Euler step of the Frenet-frame kinematic bicycle.
pub fn step_vehicle(
    state: &VehicleState,
    steering: f64,
    dt: f64,
    track: &Track,
    wheelbase: f64,
) -> Result<VehicleState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::InvalidParams("dt must be > 0".into()));
    }
    let k = track.curvature(state.s);
    let VehicleState { s, d, psi, v } = *state;
    let s_dot = v * psi.cos() / (1.0 - d * k);
    let d_dot = v * psi.sin();
    let psi_dot = v * steering.tan() / wheelbase - k * s_dot;
    let next = VehicleState {
        s: s + s_dot * dt,
        d: d + d_dot * dt,
        psi: psi + psi_dot * dt,
        v,
    };
    if next.d.abs() >= track.lane_width() {
        return Err(SimError::OffLane {
            s: next.s,
            d: next.d,
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams {
    pub wheelbase: f64,
    pub k_d: f64,
    pub max_steer: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            wheelbase: WHEELBASE,
            k_d: STEER_GAIN,
            max_steer: MAX_STEER,
        }
    }
}

/// Curvature feed-forward plus a lateral-offset correction that steers
/// toward the lane center: positive `delta` (vehicle right of center)
/// steers left.
pub fn controller(kappa: f64, delta: f64, v: f64, p: &ControllerParams) -> f64 {
    let raw = (p.wheelbase * kappa).atan() + (p.k_d * delta / v).atan();
    raw.clamp(-p.max_steer, p.max_steer)
}

/// What the controller is fed in a closed-loop run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perception {
    #[default]
    Pipeline,
    /// Ground-truth curvature plus the true offset projected along the
    /// heading to the lookahead distance.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub speed: f64,
    pub dt: f64,
    /// Stop after this many seconds; `None` runs to the end of the track.
    pub duration: Option<f64>,
    pub start_s: f64,
    pub controller: ControllerParams,
    pub perception: Perception,
    /// Oracle lookahead; `None` uses the ground distance of the RoI row.
    pub lookahead: Option<f64>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            speed: kmh_to_ms(DEFAULT_SPEED_KMH),
            dt: 1.0 / FRAME_RATE,
            duration: None,
            start_s: 0.0,
            controller: ControllerParams::default(),
            perception: Perception::Pipeline,
            lookahead: None,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.into()));
        if !(self.speed > 0.0) {
            return bad("speed must be > 0");
        }
        if self.speed > kmh_to_ms(MAX_SPEED_KMH) + 1e-9 {
            return bad("speed must not exceed 70 km/h");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if let Some(t) = self.duration {
            if !(t > 0.0) {
                return bad("duration must be > 0");
            }
        }
        if !(self.controller.wheelbase > 0.0) {
            return bad("wheelbase must be > 0");
        }
        if !(self.controller.max_steer > 0.0) {
            return bad("max_steer must be > 0");
        }
        Ok(())
    }
}

/// Ground distance of the RoI center row for `cam`.
pub fn roi_distance(cam: &CameraModel<f64>) -> Result<f64, SimError> {
    let h = homography_from_camera(cam)?;
    let g = pm(
        &h,
        PixelPoint::new(IMAGE_CENTER_X as f64, ROI_CENTER_ROW as f64),
    )?;
    Ok(g.u)
}

/// One simulated frame with its estimate and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_idx: usize,
    pub time: f64,
    pub state: VehicleState,
    pub steering: f64,
    pub kappa_gt: f64,
    pub delta_gt: f64,
    pub kappa_raw: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub delta_m: Option<f64>,
    pub fit_fresh: bool,
}

impl FrameRecord {
    pub fn kappa_avail(&self) -> bool {
        self.kappa_hat.is_some()
    }

    pub fn delta_avail(&self) -> bool {
        self.delta_m.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    TrackEnd,
    Duration,
    FrameLimit,
    OffLane { s: f64, d: f64 },
}

impl Outcome {
    pub fn is_off_lane(&self) -> bool {
        matches!(self, Outcome::OffLane { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<FrameRecord>,
    pub outcome: Outcome,
}

impl RunOutput {
    pub fn max_abs_d(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.state.d.abs())
            .fold(0.0, f64::max)
    }
}

/// Vehicle glued to the centerline at constant speed; every frame is
/// rendered and processed, no control.
pub fn run_static(
    track: &Track,
    cam: &CameraModel<f64>,
    opts: &RenderOptions,
    cfg: &PipelineConfig<f64>,
    n_frames: usize,
    params: &SimParams,
) -> Result<RunOutput, SimError> {
    params.validate()?;
    opts.validate()?;
    let mut session = Session::new(homography_from_camera(cam)?, *cfg)?;
    let mut records = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let state = VehicleState {
            s: params.start_s + i as f64 * params.speed * params.dt,
            d: 0.0,
            psi: 0.0,
            v: params.speed,
        };
        let mask = render_mask(track, &state, cam, opts, i);
        let r = session.process_frame(mask)?;
        let (kappa_gt, delta_gt) = ground_truth(track, &state, cfg.u_s);
        records.push(FrameRecord {
            frame_idx: i,
            time: i as f64 * params.dt,
            state,
            steering: 0.0,
            kappa_gt,
            delta_gt,
            kappa_raw: r.kappa_raw,
            kappa_hat: r.kappa_hat,
            delta_m: r.delta_m,
            fit_fresh: r.fit_fresh,
        });
    }
    Ok(RunOutput {
        records,
        outcome: Outcome::FrameLimit,
    })
}

/// Closed loop: perception feeds the controller, the controller feeds the
/// vehicle. Ends at the track end, after `duration`, or when the vehicle
/// leaves the lane.
///
/// Frames without a live Δ estimate steer on curvature alone; before the
/// first curvature estimate the feed-forward term is zero.
pub fn run_dynamic(
    track: &Track,
    cam: &CameraModel<f64>,
    opts: &RenderOptions,
    cfg: &PipelineConfig<f64>,
    params: &SimParams,
) -> Result<RunOutput, SimError> {
    params.validate()?;
    opts.validate()?;
    let mut session = match params.perception {
        Perception::Pipeline => Some(Session::new(homography_from_camera(cam)?, *cfg)?),
        Perception::Oracle => None,
    };
    let lookahead = match params.lookahead {
        Some(l) => l,
        None => roi_distance(cam)?,
    };
    let max_frames = params
        .duration
        .map(|t| (t / params.dt).round() as usize)
        .unwrap_or(usize::MAX);
    let mut state = VehicleState {
        s: params.start_s,
        d: 0.0,
        psi: 0.0,
        v: params.speed,
    };
    let mut records = Vec::new();
    let mut frame = 0usize;
    let outcome = loop {
        if state.s >= track.length() {
            break Outcome::TrackEnd;
        }
        if frame >= max_frames {
            break Outcome::Duration;
        }
        let (kappa_gt, delta_gt) = ground_truth(track, &state, cfg.u_s);
        let mut rec = FrameRecord {
            frame_idx: frame,
            time: frame as f64 * params.dt,
            state,
            steering: 0.0,
            kappa_gt,
            delta_gt,
            kappa_raw: None,
            kappa_hat: None,
            delta_m: None,
            fit_fresh: false,
        };
        match session.as_mut() {
            Some(sess) => {
                let mask = render_mask(track, &state, cam, opts, frame);
                let r = sess.process_frame(mask)?;
                rec.kappa_raw = r.kappa_raw;
                rec.kappa_hat = r.kappa_hat;
                rec.delta_m = r.delta_m;
                rec.fit_fresh = r.fit_fresh;
            }
            None => {
                rec.kappa_raw = Some(kappa_gt);
                rec.kappa_hat = Some(kappa_gt);
                rec.delta_m = Some(-state.d - lookahead * state.psi.sin());
                rec.fit_fresh = true;
            }
        }
        rec.steering = controller(
            rec.kappa_hat.unwrap_or(0.0),
            rec.delta_m.unwrap_or(0.0),
            state.v,
            &params.controller,
        );
        records.push(rec);
        frame += 1;
        match step_vehicle(
            &state,
            rec.steering,
            params.dt,
            track,
            params.controller.wheelbase,
        ) {
            Ok(next) => state = next,
            Err(SimError::OffLane { s, d }) => {
                log::warn!("off lane at frame {frame}: s = {s:.2} m, d = {d:.3} m");
                break Outcome::OffLane { s, d };
            }
            Err(e) => return Err(e),
        }
    };
    Ok(RunOutput { records, outcome })
}
