//! Run configuration: one TOML document with a section per stage, plus
//! dotted-key overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use lanepath::estfilter::{BLOCK_SIZE, CURVATURE_WINDOW, DEFAULT_Q, DEFAULT_R, MASK_WINDOW};
use lanepath::evalkit::{EvalMode, KappaSource};
use lanepath::lanefit::{CurvatureFormula, FitParams, PathMode};
use lanepath::netarch::{DOCUMENTED_RESOLUTION, POOL_LEVELS};
use lanepath::pipeline::PipelineConfig;
use lanepath::simworld::{
    kmh_to_ms, ControllerParams, Occluder, Perception, RenderOptions, SegmentSpec, SimError,
    SimParams, TrackSpec, DEFAULT_LANE_WIDTH, DEFAULT_LINE_WIDTH, DEFAULT_SPEED_KMH, FRAME_RATE,
    MAX_SPEED_KMH, MAX_STEER, STEER_GAIN, WHEELBASE,
};
use lanepath::viewgeom::{homography_from_camera, Homography};
use lanepath::{imagekit, lanefit, pipeline, Calibration, CameraModel, KalmanParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Validation { key: String, reason: String },
    #[error("bad override `{0}`")]
    Override(String),
}

impl ConfigError {
    fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Validation {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub threshold: f32,
    pub window: usize,
    pub temporal: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            threshold: imagekit::DEFAULT_THRESHOLD,
            window: MASK_WINDOW,
            temporal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSection {
    pub alpha: f64,
    pub min_count: usize,
}

impl Default for RoiSection {
    fn default() -> Self {
        Self {
            alpha: imagekit::DEFAULT_ALPHA,
            min_count: imagekit::DEFAULT_MIN_ROI_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub eps: f64,
    pub min_pts: usize,
    pub min_cluster_dots: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        use lanepath::clusterer::{DEFAULT_EPS, DEFAULT_MIN_CLUSTER_DOTS, DEFAULT_MIN_PTS};
        Self {
            eps: DEFAULT_EPS,
            min_pts: DEFAULT_MIN_PTS,
            min_cluster_dots: DEFAULT_MIN_CLUSTER_DOTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub u_s: f64,
    pub u_f: f64,
    pub max_range: f64,
    pub beta: f64,
    pub forgetting: f64,
    pub ridge: f64,
    pub path_mode: PathMode,
    pub curvature_formula: CurvatureFormula,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            u_s: lanefit::DEFAULT_U_START,
            u_f: lanefit::DEFAULT_U_FINAL,
            max_range: pipeline::DEFAULT_MAX_RANGE,
            beta: 1.0,
            forgetting: lanefit::DEFAULT_FORGETTING,
            ridge: lanefit::DEFAULT_RIDGE,
            path_mode: PathMode::default(),
            curvature_formula: CurvatureFormula::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanSection {
    pub q: f64,
    pub r: f64,
    pub window: usize,
}

impl Default for KalmanSection {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            r: DEFAULT_R,
            window: CURVATURE_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub height: f64,
    pub pitch: f64,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Calibration document; its camera replaces the fields above, its
    /// matrix replaces the image→ground mapping used by the pipeline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
}

impl Default for CameraSection {
    fn default() -> Self {
        let c = CameraModel::default();
        Self {
            height: c.height,
            pitch: c.pitch,
            focal: c.focal,
            cx: c.cx,
            cy: c.cy,
            calibration: None,
        }
    }
}

impl CameraSection {
    pub fn model(&self) -> CameraModel {
        CameraModel {
            height: self.height,
            pitch: self.pitch,
            focal: self.focal,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub lane_width: f64,
    pub default_blend: f64,
    /// Empty selects the built-in 3919 m benchmark profile.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<SegmentSpec>,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self {
            lane_width: DEFAULT_LANE_WIDTH,
            default_blend: 0.0,
            segments: Vec::new(),
        }
    }
}

impl TrackSection {
    pub fn spec(&self) -> TrackSpec {
        if self.segments.is_empty() {
            TrackSpec {
                lane_width: self.lane_width,
                ..TrackSpec::benchmark()
            }
        } else {
            TrackSpec {
                lane_width: self.lane_width,
                default_blend: self.default_blend,
                segments: self.segments.clone(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub line_width: f64,
    pub pixel_noise_sd: f64,
    pub dropout_rate: f64,
    /// Fraction of frames hidden by generated full-width occluders.
    pub occlusion_fraction: f64,
    /// Frames per generated occluder block.
    pub occlusion_block: usize,
    /// Image rows `[first, last)` blanked by generated occluders.
    pub occlusion_rows: [usize; 2],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub occluders: Vec<Occluder>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            line_width: DEFAULT_LINE_WIDTH,
            pixel_noise_sd: 0.0,
            dropout_rate: 0.0,
            occlusion_fraction: 0.0,
            occlusion_block: 30,
            occlusion_rows: [330, 352],
            occluders: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    /// `static` glues the vehicle to the centerline for `eval.n_frames`
    /// frames; `dynamic` closes the loop through the controller.
    pub mode: EvalMode,
    pub speed_kmh: f64,
    pub frame_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub start_s: f64,
    pub perception: Perception,
    pub wheelbase: f64,
    pub k_d: f64,
    pub max_steer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lookahead: Option<f64>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::Dynamic,
            speed_kmh: DEFAULT_SPEED_KMH,
            frame_rate: FRAME_RATE,
            duration: None,
            start_s: 0.0,
            perception: Perception::default(),
            wheelbase: WHEELBASE,
            k_d: STEER_GAIN,
            max_steer: MAX_STEER,
            lookahead: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Frames in a static run, and rendered by `replay` without `--masks`.
    pub n_frames: usize,
    pub seed: u64,
    pub kappa_source: KappaSource,
    pub block: usize,
    /// `replay` also writes the rendered masks and their ground truth.
    pub save_masks: bool,
    /// `replay` also writes one overlay image per frame.
    pub overlays: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_frames: 100,
            seed: 0,
            kappa_source: KappaSource::default(),
            block: BLOCK_SIZE,
            save_masks: false,
            overlays: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    /// Input `[width, height]` for MAC counting.
    pub input_hw: [usize; 2],
    pub sweep: bool,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            input_hw: [DOCUMENTED_RESOLUTION.0, DOCUMENTED_RESOLUTION.1],
            sweep: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mask: MaskSection,
    pub roi: RoiSection,
    pub cluster: ClusterSection,
    pub fit: FitSection,
    pub kalman: KalmanSection,
    pub camera: CameraSection,
    pub track: TrackSection,
    pub render: RenderSection,
    pub sim: SimSection,
    pub eval: EvalSection,
    pub arch: ArchSection,
}

/// Dotted config key for each pipeline parameter.
fn pipeline_key(field: &str) -> &'static str {
    match field {
        "threshold" => "mask.threshold",
        "mask_window" => "mask.window",
        "alpha" => "roi.alpha",
        "eps" => "cluster.eps",
        "min_pts" => "cluster.min_pts",
        "beta" => "fit.beta",
        "u_s" => "fit.u_s",
        "u_f" => "fit.u_f",
        "max_range" => "fit.max_range",
        "forgetting" => "fit.forgetting",
        "ridge" => "fit.ridge",
        "q" => "kalman.q",
        "r" => "kalman.r",
        "kappa_window" => "kalman.window",
        _ => "pipeline",
    }
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig<f64> {
        PipelineConfig {
            threshold: self.mask.threshold,
            eps: self.cluster.eps,
            min_pts: self.cluster.min_pts,
            min_cluster_dots: self.cluster.min_cluster_dots,
            alpha: self.roi.alpha,
            beta: self.fit.beta,
            u_s: self.fit.u_s,
            u_f: self.fit.u_f,
            max_range: self.fit.max_range,
            fit: FitParams {
                forgetting: self.fit.forgetting,
                ridge: self.fit.ridge,
            },
            kalman: KalmanParams {
                q: self.kalman.q,
                r: self.kalman.r,
            },
            min_roi_count: self.roi.min_count,
            path_mode: self.fit.path_mode,
            curvature_formula: self.fit.curvature_formula,
            mask_window: self.mask.window,
            kappa_window: self.kalman.window,
            temporal: self.mask.temporal,
            overlay: false,
        }
    }

    /// Camera used for rendering, after applying the calibration file.
    pub fn camera(&self) -> Result<CameraModel, ConfigError> {
        Ok(self
            .calibration()?
            .and_then(|c| c.camera)
            .unwrap_or_else(|| self.camera.model()))
    }

    fn calibration(&self) -> Result<Option<Calibration>, ConfigError> {
        self.camera
            .calibration
            .as_deref()
            .map(load_calibration)
            .transpose()
    }

    /// Image→ground mapping for the pipeline.
    pub fn homography(&self) -> Result<Homography<f64>, ConfigError> {
        let h = match self.calibration()? {
            Some(c) => c.homography(),
            None => homography_from_camera(&self.camera.model()),
        };
        h.map_err(|e| ConfigError::invalid("camera", e.to_string()))
    }

    pub fn render_options(&self, n_frames: usize) -> RenderOptions {
        let r = &self.render;
        let mut occluders = r.occluders.clone();
        if r.occlusion_fraction > 0.0 {
            occluders.extend(RenderOptions::periodic_occluders(
                n_frames,
                r.occlusion_fraction,
                r.occlusion_block,
                (r.occlusion_rows[0], r.occlusion_rows[1]),
            ));
        }
        RenderOptions {
            line_width: r.line_width,
            pixel_noise_sd: r.pixel_noise_sd,
            dropout_rate: r.dropout_rate,
            occluders,
            seed: self.eval.seed,
        }
    }

    pub fn sim_params(&self) -> SimParams {
        let s = &self.sim;
        SimParams {
            speed: kmh_to_ms(s.speed_kmh),
            dt: 1.0 / s.frame_rate,
            duration: s.duration,
            start_s: s.start_s,
            controller: ControllerParams {
                wheelbase: s.wheelbase,
                k_d: s.k_d,
                max_steer: s.max_steer,
            },
            perception: s.perception,
            lookahead: s.lookahead,
        }
    }

    /// Frames a run is expected to take: `eval.n_frames` when static, the
    /// duration if set, otherwise the time to cover the track from `start_s`.
    pub fn expected_frames(&self) -> usize {
        if self.sim.mode == EvalMode::Static {
            return self.eval.n_frames;
        }
        let dt = 1.0 / self.sim.frame_rate;
        match self.sim.duration {
            Some(t) => (t / dt).round() as usize,
            None => {
                let len = self.track.spec().total_length() - self.sim.start_s;
                (len.max(0.0) / (kmh_to_ms(self.sim.speed_kmh) * dt)).ceil() as usize
            }
        }
    }

    /// Checks every stage precondition and reports the first violation by
    /// its dotted key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, r: &str| Err(ConfigError::invalid(k, r));
        if let Err(e) = self.pipeline().validate() {
            return bad(pipeline_key(e.field), e.reason);
        }
        if self.cluster.min_cluster_dots < 1 {
            return bad("cluster.min_cluster_dots", "must be >= 1");
        }

        let c = &self.camera;
        if !(c.height > 0.0) {
            return bad("camera.height", "must be > 0");
        }
        if !(c.focal > 0.0) {
            return bad("camera.focal", "must be > 0");
        }
        if !(c.pitch > 0.0 && c.pitch < std::f64::consts::FRAC_PI_2) {
            return bad("camera.pitch", "must lie in (0, pi/2)");
        }
        if !(c.cx.is_finite() && c.cy.is_finite()) {
            return bad("camera.cx", "principal point must be finite");
        }
        self.homography()?;

        if let Err(e) = self.track.spec().validate() {
            // messages lead with the offending field
            let msg = match e {
                SimError::InvalidSpec(m) => m,
                other => other.to_string(),
            };
            let field = msg.split_whitespace().next().unwrap_or("").to_string();
            return Err(ConfigError::invalid(format!("track.{field}"), msg));
        }

        let r = &self.render;
        if !(r.line_width > 0.0) {
            return bad("render.line_width", "must be > 0");
        }
        if !(r.pixel_noise_sd >= 0.0 && r.pixel_noise_sd.is_finite()) {
            return bad("render.pixel_noise_sd", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&r.dropout_rate) {
            return bad("render.dropout_rate", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&r.occlusion_fraction) {
            return bad("render.occlusion_fraction", "must lie in [0, 1]");
        }
        if r.occlusion_block < 1 {
            return bad("render.occlusion_block", "must be >= 1");
        }
        if r.occlusion_rows[0] >= r.occlusion_rows[1] {
            return bad("render.occlusion_rows", "must be an increasing pair");
        }
        for (i, o) in r.occluders.iter().enumerate() {
            if o.end_frame < o.start_frame || o.x1 < o.x0 || o.y1 < o.y0 {
                return Err(ConfigError::invalid(
                    format!("render.occluders[{i}]"),
                    "ranges must be ordered",
                ));
            }
        }

        let s = &self.sim;
        if !(s.speed_kmh > 0.0) {
            return bad("sim.speed_kmh", "must be > 0");
        }
        if s.speed_kmh > MAX_SPEED_KMH {
            return bad("sim.speed_kmh", "must not exceed 70");
        }
        if !(s.frame_rate > 0.0 && s.frame_rate.is_finite()) {
            return bad("sim.frame_rate", "must be > 0");
        }
        if let Some(d) = s.duration {
            if !(d > 0.0) {
                return bad("sim.duration", "must be > 0");
            }
        }
        if !(s.start_s >= 0.0) {
            return bad("sim.start_s", "must be >= 0");
        }
        if !(s.wheelbase > 0.0) {
            return bad("sim.wheelbase", "must be > 0");
        }
        if !(s.k_d >= 0.0) {
            return bad("sim.k_d", "must be >= 0");
        }
        if !(s.max_steer > 0.0) {
            return bad("sim.max_steer", "must be > 0");
        }
        if let Some(l) = s.lookahead {
            if !(l >= 0.0) {
                return bad("sim.lookahead", "must be >= 0");
            }
        }

        if self.eval.n_frames < 1 {
            return bad("eval.n_frames", "must be >= 1");
        }
        if self.eval.block < 1 {
            return bad("eval.block", "must be >= 1");
        }

        let div = 1usize << POOL_LEVELS;
        let [w, h] = self.arch.input_hw;
        if w == 0 || h == 0 || w % div != 0 || h % div != 0 {
            return bad(
                "arch.input_hw",
                "both sides must be positive multiples of 16",
            );
        }
        Ok(())
    }

    /// Effective configuration as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}

/// Calibration document in TOML (by extension `.toml`) or JSON.
pub fn load_calibration(path: &Path) -> Result<Calibration, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
}

/// Raw configuration document before overrides are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigSource {
    pub table: Table,
}

impl ConfigSource {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(Self { table })
    }

    /// Sets `key` (dotted path) to `raw`, read as a TOML value when it
    /// parses as one and as a string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Override(key.into()));
        }
        let value = parse_value(raw);
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut cur = &mut self.table;
        for p in parents {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Override(key.into()))?;
        }
        cur.insert(last.to_string(), value);
        Ok(())
    }

    pub fn build(&self) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = Value::Table(self.table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Parses `path` (or an empty document) and applies `overrides` in order.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<(ConfigSource, RunConfig), ConfigError> {
    let mut src = match path {
        Some(p) => ConfigSource::from_file(p)?,
        None => ConfigSource::default(),
    };
    for (k, v) in overrides {
        src.set(k, v)?;
    }
    let cfg = src.build()?;
    Ok((src, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default_and_valid() {
        let (_, cfg) = parse_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let mut src = ConfigSource::default();
        src.set("cluster.eps", "4.5").unwrap();
        src.set("sim.perception", "oracle").unwrap();
        src.set("arch.input_hw", "[320, 240]").unwrap();
        let cfg = src.build().unwrap();
        assert_eq!(cfg.cluster.eps, 4.5);
        assert_eq!(cfg.sim.perception, Perception::Oracle);
        assert_eq!(cfg.arch.input_hw, [320, 240]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let src = ConfigSource::parse("[cluster]\nepsilon = 3\n").unwrap();
        assert!(matches!(src.build(), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn integer_literal_accepted_for_float_key() {
        let cfg = ConfigSource::parse("[cluster]\neps = 6\n")
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(cfg.cluster.eps, 6.0);
    }

    #[test]
    fn track_errors_carry_the_segment_key() {
        let src =
            ConfigSource::parse("[[track.segments]]\nlength = 100.0\ncurvature = 0.2\n").unwrap();
        match src.build() {
            Err(ConfigError::Validation { key, .. }) => {
                assert_eq!(key, "track.segments[0].curvature")
            }
            other => panic!("{other:?}"),
        }
    }
}
