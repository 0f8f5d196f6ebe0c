use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::thread;

use lanepath::evalkit::{
    blocked_series, comparison_table, export_report, read_frames_csv, rows_from_records,
    write_blocked_csv, write_summary, EvalMode, EvalReport, FrameRow, BLOCKED_FILE, SUMMARY_FILE,
};
use lanepath::imagekit::GrayMask;
use lanepath::netarch::{
    best_resolution, candidate_resolutions, relative_error, square_resolutions, summarize,
    sweep_resolutions, write_breakdown_csv, MAC_TOLERANCE, PARAM_TOLERANCE, TARGET_DSUNET_MACS,
    TARGET_DSUNET_PARAMS, TARGET_MAC_RATIO, TARGET_PARAM_RATIO, TARGET_UNET_MACS,
    TARGET_UNET_PARAMS,
};
use lanepath::pipeline::{render_overlay, Session};
use lanepath::pnm::{load_pgm, save_pgm, save_ppm};
use lanepath::simworld::{
    ground_truth, render_mask, run_dynamic, run_static, Outcome, Track, VehicleState,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ConfigSource, RunConfig};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const ARCH_SUMMARY_FILE: &str = "arch_summary.json";
pub const ARCH_SWEEP_FILE: &str = "arch_sweep.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Run(String),
    /// The run finished but stopped early; its outputs were still written.
    #[error("run stopped early: {0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Partial(_) => 1,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| run_err(format!("{}: {e}", dir.display())))
}

fn write_effective_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    create_dir(dir)?;
    fs::write(dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_toml()).map_err(run_err)
}

fn describe(outcome: &Outcome) -> String {
    match outcome {
        Outcome::TrackEnd => "track_end".into(),
        Outcome::Duration => "duration".into(),
        Outcome::FrameLimit => "frame_limit".into(),
        Outcome::OffLane { s, d } => format!("off_lane at s={s:.2} m, d={d:.3} m"),
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    frame_idx: usize,
    time: f64,
    s: f64,
    d: f64,
    psi: f64,
    steering: f64,
}

/// Result of one `simulate` run.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: EvalReport,
    pub outcome: Outcome,
}

/// Runs one simulation and writes its outputs into `dir`.
pub fn simulate_into(cfg: &RunConfig, dir: &Path) -> Result<SimOutcome, CliError> {
    write_effective_config(dir, cfg)?;
    let track = Track::build(&cfg.track.spec()).map_err(run_err)?;
    let cam = cfg.camera()?;
    let opts = cfg.render_options(cfg.expected_frames());
    let pcfg = cfg.pipeline();
    let params = cfg.sim_params();
    let out = match cfg.sim.mode {
        EvalMode::Static => run_static(&track, &cam, &opts, &pcfg, cfg.eval.n_frames, &params),
        EvalMode::Dynamic => run_dynamic(&track, &cam, &opts, &pcfg, &params),
    }
    .map_err(run_err)?;

    let rows = rows_from_records(&out.records, cfg.eval.kappa_source);
    let mut report = if rows.is_empty() {
        return Err(CliError::Run("run produced no frames".into()));
    } else {
        EvalReport::from_rows(cfg.sim.mode, &rows, cfg.eval.kappa_source).map_err(run_err)?
    };
    if out.outcome.is_off_lane() {
        report.partial = true;
        report.outcome = Some(describe(&out.outcome));
    }
    export_report(dir, &report, &rows, cfg.eval.block).map_err(run_err)?;

    let mut w = csv::Writer::from_path(dir.join(TRAJECTORY_FILE)).map_err(run_err)?;
    for r in &out.records {
        w.serialize(TrajectoryRow {
            frame_idx: r.frame_idx,
            time: r.time,
            s: r.state.s,
            d: r.state.d,
            psi: r.state.psi,
            steering: r.steering,
        })
        .map_err(run_err)?;
    }
    w.flush().map_err(run_err)?;
    info!("{} frames, outcome {}", rows.len(), describe(&out.outcome));
    Ok(SimOutcome {
        report,
        outcome: out.outcome,
    })
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let res = simulate_into(cfg, out)?;
    println!("{}", comparison_table(&[("run", &res.report)]));
    println!("outcome: {}", describe(&res.outcome));
    match res.outcome {
        Outcome::OffLane { .. } => Err(CliError::Partial(describe(&res.outcome))),
        _ => Ok(()),
    }
}

/// `key=v1,v2,...`
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>), ConfigError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if key.is_empty() || values.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    Ok((key.to_string(), values))
}

#[derive(Serialize)]
struct SweepSummaryRow<'a> {
    key: &'a str,
    value: &'a str,
    outcome: String,
    kappa_mae: Option<f64>,
    delta_mae: Option<f64>,
    kappa_avail_pct: f64,
    delta_avail_pct: f64,
}

/// One run per value of `key`, in parallel, each into its own
/// `sweep/<key>_<value>` directory.
pub fn simulate_sweep(src: &ConfigSource, spec: &str, out: &Path) -> Result<(), CliError> {
    let (key, values) = parse_sweep(spec)?;
    let mut configs = Vec::new();
    for v in &values {
        let mut s = src.clone();
        s.set(&key, v)?;
        configs.push(s.build()?);
    }
    write_effective_config(out, &src.build()?)?;
    let sweep_dir = out.join("sweep");
    let results: Vec<Result<SimOutcome, CliError>> = thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .zip(&values)
            .map(|(cfg, v)| {
                let dir = sweep_dir.join(format!("{key}_{}", sanitize(v)));
                scope.spawn(move || simulate_into(cfg, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Run("sweep worker panicked".into())))
            })
            .collect()
    });

    let mut w = csv::Writer::from_path(out.join(SWEEP_SUMMARY_FILE)).map_err(run_err)?;
    let mut table = Vec::new();
    let mut any_partial = None;
    for (v, res) in values.iter().zip(results) {
        let res = res?;
        w.serialize(SweepSummaryRow {
            key: &key,
            value: v,
            outcome: describe(&res.outcome),
            kappa_mae: res.report.kappa_mae,
            delta_mae: res.report.delta_mae,
            kappa_avail_pct: res.report.kappa_avail_pct,
            delta_avail_pct: res.report.delta_avail_pct,
        })
        .map_err(run_err)?;
        if res.outcome.is_off_lane() {
            any_partial = Some(format!("{key}={v}: {}", describe(&res.outcome)));
        }
        table.push((format!("{key}={v}"), res.report));
    }
    w.flush().map_err(run_err)?;
    let refs: Vec<(&str, &EvalReport)> = table.iter().map(|(n, r)| (n.as_str(), r)).collect();
    println!("{}", comparison_table(&refs));
    match any_partial {
        Some(m) => Err(CliError::Partial(m)),
        None => Ok(()),
    }
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Ground truth for a mask sequence, one row per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub frame_idx: usize,
    pub kappa_gt: f64,
    pub delta_gt: f64,
}

#[derive(Serialize)]
struct EstimateRow {
    frame_idx: usize,
    kappa_hat: Option<f64>,
    delta_m: Option<f64>,
    delta_avail: bool,
}

/// `*.pgm` files in `dir`, sorted by name.
pub fn mask_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| run_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

fn read_truth(path: &Path) -> Result<Vec<TruthRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(run_err)?;
    r.deserialize()
        .collect::<Result<Vec<TruthRow>, _>>()
        .map_err(run_err)
}

/// Masks along the static centerline trajectory with their ground truth.
fn render_sequence(cfg: &RunConfig) -> Result<(Vec<GrayMask>, Vec<TruthRow>), CliError> {
    let track = Track::build(&cfg.track.spec()).map_err(run_err)?;
    let cam = cfg.camera()?;
    let n = cfg.eval.n_frames;
    let opts = cfg.render_options(n);
    let p = cfg.sim_params();
    let mut masks = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let state = VehicleState {
            s: p.start_s + i as f64 * p.speed * p.dt,
            d: 0.0,
            psi: 0.0,
            v: p.speed,
        };
        masks.push(render_mask(&track, &state, &cam, &opts, i));
        let (kappa_gt, delta_gt) = ground_truth(&track, &state, cfg.fit.u_s);
        truth.push(TruthRow {
            frame_idx: i,
            kappa_gt,
            delta_gt,
        });
    }
    Ok((masks, truth))
}

/// Runs the pipeline over a mask sequence, read from `masks` or rendered
/// from the configured track.
pub fn replay(cfg: &RunConfig, masks: Option<&Path>, out: &Path) -> Result<(), CliError> {
    write_effective_config(out, cfg)?;
    let (frames, truth): (Vec<GrayMask>, Option<Vec<TruthRow>>) = match masks {
        Some(dir) => {
            let files = mask_files(dir)?;
            if files.is_empty() {
                return Err(CliError::Run(format!("no .pgm files in {}", dir.display())));
            }
            let frames = files
                .iter()
                .map(|f| load_pgm(f).map_err(|e| run_err(format!("{}: {e}", f.display()))))
                .collect::<Result<Vec<_>, _>>()?;
            let tpath = dir.join(TRUTH_FILE);
            let truth = if tpath.exists() {
                Some(read_truth(&tpath)?)
            } else {
                warn!(
                    "no {TRUTH_FILE} in {}; errors are not computed",
                    dir.display()
                );
                None
            };
            (frames, truth)
        }
        None => {
            let (frames, truth) = render_sequence(cfg)?;
            if cfg.eval.save_masks {
                let mdir = out.join("masks");
                create_dir(&mdir)?;
                for (i, m) in frames.iter().enumerate() {
                    save_pgm(m, mdir.join(format!("frame_{i:06}.pgm"))).map_err(run_err)?;
                }
                write_truth(&mdir.join(TRUTH_FILE), &truth)?;
            }
            (frames, Some(truth))
        }
    };
    if let Some(t) = &truth {
        if t.len() != frames.len() {
            return Err(CliError::Run(format!(
                "{TRUTH_FILE} has {} rows for {} masks",
                t.len(),
                frames.len()
            )));
        }
    }

    let h = cfg.homography()?;
    let pcfg = cfg.pipeline();
    let mut session = Session::new(h, pcfg).map_err(run_err)?;
    let overlay_dir = out.join("overlays");
    if cfg.eval.overlays {
        create_dir(&overlay_dir)?;
    }
    let mut results = Vec::with_capacity(frames.len());
    for (i, mask) in frames.into_iter().enumerate() {
        let bg = cfg.eval.overlays.then(|| mask.clone());
        let r = session.process_frame(mask).map_err(run_err)?;
        if let Some(bg) = bg {
            if let Ok(o) = render_overlay(&r, &h, &pcfg, Some(&bg)) {
                save_ppm(&o.image, overlay_dir.join(format!("frame_{i:06}.ppm")))
                    .map_err(run_err)?;
            }
        }
        results.push(r);
    }

    let kappa = |r: &lanepath::pipeline::FrameResult<f64>| match cfg.eval.kappa_source {
        lanepath::evalkit::KappaSource::Filtered => r.kappa_hat,
        lanepath::evalkit::KappaSource::Raw => r.kappa_raw,
    };
    match truth {
        Some(truth) => {
            let rows: Vec<FrameRow> = results
                .iter()
                .zip(&truth)
                .map(|(r, t)| FrameRow {
                    frame_idx: t.frame_idx,
                    kappa_hat: kappa(r),
                    kappa_gt: t.kappa_gt,
                    delta_m: r.delta_m,
                    delta_gt: t.delta_gt,
                    delta_avail: r.delta_avail,
                })
                .collect();
            let report = EvalReport::from_rows(EvalMode::Static, &rows, cfg.eval.kappa_source)
                .map_err(run_err)?;
            export_report(out, &report, &rows, cfg.eval.block).map_err(run_err)?;
            println!("{}", comparison_table(&[("replay", &report)]));
        }
        None => {
            let mut w = csv::Writer::from_path(out.join(ESTIMATES_FILE)).map_err(run_err)?;
            for r in &results {
                w.serialize(EstimateRow {
                    frame_idx: r.frame_idx,
                    kappa_hat: kappa(r),
                    delta_m: r.delta_m,
                    delta_avail: r.delta_avail,
                })
                .map_err(run_err)?;
            }
            w.flush().map_err(run_err)?;
            let pct = |f: &dyn Fn(&lanepath::pipeline::FrameResult<f64>) -> bool| {
                100.0 * results.iter().filter(|r| f(r)).count() as f64 / results.len() as f64
            };
            let report = EvalReport {
                mode: EvalMode::Static,
                n_frames: results.len(),
                kappa_mae: None,
                delta_mae: None,
                kappa_avail_pct: pct(&|r| kappa(r).is_some()),
                delta_avail_pct: pct(&|r| r.delta_avail),
                kappa_source: cfg.eval.kappa_source,
                partial: false,
                outcome: None,
            };
            write_summary(&report, out.join(SUMMARY_FILE)).map_err(run_err)?;
            println!("{}", comparison_table(&[("replay", &report)]));
        }
    }
    Ok(())
}

fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(run_err)?;
    for r in rows {
        w.serialize(r).map_err(run_err)?;
    }
    w.flush().map_err(run_err)
}

/// Single-frame fit: lane model, path and estimates to `fit.json`, plus an
/// overlay when a model was found.
pub fn fit(cfg: &RunConfig, mask: &Path, out: &Path) -> Result<(), CliError> {
    write_effective_config(out, cfg)?;
    let m = load_pgm(mask).map_err(|e| run_err(format!("{}: {e}", mask.display())))?;
    let h = cfg.homography()?;
    let pcfg = cfg.pipeline();
    let mut session = Session::new(h, pcfg).map_err(run_err)?;
    let r = session.process_frame(m.clone()).map_err(run_err)?;
    let doc = serde_json::json!({
        "lane_model": r.lane_model,
        "path": r.path,
        "kappa_raw": r.kappa_raw,
        "kappa_hat": r.kappa_hat,
        "delta_px": r.delta_px,
        "delta_m": r.delta_m,
        "ops": r.ops,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(run_err)? + "\n";
    fs::write(out.join("fit.json"), &text).map_err(run_err)?;
    print!("{text}");
    match render_overlay(&r, &h, &pcfg, Some(&m)) {
        Ok(o) => save_ppm(&o.image, out.join("overlay.ppm")).map_err(run_err)?,
        Err(e) => warn!("no overlay: {e}"),
    }
    Ok(())
}

fn check_line(label: &str, value: f64, target: f64, tol: f64) -> bool {
    let err = relative_error(value, target);
    let ok = err.abs() <= tol;
    let fmt = |v: f64| {
        if v >= 1e3 {
            format!("{v:.0}")
        } else {
            format!("{v:.4}")
        }
    };
    println!(
        "{label:<16} {:>14} target {:>14} err {:>+7.2}%  {}",
        fmt(value),
        fmt(target),
        100.0 * err,
        if ok { "ok" } else { "OUT OF TOLERANCE" }
    );
    ok
}

/// Parameter and MAC totals for both graphs plus per-layer breakdowns and,
/// when enabled, a resolution sweep.
pub fn analyze_arch(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_effective_config(out, cfg)?;
    let hw = (cfg.arch.input_hw[0], cfg.arch.input_hw[1]);
    let (s, [unet, dsunet]) = summarize(hw).map_err(run_err)?;
    for (name, r) in [("unet", &unet), ("dsunet", &dsunet)] {
        let f = fs::File::create(out.join(format!("arch_layers_{name}.csv"))).map_err(run_err)?;
        write_breakdown_csv(r, BufWriter::new(f)).map_err(run_err)?;
    }
    let doc = serde_json::json!({
        "summary": s,
        "param_ratio": s.param_ratio(),
        "mac_ratio": s.mac_ratio(),
    });
    fs::write(
        out.join(ARCH_SUMMARY_FILE),
        serde_json::to_string_pretty(&doc).map_err(run_err)? + "\n",
    )
    .map_err(run_err)?;

    println!("input {}x{}", hw.0, hw.1);
    println!(
        "conv layers: unet {}, dsunet {}",
        s.unet_conv_layers, s.dsunet_conv_layers
    );
    check_line(
        "unet params",
        s.unet_params as f64,
        TARGET_UNET_PARAMS,
        PARAM_TOLERANCE,
    );
    check_line(
        "dsunet params",
        s.dsunet_params as f64,
        TARGET_DSUNET_PARAMS,
        PARAM_TOLERANCE,
    );
    check_line(
        "param ratio",
        s.param_ratio(),
        TARGET_PARAM_RATIO,
        2.0 * PARAM_TOLERANCE,
    );
    check_line(
        "unet MACs",
        s.unet_macs as f64,
        TARGET_UNET_MACS,
        MAC_TOLERANCE,
    );
    check_line(
        "dsunet MACs",
        s.dsunet_macs as f64,
        TARGET_DSUNET_MACS,
        MAC_TOLERANCE,
    );
    check_line("MAC ratio", s.mac_ratio(), TARGET_MAC_RATIO, MAC_TOLERANCE);

    if cfg.arch.sweep {
        let mut cands = candidate_resolutions();
        cands.extend(square_resolutions());
        let rows = sweep_resolutions(&cands).map_err(run_err)?;
        let mut w = csv::Writer::from_path(out.join(ARCH_SWEEP_FILE)).map_err(run_err)?;
        for r in &rows {
            w.serialize(r).map_err(run_err)?;
        }
        w.flush().map_err(run_err)?;
        if let Some(b) = best_resolution(&rows) {
            println!(
                "closest resolution: {}x{} (worst MAC error {:+.2}%)",
                b.width,
                b.height,
                100.0 * b.worst_err()
            );
        }
    }
    Ok(())
}

/// Block-averaged series from an existing `frames.csv`.
pub fn export_plots(cfg: &RunConfig, frames: &Path, out: &Path) -> Result<(), CliError> {
    write_effective_config(out, cfg)?;
    let f = fs::File::open(frames).map_err(|e| run_err(format!("{}: {e}", frames.display())))?;
    let rows = read_frames_csv(io::BufReader::new(f)).map_err(run_err)?;
    let blocks = blocked_series(&rows, cfg.eval.block);
    let w = fs::File::create(out.join(BLOCKED_FILE)).map_err(run_err)?;
    write_blocked_csv(&blocks, BufWriter::new(w)).map_err(run_err)?;
    println!("{} blocks of {} frames", blocks.len(), cfg.eval.block);
    Ok(())
}
