use lanepath::evalkit::{mae, rows_from_records, EvalMode, EvalReport, KappaSource};
use lanepath::pipeline::PipelineConfig;
use lanepath::simworld::{
    kmh_to_ms, render_mask, run_dynamic, run_static, step_vehicle, Outcome, Perception,
    RenderOptions, SegmentSpec, SimParams, Track, TrackSpec, VehicleState,
};
use lanepath::CameraModel;
use proptest::prelude::*;

fn oracle_params(kmh: f64) -> SimParams {
    SimParams {
        speed: kmh_to_ms(kmh),
        perception: Perception::Oracle,
        ..SimParams::default()
    }
}

#[test]
fn static_straight_run_is_nearly_exact() {
    let track = Track::build(&TrackSpec::straight(400.0)).unwrap();
    let out = run_static(
        &track,
        &CameraModel::default(),
        &RenderOptions::default(),
        &PipelineConfig::default(),
        100,
        &SimParams::default(),
    )
    .unwrap();
    let rows = rows_from_records(&out.records, KappaSource::Filtered);
    let rep = EvalReport::from_rows(EvalMode::Static, &rows, KappaSource::Filtered).unwrap();
    assert!(rep.kappa_mae.unwrap() < 1e-4);
    assert!(rep.delta_mae.unwrap() < 0.02);
    assert_eq!((rep.kappa_avail_pct, rep.delta_avail_pct), (100.0, 100.0));
}

#[test]
fn oracle_perception_on_benchmark() {
    let track = Track::build(&TrackSpec::benchmark()).unwrap();
    let out = run_dynamic(
        &track,
        &CameraModel::default(),
        &RenderOptions::default(),
        &PipelineConfig::default(),
        &oracle_params(50.0),
    )
    .unwrap();
    assert_eq!(out.outcome, Outcome::TrackEnd);
    assert!(out.max_abs_d() < 0.15, "max |d| = {}", out.max_abs_d());
}

#[test]
fn kappa_stays_available_after_first_fit() {
    let track = Track::build(&TrackSpec::constant(300.0, 0.005)).unwrap();
    let opts = RenderOptions {
        occluders: RenderOptions::periodic_occluders(60, 0.2, 5, (330, 352)),
        ..RenderOptions::default()
    };
    let out = run_static(
        &track,
        &CameraModel::default(),
        &opts,
        &PipelineConfig::default(),
        60,
        &SimParams::default(),
    )
    .unwrap();
    let first = out
        .records
        .iter()
        .position(|r| r.kappa_hat.is_some())
        .unwrap();
    assert!(out.records[first..].iter().all(|r| r.kappa_hat.is_some()));
    assert!(out.records.iter().any(|r| r.delta_m.is_none()));
}

#[test]
fn dropout_shrinks_foreground() {
    let track = Track::build(&TrackSpec::straight(200.0)).unwrap();
    let cam = CameraModel::default();
    let v = VehicleState {
        s: 10.0,
        d: 0.0,
        psi: 0.0,
        v: 10.0,
    };
    let fg = |rate: f64| -> f64 {
        (0..20)
            .map(|seed| {
                let opts = RenderOptions {
                    dropout_rate: rate,
                    seed,
                    ..RenderOptions::default()
                };
                render_mask(&track, &v, &cam, &opts, 0)
                    .data()
                    .iter()
                    .filter(|&&p| p >= 0.5)
                    .count()
            })
            .sum::<usize>() as f64
            / 20.0
    };
    let counts: Vec<f64> = [0.0, 0.2, 0.5, 0.8].iter().map(|&r| fg(r)).collect();
    assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    assert!((counts[2] / counts[0] - 0.5).abs() < 0.05);
}

fn random_spec() -> impl Strategy<Value = TrackSpec> {
    prop::collection::vec(
        (
            50.0f64..300.0,
            -0.02f64..0.02,
            prop::option::of(0.0f64..0.5),
        ),
        1..5,
    )
    .prop_map(|segs| TrackSpec {
        segments: segs
            .into_iter()
            .map(|(length, curvature, frac)| SegmentSpec {
                length,
                curvature,
                blend: frac.map(|f| f * length),
            })
            .collect(),
        ..TrackSpec::straight(1.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heading_is_integral_of_curvature(spec in random_spec()) {
        let track = Track::build(&spec).unwrap();
        let len = track.length();
        // linear ramp over each blend, constant elsewhere
        let mut integral = spec.segments[0].curvature * spec.segments[0].length;
        for w in spec.segments.windows(2) {
            let (prev, seg) = (&w[0], &w[1]);
            let b = seg.blend.unwrap_or(0.0);
            integral += 0.5 * (prev.curvature + seg.curvature) * b + seg.curvature * (seg.length - b);
        }
        prop_assert!((len - spec.total_length()).abs() < 1e-9);
        let turned = track.heading(len) - track.heading(0.0);
        prop_assert!((turned - integral).abs() < 1e-6, "{} vs {}", turned, integral);
    }

    #[test]
    fn oracle_loop_stays_in_lane(spec in random_spec(), kmh in 20.0f64..=70.0) {
        let track = Track::build(&spec).unwrap();
        let out = run_dynamic(
            &track,
            &CameraModel::default(),
            &RenderOptions::default(),
            &PipelineConfig::default(),
            &oracle_params(kmh),
        ).unwrap();
        prop_assert!(!out.outcome.is_off_lane());
    }

    #[test]
    fn arc_length_advances(
        d in -1.5f64..1.5, psi in -1.5f64..1.5, steer in -0.5f64..0.5,
        kappa in -0.07f64..0.07, v in 0.1f64..20.0,
    ) {
        prop_assume!(d * kappa < 1.0);
        let track = Track::build(&TrackSpec::constant(500.0, kappa)).unwrap();
        let s0 = VehicleState { s: 100.0, d, psi, v };
        if let Ok(next) = step_vehicle(&s0, steer, 0.05, &track, 2.7) {
            prop_assert!(next.s > s0.s);
        }
    }

    #[test]
    fn render_is_seed_deterministic(seed in any::<u64>(), frame in 0usize..1000) {
        let track = Track::build(&TrackSpec::constant(300.0, 0.01)).unwrap();
        let cam = CameraModel::default();
        let v = VehicleState { s: 20.0, d: 0.2, psi: 0.01, v: 10.0 };
        let opts = RenderOptions { dropout_rate: 0.1, pixel_noise_sd: 0.1, seed, ..RenderOptions::default() };
        prop_assert_eq!(
            render_mask(&track, &v, &cam, &opts, frame),
            render_mask(&track, &v, &cam, &opts, frame)
        );
    }
}

#[test]
fn unavailable_offsets_do_not_enter_the_error() {
    let est = [0.1f64, 9.0, 0.3];
    let gt = [0.0, 0.0, 0.0];
    assert!((mae(&est, &gt, &[true, false, true]).unwrap() - 0.2).abs() < 1e-15);
}
