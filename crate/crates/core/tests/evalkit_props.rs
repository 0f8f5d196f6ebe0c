use lanepath::estfilter::BLOCK_SIZE;
use lanepath::evalkit::{
    avail_pct, export_report, mae, read_frames_csv, read_summary, write_frames_csv, EvalMode,
    EvalReport, FrameRow, KappaSource, BLOCKED_FILE, FRAMES_FILE, SUMMARY_FILE,
};
use proptest::prelude::*;

#[test]
fn hand_examples() {
    assert_eq!(
        mae(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[true, true, false]).unwrap(),
        0.5
    );
    assert_eq!(avail_pct(&[true, true, false, false]).unwrap(), 50.0);
    let mut v = vec![true; 191];
    v.extend([false; 9]);
    assert_eq!(avail_pct(&v).unwrap(), 95.5);
}

fn row_strategy() -> impl Strategy<Value = FrameRow> {
    (
        prop::option::of(-0.05f64..0.05),
        -0.05f64..0.05,
        prop::option::of(-1.0f64..1.0),
        -1.0f64..1.0,
    )
        .prop_map(|(k, kg, d, dg)| FrameRow {
            frame_idx: 0,
            kappa_hat: k,
            kappa_gt: kg,
            delta_m: d,
            delta_gt: dg,
            delta_avail: d.is_some(),
        })
}

fn rows_strategy() -> impl Strategy<Value = Vec<FrameRow>> {
    prop::collection::vec(row_strategy(), 1..60).prop_map(|mut rows| {
        for (i, r) in rows.iter_mut().enumerate() {
            r.frame_idx = i;
        }
        rows
    })
}

proptest! {
    #[test]
    fn mae_permutation_and_scale(
        data in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, any::<bool>()), 1..50),
        rot in any::<prop::sample::Index>(),
        c in -10.0f64..10.0,
    ) {
        prop_assume!(data.iter().any(|d| d.2));
        let split = |d: &[(f64, f64, bool)]| -> (Vec<f64>, Vec<f64>, Vec<bool>) {
            (d.iter().map(|x| x.0).collect(), d.iter().map(|x| x.1).collect(), d.iter().map(|x| x.2).collect())
        };
        let (e, t, a) = split(&data);
        let base = mae(&e, &t, &a).unwrap();
        let mut rotated = data.clone();
        rotated.rotate_left(rot.index(data.len()));
        rotated.reverse();
        let (e2, t2, a2) = split(&rotated);
        prop_assert!((mae(&e2, &t2, &a2).unwrap() - base).abs() < 1e-12);
        let es: Vec<f64> = e.iter().map(|x| c * x).collect();
        let ts: Vec<f64> = t.iter().map(|x| c * x).collect();
        prop_assert!((mae(&es, &ts, &a).unwrap() - c.abs() * base).abs() < 1e-12);
    }

    #[test]
    fn avail_of_concatenation(a in prop::collection::vec(any::<bool>(), 1..80), b in prop::collection::vec(any::<bool>(), 1..80)) {
        let joined: Vec<bool> = a.iter().chain(&b).copied().collect();
        let weighted = (avail_pct(&a).unwrap() * a.len() as f64 + avail_pct(&b).unwrap() * b.len() as f64)
            / joined.len() as f64;
        prop_assert!((avail_pct(&joined).unwrap() - weighted).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_preserves_errors(rows in rows_strategy()) {
        let mut buf = Vec::new();
        write_frames_csv(&rows, &mut buf).unwrap();
        let back = read_frames_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &rows);
        let a = EvalReport::from_rows(EvalMode::Dynamic, &rows, KappaSource::Filtered).unwrap();
        let b = EvalReport::from_rows(EvalMode::Dynamic, &back, KappaSource::Filtered).unwrap();
        prop_assert_eq!(a.kappa_mae, b.kappa_mae);
        prop_assert_eq!(a.delta_mae, b.delta_mae);
    }
}

#[test]
fn export_writes_all_files_and_summary_round_trips() {
    let rows: Vec<FrameRow> = (0..22)
        .map(|i| FrameRow {
            frame_idx: i,
            kappa_hat: Some(0.01 + 1e-4 * i as f64),
            kappa_gt: 0.01,
            delta_m: (i % 5 != 0).then_some(0.05 / 3.0),
            delta_gt: 0.0,
            delta_avail: i % 5 != 0,
        })
        .collect();
    let rep = EvalReport::from_rows(EvalMode::Static, &rows, KappaSource::Filtered).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_report(dir.path(), &rep, &rows, BLOCK_SIZE).unwrap();
    assert_eq!(read_summary(dir.path().join(SUMMARY_FILE)).unwrap(), rep);
    let frames = std::fs::read_to_string(dir.path().join(FRAMES_FILE)).unwrap();
    assert_eq!(frames.lines().count(), 23);
    let blocked = std::fs::read_to_string(dir.path().join(BLOCKED_FILE)).unwrap();
    assert_eq!(blocked.lines().count(), 3);
}
