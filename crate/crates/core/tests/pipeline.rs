use flap::components::pca_weights;
use flap::covariance::CovarianceEstimate;
use flap::evaluation::{
    mse_curves, run_cv, ComponentScheme, ComponentSpec, CovarianceMode, CvPlan, MethodSpec,
    ScoreTable,
};
use flap::forecasting::ForecasterSpec;
use flap::ingestion::{read_panel, write_panel, Layout, Panel};
use flap::projection::{build_constraint, variance_reduction};
use flap::simulation::{simulate, surrogate_dgp};

fn panel() -> Panel {
    simulate(&surrogate_dgp(6, 1, 9).unwrap(), 90, 100).unwrap()
}

fn flap(p: usize, scheme: ComponentScheme) -> MethodSpec {
    MethodSpec::flap(
        ForecasterSpec::ar(3),
        ComponentSpec {
            scheme,
            p,
            standardize: true,
            seed: 4,
            forecaster: ForecasterSpec::ar(3),
            covariance: CovarianceMode::PerHorizon,
        },
    )
}

#[test]
fn panel_file_round_trip() {
    let panel = panel();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel(&panel, &path).unwrap();
    assert_eq!(read_panel(&path, Layout::Wide).unwrap(), panel);
}

#[test]
fn identity_covariance_with_full_pca_halves_variance() {
    let panel = panel();
    let w = pca_weights(&panel, 6, false).unwrap();
    let c = build_constraint(&w);
    let report = variance_reduction(&c, &CovarianceEstimate::identity(12, 1)).unwrap();
    assert!((report.total_reduction - 3.0).abs() < 1e-10);
    for r in &report.per_series_reduction {
        assert!((r - 0.5).abs() < 1e-10);
    }
}

#[test]
fn cv_scores_cover_every_cell() {
    let panel = panel();
    let plan = CvPlan::new(80, 2, 3).unwrap();
    assert_eq!(plan.origins(90).unwrap(), vec![80, 82, 84, 86]);
    let methods = vec![
        MethodSpec::benchmark(ForecasterSpec::ar(3)),
        flap(0, ComponentScheme::PcaNormal),
        flap(3, ComponentScheme::PcaNormal),
        flap(9, ComponentScheme::PcaNormal),
        flap(9, ComponentScheme::Normal),
    ];
    let table = run_cv(&panel, &plan, &methods).unwrap();
    assert!(table.failures().is_empty());
    assert_eq!(table.origins().len(), 4);
    let labels = table.method_labels();
    assert_eq!(labels[0], "AR – Benchmark");
    assert_eq!(labels[3], "AR – PCA+Norm – 9");

    let bench = table.method_index("AR – Benchmark").unwrap();
    let p0 = table.method_index("AR – PCA+Norm – 0").unwrap();
    for o in 0..4 {
        for h in 1..=3 {
            for s in 0..6 {
                let b = table.se(bench, o, h, s);
                assert!(b.is_finite());
                assert_eq!(b, table.se(p0, o, h, s));
            }
        }
    }

    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let back = ScoreTable::read_csv(buf.as_slice()).unwrap();
    for m in 0..labels.len() {
        assert_eq!(back.mean_mse(m, 1).unwrap(), table.mean_mse(m, 1).unwrap());
    }

    // The Normal family was only run at p = 9.
    assert!(mse_curves(&table, &[0, 3, 9]).is_err());
    let curves = mse_curves(&table, &[9]).unwrap();
    assert!(curves.iter().any(|c| c.p == 9 && c.h == 1));
    assert!(curves.iter().all(|c| c.mse.is_finite() && c.base_mse.is_finite()));
}

#[test]
fn cv_is_deterministic() {
    let panel = panel();
    let plan = CvPlan::new(85, 1, 2).unwrap();
    let methods = vec![MethodSpec::benchmark(ForecasterSpec::ar(2)), flap(4, ComponentScheme::Normal)];
    let a = run_cv(&panel, &plan, &methods).unwrap();
    let b = run_cv(&panel, &plan, &methods).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}
