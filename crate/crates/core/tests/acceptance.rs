//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use flap::components::orthonormal_weights;
use flap::covariance::{shrink_cov, CovarianceEstimate, ResidualMatrix};
use flap::evaluation::{
    critical_distance, friedman_nemenyi, run_cv, sign_test, studentized_range_quantile, ComponentScheme,
    ComponentSpec, CovarianceMode, CvPlan, MethodSpec,
};
use flap::forecasting::ForecasterSpec;
use flap::projection::{
    build_constraint, build_projection, constraint_from_phi, monotonicity_check, variance_reduction,
    ConstraintMatrix,
};
use flap::ingestion::Panel;
use flap::simulation::{
    ar_predictor_error_cov, simulate_replicates, surrogate_dgp, yule_walker, VarProcess, DEFAULT_BURN_IN,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

type Outcome = Result<String, String>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// SPD matrix with a random spread of eigenvalues and overall scale.
fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian(n, n, rng);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    (&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05) * scale
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Instance {
    c: ConstraintMatrix,
    w: CovarianceEstimate,
}

fn instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let m = rng.random_range(1..=8);
            let p = rng.random_range(1..=12);
            let phi = gaussian(p, m, &mut rng);
            let w = random_spd(m + p, &mut rng);
            Instance {
                c: constraint_from_phi(&phi),
                w: CovarianceEstimate::known(w, 1).unwrap(),
            }
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for &m in &[3usize, 10, 50] {
        for p in 1..=m {
            let w = orthonormal_weights(m, p, 100 + p as u64).map_err(|e| e.to_string())?;
            let c = build_constraint(&w);
            let cov = CovarianceEstimate::identity(m + p, 1);
            let report = variance_reduction(&c, &cov).map_err(|e| e.to_string())?;
            if p < m {
                worst = worst.max((report.total_reduction - p as f64 / 2.0).abs());
            } else {
                for r in &report.per_series_reduction {
                    worst = worst.max((r - 0.5).abs());
                }
                worst = worst.max((report.total_reduction - m as f64 / 2.0).abs());
            }
        }
    }
    check(worst <= 1e-10, format!("max deviation {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0f64; 4];
    for inst in instances(200, 20) {
        let op = build_projection(&inst.c, &inst.w).map_err(|e| e.to_string())?;
        let m_mat = op.mmat();
        let m_norm = m_mat.norm();
        worst[0] = worst[0].max((m_mat * m_mat - m_mat).norm() / m_norm);
        worst[1] = worst[1].max((inst.c.matrix() * m_mat).amax());
        let y = DVector::from_fn(inst.c.m(), |_, _| normal(&mut rng));
        let coherent = inst.c.summing() * &y;
        worst[2] = worst[2].max((m_mat * &coherent - &coherent).amax() / coherent.amax().max(1.0));
        let zhat = DVector::from_fn(inst.c.m() + inst.c.p(), |_, _| normal(&mut rng));
        let g_path = op.project_y(&zhat).map_err(|e| e.to_string())?;
        let m_path = (m_mat * &zhat).rows(0, inst.c.m()).into_owned();
        worst[3] = worst[3].max((g_path - m_path).amax());
    }
    check(
        worst[0] <= 1e-8 && worst[1] <= 1e-8 && worst[2] <= 1e-10 && worst[3] <= 1e-8,
        format!(
            "idempotence {:.1e}, CM {:.1e}, fixed point {:.1e}, G vs M {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Solves `[[W^{-1}, C'], [C, 0]] [z; lambda] = [W^{-1} zhat; 0]` directly.
fn kkt_solution(c: &DMatrix<f64>, w: &DMatrix<f64>, zhat: &DVector<f64>) -> DVector<f64> {
    let n = w.nrows();
    let r = c.nrows();
    let w_inv = w.clone().try_inverse().expect("SPD");
    let mut kkt = DMatrix::zeros(n + r, n + r);
    kkt.view_mut((0, 0), (n, n)).copy_from(&w_inv);
    kkt.view_mut((0, n), (n, r)).copy_from(&c.transpose());
    kkt.view_mut((n, 0), (r, n)).copy_from(c);
    let mut rhs = DVector::zeros(n + r);
    rhs.rows_mut(0, n).copy_from(&(&w_inv * zhat));
    let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.rows(0, n).into_owned()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for inst in instances(50, 30) {
        let op = build_projection(&inst.c, &inst.w).map_err(|e| e.to_string())?;
        let zhat = DVector::from_fn(inst.c.m() + inst.c.p(), |_, _| normal(&mut rng));
        let ours = op.project(&zhat).map_err(|e| e.to_string())?.ztilde;
        let oracle = kkt_solution(inst.c.matrix(), inst.w.matrix(), &zhat);
        worst = worst.max((ours - oracle).amax());
    }
    check(worst <= 1e-8, format!("max deviation from KKT solution {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut worst = f64::INFINITY;
    for inst in instances(200, 20) {
        let report = variance_reduction(&inst.c, &inst.w).map_err(|e| e.to_string())?;
        let eig = report.reduction_matrix.clone().symmetric_eigenvalues().min();
        let scaled = eig / inst.w.matrix().norm();
        worst = worst.min(scaled);
        if eig < -1e-8 * inst.w.matrix().norm() {
            return Err(format!("eigenvalue {eig:.3e} below tolerance"));
        }
    }
    check(true, format!("smallest eigenvalue / |W| = {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_theory: f64 = f64::NEG_INFINITY;
    let mut mc_violations = 0;
    let mut worst_z: f64 = f64::NEG_INFINITY;
    let draws = 5000;
    for _ in 0..50 {
        let m = rng.random_range(2..=8);
        let phi = gaussian(10, m, &mut rng);
        let w = random_spd(m + 10, &mut rng);
        let full = constraint_from_phi(&phi);
        let steps: Vec<(ConstraintMatrix, CovarianceEstimate)> = (0..=10)
            .map(|p| {
                (
                    full.truncate(p).unwrap(),
                    CovarianceEstimate::known(w.view((0, 0), (m + p, m + p)).into_owned(), 1).unwrap(),
                )
            })
            .collect();
        let report = monotonicity_check(&steps).map_err(|e| e.to_string())?;
        for d in &report.deltas {
            worst_theory = worst_theory.max(-d.min());
        }
        if !report.is_monotone() {
            return Err(format!("theoretical reductions decrease by {worst_theory:.2e}"));
        }

        let l = w.clone().cholesky().expect("SPD").l();
        let errors = &l * gaussian(m + 10, draws, &mut rng);
        let mse: Vec<DVector<f64>> = steps
            .iter()
            .map(|(c, cov)| {
                let op = build_projection(c, cov).unwrap();
                let k = m + c.p();
                let projected = if c.p() == 0 {
                    errors.rows(0, m).into_owned()
                } else {
                    op.gmat() * errors.rows(0, k)
                };
                DVector::from_iterator(draws, projected.column_iter().map(|col| col.norm_squared() / m as f64))
            })
            .collect();
        for pair in mse.windows(2) {
            let d = &pair[1] - &pair[0];
            let mean = d.mean();
            let sd = (d.map(|v| (v - mean).powi(2)).sum() / (draws as f64 - 1.0)).sqrt();
            let se = sd / (draws as f64).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max(mean / se);
            }
            if mean > 2.0 * se {
                mc_violations += 1;
            }
        }
    }
    check(
        mc_violations == 0,
        format!(
            "max theoretical decrease {:.1e}, max MSE increase {:.2} SE, {} Monte-Carlo violations",
            worst_theory.max(0.0),
            worst_z,
            mc_violations
        ),
    )
}

struct ShrinkReference {
    w: DMatrix<f64>,
    lambda_cor: f64,
    lambda_var: f64,
}

/// Direct transcription of the correlation/variance shrinkage formulas.
fn shrink_reference(x: &DMatrix<f64>) -> ShrinkReference {
    let (n, k) = x.shape();
    let nf = n as f64;
    let mut xc = x.clone();
    for j in 0..k {
        let mean: f64 = (0..n).map(|t| x[(t, j)]).sum::<f64>() / nf;
        for t in 0..n {
            xc[(t, j)] = x[(t, j)] - mean;
        }
    }
    let var: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|t| xc[(t, j)].powi(2)).sum::<f64>() / (nf - 1.0))
        .collect();
    let xs = DMatrix::from_fn(n, k, |t, j| xc[(t, j)] / var[j].sqrt());
    let factor = nf / (nf - 1.0).powi(3);
    let mut r = DMatrix::identity(k, k);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let w: Vec<f64> = (0..n).map(|t| xs[(t, i)] * xs[(t, j)]).collect();
            let wbar = w.iter().sum::<f64>() / nf;
            r[(i, j)] = w.iter().sum::<f64>() / (nf - 1.0);
            num += factor * w.iter().map(|v| (v - wbar).powi(2)).sum::<f64>();
            den += r[(i, j)].powi(2);
        }
    }
    let lambda_cor = (num / den).clamp(0.0, 1.0);
    let mut sorted = var.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0
    };
    let mut vnum = 0.0;
    let mut vden = 0.0;
    for j in 0..k {
        let w: Vec<f64> = (0..n).map(|t| xc[(t, j)].powi(2)).collect();
        let wbar = w.iter().sum::<f64>() / nf;
        vnum += factor * w.iter().map(|v| (v - wbar).powi(2)).sum::<f64>();
        vden += (var[j] - median).powi(2);
    }
    let lambda_var = (vnum / vden).clamp(0.0, 1.0);
    let v_star: Vec<f64> = var.iter().map(|v| lambda_var * median + (1.0 - lambda_var) * v).collect();
    let w = DMatrix::from_fn(k, k, |i, j| {
        let rho = if i == j { 1.0 } else { (1.0 - lambda_cor) * r[(i, j)] };
        rho * (v_star[i] * v_star[j]).sqrt()
    });
    ShrinkReference {
        w,
        lambda_cor,
        lambda_var,
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let shapes: Vec<(usize, usize)> = vec![
        (3, 2), (3, 6), (4, 8), (5, 10), (6, 12), (10, 20), (15, 30), (25, 50), (8, 3), (12, 5),
        (20, 4), (30, 10), (50, 7), (60, 25), (100, 40), (40, 80), (7, 14), (9, 2), (200, 15), (35, 70),
    ];
    for (idx, &(n, k)) in shapes.iter().enumerate() {
        // Mix of scales and correlation so that neither lambda sits on a bound for every fixture.
        let mix = gaussian(k, k, &mut rng) * (idx as f64 / 20.0);
        let scales = DVector::from_fn(k, |_, _| 10f64.powf(rng.random_range(-1.0..1.0)));
        let mut x = gaussian(n, k, &mut rng) * (DMatrix::identity(k, k) + mix);
        for j in 0..k {
            x.column_mut(j).scale_mut(scales[j]);
        }
        let est = shrink_cov(&ResidualMatrix::new(x.clone(), 1, 0).unwrap()).map_err(|e| e.to_string())?;
        let reference = shrink_reference(&x);
        let lambdas = est.lambdas().expect("shrinkage reports lambdas");
        let scale = reference.w.amax().max(1.0);
        worst = worst
            .max((est.matrix() - &reference.w).amax() / scale)
            .max((lambdas.lambda_cor - reference.lambda_cor).abs())
            .max((lambdas.lambda_var - reference.lambda_var).abs());
        for l in [lambdas.lambda_cor, lambdas.lambda_var] {
            if !(0.0..=1.0).contains(&l) {
                return Err(format!("lambda {l} outside [0, 1]"));
            }
        }
        let min_eig = est.matrix().clone().symmetric_eigenvalues().min();
        if min_eig <= 0.0 {
            return Err(format!("fixture n={n}, k={k} is not PD (min eigenvalue {min_eig:.3e})"));
        }
    }
    check(worst <= 1e-10, format!("max deviation from reference {worst:.2e} over 20 fixtures, all PD"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Largest `mean(d) / se(d)` over consecutive steps of paired per-replicate
/// curves, and whether every step satisfies `mean(d) <= 2 se(d)`.
fn curve_steps(curve: &[Vec<f64>]) -> (f64, bool) {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for pair in curve.windows(2) {
        let d: Vec<f64> = pair[1].iter().zip(&pair[0]).map(|(a, b)| a - b).collect();
        let md = mean(&d);
        let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0)).sqrt();
        let se = sd / (d.len() as f64).sqrt();
        if se > 0.0 {
            worst = worst.max(md / se);
        }
        if md > 2.0 * se {
            ok = false;
        }
    }
    (worst, ok)
}

/// One-step MSE per `p` when every augmented series is forecast by its
/// population AR(`q`) predictor and projected with the population `W`,
/// which is then the exact covariance of the base errors.
fn population_curve(
    process: &VarProcess,
    panel: &Panel,
    scheme: ComponentScheme,
    sweep: &[usize],
    origins: std::ops::Range<usize>,
    q: usize,
) -> Result<Vec<f64>, String> {
    let m = panel.n_series();
    let p_max = *sweep.iter().max().expect("non-empty sweep");
    let gamma = process.autocovariances(q).map_err(|e| e.to_string())?;
    let mut sse = vec![0.0; sweep.len()];
    let n_origins = origins.len();
    for t0 in origins {
        let train = panel.head(t0);
        let phi = scheme.weights(&train, p_max, false, 11).map_err(|e| e.to_string())?.weights().clone();
        let mut s = DMatrix::zeros(m + p_max, m);
        s.view_mut((0, 0), (m, m)).fill_with_identity();
        s.view_mut((m, 0), (p_max, m)).copy_from(&phi);
        let w_full = ar_predictor_error_cov(process, &s, q, 1).map_err(|e| e.to_string())?;
        let y = panel.values();
        let zhat = DVector::from_fn(m + p_max, |i, _| {
            let si = s.row(i).transpose();
            let g: Vec<f64> = gamma.iter().map(|gk| si.dot(&(gk * &si))).collect();
            let coefs = yule_walker(&g, q).expect("Yule-Walker");
            coefs
                .iter()
                .enumerate()
                .map(|(j, c)| c * si.dot(&y.row(t0 - 1 - j).transpose()))
                .sum::<f64>()
        });
        let actual = y.row(t0).transpose();
        let full = constraint_from_phi(&phi);
        for (idx, &p) in sweep.iter().enumerate() {
            let k = m + p;
            let yhat = if p == 0 {
                zhat.rows(0, m).into_owned()
            } else {
                let cov = CovarianceEstimate::known(w_full.view((0, 0), (k, k)).into_owned(), 1)
                    .map_err(|e| e.to_string())?;
                let op = build_projection(&full.truncate(p).map_err(|e| e.to_string())?, &cov)
                    .map_err(|e| e.to_string())?;
                op.project_y(&zhat.rows(0, k).into_owned()).map_err(|e| e.to_string())?
            };
            sse[idx] += (yhat - &actual).norm_squared();
        }
    }
    Ok(sse.into_iter().map(|v| v / (m * n_origins) as f64).collect())
}

fn criterion_7() -> Outcome {
    const M: usize = 20;
    const REPLICATES: usize = 30;
    const AR_ORDER: usize = 5;
    const TRAIN: usize = 288;
    const T: usize = 300;
    let sweep = [0usize, 5, 10, 20, 40, 80];
    let process = surrogate_dgp(M, 2, 2024).map_err(|e| e.to_string())?;
    let panels = simulate_replicates(&process, T, DEFAULT_BURN_IN, REPLICATES, 7000).map_err(|e| e.to_string())?;
    let base = ForecasterSpec::ar(AR_ORDER);
    let mut methods = vec![MethodSpec::benchmark(base.clone())];
    let families = [ComponentScheme::PcaNormal, ComponentScheme::Normal];
    for scheme in families {
        for &p in &sweep {
            methods.push(MethodSpec::flap(
                base.clone(),
                ComponentSpec {
                    scheme,
                    p,
                    standardize: false,
                    seed: 11,
                    forecaster: base.clone(),
                    covariance: CovarianceMode::PerHorizon,
                },
            ));
        }
    }
    let plan = CvPlan::new(TRAIN, 1, 1).map_err(|e| e.to_string())?;
    let mut mse: Vec<Vec<f64>> = vec![Vec::with_capacity(REPLICATES); methods.len()];
    let mut population: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(REPLICATES); sweep.len()]; families.len()];
    for panel in &panels {
        let table = run_cv(panel, &plan, &methods).map_err(|e| e.to_string())?;
        for (i, col) in mse.iter_mut().enumerate() {
            col.push(table.mean_mse(i, 1).map_err(|e| e.to_string())?);
        }
        for (f, scheme) in families.iter().enumerate() {
            let curve = population_curve(&process, panel, *scheme, &sweep, TRAIN..T, AR_ORDER)?;
            for (idx, v) in curve.into_iter().enumerate() {
                population[f][idx].push(v);
            }
        }
    }
    let index = |label: &str| methods.iter().position(|m| m.label() == label).expect("method present");
    let base_mse = &mse[0];
    let pca_m = &mse[index(&format!("AR \u{2013} PCA+Norm \u{2013} {M}"))];
    let test = sign_test(pca_m, base_mse).map_err(|e| e.to_string())?;
    let part_a = mean(pca_m) < mean(base_mse) && test.p_value < 0.05;

    let mut part_b = true;
    let mut worst_z = f64::NEG_INFINITY;
    let mut curves = Vec::new();
    for (f, scheme) in families.iter().enumerate() {
        let (z, ok) = curve_steps(&population[f]);
        worst_z = worst_z.max(z);
        part_b &= ok;
        let points: Vec<String> = population[f].iter().map(|c| format!("{:.3}", mean(c))).collect();
        curves.push(format!("{} [{}]", scheme.label(), points.join(", ")));
    }
    let detail = format!(
        "(a) base MSE {:.4}, PCA p={M} MSE {:.4}, sign test {}/{} wins p={:.2e}; \
         (b) population-W MSE over p={sweep:?}: {}, max step {:.2} SE",
        mean(base_mse),
        mean(pca_m),
        test.wins,
        test.wins + test.losses,
        test.p_value,
        curves.join("; "),
        worst_z
    );
    check(part_a && part_b, detail)
}

/// `P(range of k standard normals <= q)` by Simpson integration.
fn range_cdf(q: f64, k: usize) -> f64 {
    let nd = Normal::standard();
    let (lo, hi, n) = (-10.0, 10.0, 8000);
    let h = (hi - lo) / n as f64;
    let f = |z: f64| nd.pdf(z) * (nd.cdf(z + q) - nd.cdf(z)).powi(k as i32 - 1);
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        let z = lo + i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    k as f64 * sum * h / 3.0
}

fn range_quantile(alpha: f64, k: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if range_cdf(mid, k) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_8() -> Outcome {
    let scores = DMatrix::from_row_slice(
        10,
        4,
        &[
            1.2, 2.3, 3.1, 4.0, //
            0.5, 0.7, 0.6, 0.9, //
            2.0, 1.0, 3.0, 4.0, //
            3.3, 3.3, 1.1, 2.2, //
            1.0, 2.0, 3.0, 4.0, //
            4.0, 3.0, 2.0, 1.0, //
            0.1, 0.4, 0.3, 0.2, //
            5.0, 5.0, 5.0, 1.0, //
            2.5, 1.5, 3.5, 0.5, //
            1.0, 3.0, 2.0, 2.0,
        ],
    );
    // Rank sums 41/2, 55/2, 53/2, 51/2 around N(k+1)/2 = 25 give a squared
    // spread of 29; the rank sum of squares is 297 against 250 without ties,
    // so the statistic is 3 * 29 / 47.
    let expected_stat = 87.0 / 47.0;
    let labels: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    let report = friedman_nemenyi(&scores, &labels, 0.05).map_err(|e| e.to_string())?;
    let stat_err = (report.friedman_statistic - expected_stat).abs();
    let ranks_err = report
        .mean_ranks
        .iter()
        .zip([2.05, 2.75, 2.65, 2.55])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // q_{0.05,4} sqrt(4 * 5 / 120) and q_{0.05,3} sqrt(3 * 4 / 144).
    let cd4_err = (report.critical_distance - 3.633160 * (20.0f64 / 120.0).sqrt()).abs();
    let cd3 = critical_distance(0.05, 3, 12).map_err(|e| e.to_string())?;
    let cd3_err = (cd3 - 0.956_811_712_888_565_1).abs();

    let mut table_err: f64 = 0.0;
    for &alpha in &[0.01, 0.05, 0.10] {
        for k in 2..=20 {
            let q = studentized_range_quantile(alpha, k).map_err(|e| e.to_string())?;
            table_err = table_err.max((q - range_quantile(alpha, k)).abs());
        }
    }
    check(
        stat_err <= 1e-10 && ranks_err <= 1e-12 && cd4_err <= 1e-10 && cd3_err <= 1e-10 && table_err <= 1e-6,
        format!(
            "statistic error {stat_err:.1e}, CD errors {cd4_err:.1e}/{cd3_err:.1e}, quantile table vs integration {table_err:.1e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for inst in instances(50, 90) {
        let zhat = DVector::from_fn(inst.c.m() + inst.c.p(), |_, _| normal(&mut rng));
        let reference = build_projection(&inst.c, &inst.w)
            .and_then(|op| op.project_y(&zhat))
            .map_err(|e| e.to_string())?;
        for alpha in [1e-3, 1.0, 1e3] {
            let scaled = build_projection(&inst.c, &inst.w.scaled(alpha))
                .and_then(|op| op.project_y(&zhat))
                .map_err(|e| e.to_string())?;
            worst = worst.max((scaled - &reference).amax());
        }
    }
    check(worst <= 1e-10, format!("max change under W -> alpha W {worst:.2e}"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 10_000;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..5 {
        let m = rng.random_range(2..=8);
        let p = rng.random_range(1..=12);
        let phi = gaussian(p, m, &mut rng);
        let c = constraint_from_phi(&phi);
        let w = random_spd(m + p, &mut rng);
        let op = build_projection(&c, &CovarianceEstimate::known(w.clone(), 1).unwrap()).map_err(|e| e.to_string())?;
        let l = w.cholesky().expect("SPD").l();
        let y = DVector::from_fn(m, |_, _| normal(&mut rng));
        let z = c.summing() * &y;
        let mut errors = DMatrix::zeros(m, n);
        for d in 0..n {
            let e = &l * DVector::from_fn(m + p, |_, _| normal(&mut rng));
            let ytilde = op.project_y(&(&z + e)).map_err(|e| e.to_string())?;
            errors.set_column(d, &(ytilde - &y));
        }
        for row in errors.row_iter() {
            let mean = row.mean();
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            let ratio = mean.abs() / (sd / (n as f64).sqrt());
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    check(worst_ratio <= 4.0, format!("max |mean| / (sigma / sqrt N) = {worst_ratio:.2}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("identity W, full PCA reduction", criterion_1),
        ("projection properties", criterion_2),
        ("KKT oracle equivalence", criterion_3),
        ("reduction matrix PSD", criterion_4),
        ("monotone reduction in p", criterion_5),
        ("shrinkage estimator", criterion_6),
        ("desk-scale simulation", criterion_7),
        ("Friedman/Nemenyi", criterion_8),
        ("scale invariance of W", criterion_9),
        ("unbiasedness preserved", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {secs:.2} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}; {secs:.2} s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
