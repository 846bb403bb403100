//! Constraint matrices, the projection of base forecasts onto the coherent
//! subspace, and the variance-reduction diagnostics.
//!
//! For `p` components with weights `Phi`, the augmented vector
//! `z = [y; c]` is coherent when `C z = 0` with `C = [-Phi | I_p]`. Given the
//! base forecast error covariance `W`, projected forecasts are
//!
//! ```text
//! z~ = M z^,   M = I - W C' (C W C')^{-1} C
//! y~ = G z^,   G = (S' W^{-1} S)^{-1} S' W^{-1},   S = [I_m; Phi]
//! ```
//!
//! Both routes give the same `y~`; `G` is the default because only `m` rows
//! are needed. No explicit inverses are formed: every `(.)^{-1}` is a
//! Cholesky solve.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::components::WeightMatrix;
use crate::covariance::{write_matrix_csv, CovarianceEstimate};
use crate::error::{FlapError, Result};
use crate::linalg::{asymmetry, cholesky, frobenius, spd_condition};

/// Condition number of `C W C'` above which a warning is attached.
pub const ILL_CONDITION_THRESHOLD: f64 = 1e12;

/// Asymmetry (relative to `||W||_F`) above which symmetrization is reported.
pub const ASYMMETRY_TOLERANCE: f64 = 1e-8;

/// Relative tolerance for the positivity condition's discrepancy vector.
pub const POSITIVITY_TOLERANCE: f64 = 1e-8;

/// Per-series reduction decreases below `-MONOTONICITY_TOLERANCE` are
/// reported as violations.
pub const MONOTONICITY_TOLERANCE: f64 = 1e-8;

/// `C = [-Phi | I_p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    c: DMatrix<f64>,
    m: usize,
    p: usize,
}

impl ConstraintMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Component weights recovered from the left block.
    pub fn phi(&self) -> DMatrix<f64> {
        -self.c.columns(0, self.m)
    }

    /// `S = [I_m; Phi]`, so that coherent vectors are `z = S y`.
    pub fn summing(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.m + self.p, self.m);
        s.view_mut((0, 0), (self.m, self.m)).fill_with_identity();
        s.view_mut((self.m, 0), (self.p, self.m)).copy_from(&self.phi());
        s
    }

    /// Constraint for the first `p` components only.
    pub fn truncate(&self, p: usize) -> Result<Self> {
        if p > self.p {
            return Err(FlapError::Dimension(format!("cannot keep {p} of {} constraints", self.p)));
        }
        Ok(constraint_from_phi(&self.phi().rows(0, p).into_owned()))
    }
}

pub fn build_constraint(w: &WeightMatrix) -> ConstraintMatrix {
    constraint_from_phi(w.weights())
}

/// Assembles `[-Phi | I_p]` entry by entry.
pub fn constraint_from_phi(phi: &DMatrix<f64>) -> ConstraintMatrix {
    let (p, m) = phi.shape();
    let mut c = DMatrix::zeros(p, m + p);
    for i in 0..p {
        for j in 0..m {
            c[(i, j)] = -phi[(i, j)];
        }
        c[(i, m + i)] = 1.0;
    }
    ConstraintMatrix { c, m, p }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectionOptions {
    /// Ridge `eps * I` added to `W` before any factorization.
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ProjectionWarning {
    IllConditioned { condition: f64 },
    Symmetrized { max_asymmetry: f64 },
}

/// The FLAP map for one constraint set and covariance.
#[derive(Debug, Clone)]
pub struct ProjectionOperator {
    mmat: DMatrix<f64>,
    gmat: DMatrix<f64>,
    smat: DMatrix<f64>,
    constraint: ConstraintMatrix,
    w: CovarianceEstimate,
    condition: f64,
    warnings: Vec<ProjectionWarning>,
}

/// Projected forecasts for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub ztilde: DVector<f64>,
    pub ytilde: DVector<f64>,
}

impl ProjectionOperator {
    /// `M`, `(m+p) x (m+p)`.
    pub fn mmat(&self) -> &DMatrix<f64> {
        &self.mmat
    }

    /// `G`, `m x (m+p)`.
    pub fn gmat(&self) -> &DMatrix<f64> {
        &self.gmat
    }

    /// `S`, `(m+p) x m`.
    pub fn smat(&self) -> &DMatrix<f64> {
        &self.smat
    }

    pub fn constraint(&self) -> &ConstraintMatrix {
        &self.constraint
    }

    pub fn covariance(&self) -> &CovarianceEstimate {
        &self.w
    }

    /// Condition estimate of `C W C'` (1 when `p = 0`).
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn warnings(&self) -> &[ProjectionWarning] {
        &self.warnings
    }

    pub fn n_series(&self) -> usize {
        self.constraint.m
    }

    pub fn n_components(&self) -> usize {
        self.constraint.p
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        let n = self.constraint.m + self.constraint.p;
        if len != n {
            return Err(FlapError::Dimension(format!(
                "forecast vector has {len} entries, operator expects {n}"
            )));
        }
        Ok(())
    }

    /// Projects one augmented base forecast.
    pub fn project(&self, zhat: &DVector<f64>) -> Result<Projected> {
        self.check_dim(zhat.len())?;
        Ok(Projected {
            ztilde: &self.mmat * zhat,
            ytilde: self.project_y(zhat)?,
        })
    }

    /// `y~ = G z^` without forming `z~`.
    pub fn project_y(&self, zhat: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(zhat.len())?;
        if self.constraint.p == 0 {
            return Ok(zhat.clone());
        }
        Ok(&self.gmat * zhat)
    }

    /// Applies `G` to every row of an `H x (m+p)` forecast matrix.
    pub fn project_rows(&self, zhat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(zhat.ncols())?;
        if self.constraint.p == 0 {
            return Ok(zhat.clone());
        }
        Ok(zhat * self.gmat.transpose())
    }

    /// Writes `M`, `G` and `C` as headerless CSV files.
    pub fn write_bundle<W: Write>(&self, m_out: W, g_out: W, c_out: W) -> Result<()> {
        write_matrix_csv(&self.mmat, m_out)?;
        write_matrix_csv(&self.gmat, g_out)?;
        write_matrix_csv(&self.constraint.c, c_out)?;
        Ok(())
    }
}

fn check_covariance_dim(c: &ConstraintMatrix, w: &CovarianceEstimate) -> Result<()> {
    let n = c.m + c.p;
    if w.dim() != n {
        return Err(FlapError::Dimension(format!(
            "covariance is {0}x{0}, constraint needs {n}x{n}",
            w.dim()
        )));
    }
    Ok(())
}

/// Symmetrizes, applies the ridge, and checks positive definiteness.
fn prepared_w(
    w: &CovarianceEstimate,
    opts: ProjectionOptions,
    warnings: &mut Vec<ProjectionWarning>,
) -> Result<DMatrix<f64>> {
    let raw = w.matrix();
    let norm = frobenius(raw);
    let asym = asymmetry(raw);
    if asym > ASYMMETRY_TOLERANCE * norm.max(f64::MIN_POSITIVE) {
        log::warn!("covariance asymmetry {asym:e} exceeds tolerance; symmetrizing");
        warnings.push(ProjectionWarning::Symmetrized { max_asymmetry: asym });
    }
    let mut sym = (raw + raw.transpose()) * 0.5;
    if opts.ridge > 0.0 {
        for i in 0..sym.nrows() {
            sym[(i, i)] += opts.ridge;
        }
    }
    Ok(sym)
}

pub fn build_projection(c: &ConstraintMatrix, w: &CovarianceEstimate) -> Result<ProjectionOperator> {
    build_projection_with(c, w, ProjectionOptions::default())
}

pub fn build_projection_with(
    c: &ConstraintMatrix,
    w: &CovarianceEstimate,
    opts: ProjectionOptions,
) -> Result<ProjectionOperator> {
    check_covariance_dim(c, w)?;
    let (m, p) = (c.m, c.p);
    let n = m + p;
    let mut warnings = Vec::new();
    let wm = prepared_w(w, opts, &mut warnings)?;
    let w_chol = cholesky(&wm)
        .ok_or_else(|| FlapError::CovarianceNotPd("Cholesky factorization of W failed".into()))?;
    let smat = c.summing();

    if p == 0 {
        return Ok(ProjectionOperator {
            mmat: DMatrix::identity(n, n),
            gmat: DMatrix::identity(m, m),
            smat,
            constraint: c.clone(),
            w: w.clone(),
            condition: 1.0,
            warnings,
        });
    }

    // A = C W (p x n), K = C W C' (p x p).
    let a = &c.c * &wm;
    let k = &a * c.c.transpose();
    let k = (&k + k.transpose()) * 0.5;
    let condition = spd_condition(&k);
    if condition > ILL_CONDITION_THRESHOLD {
        log::warn!("C W C' is ill-conditioned (condition {condition:e})");
        warnings.push(ProjectionWarning::IllConditioned { condition });
    }
    let k_chol = cholesky(&k)
        .ok_or_else(|| FlapError::CovarianceNotPd("Cholesky factorization of C W C' failed".into()))?;
    // M = I - W C' K^{-1} C = I - A' K^{-1} C.
    let x = k_chol.solve(&c.c);
    let mmat = DMatrix::identity(n, n) - a.transpose() * x;

    // G = (S' W^{-1} S)^{-1} S' W^{-1}.
    let winv_s = w_chol.solve(&smat);
    let b = smat.transpose() * &winv_s;
    let b = (&b + b.transpose()) * 0.5;
    let b_chol = cholesky(&b)
        .ok_or_else(|| FlapError::CovarianceNotPd("Cholesky factorization of S' W^-1 S failed".into()))?;
    let gmat = b_chol.solve(&winv_s.transpose());

    Ok(ProjectionOperator {
        mmat,
        gmat,
        smat,
        constraint: c.clone(),
        w: w.clone(),
        condition,
        warnings,
    })
}

/// Projects `zhat` with `op`.
pub fn project(op: &ProjectionOperator, zhat: &DVector<f64>) -> Result<Projected> {
    op.project(zhat)
}

/// Error variance reduction of the original series achieved by projection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReductionReport {
    /// Diagonal of `J W C' (C W C')^{-1} C W J'`.
    pub per_series_reduction: Vec<f64>,
    pub total_reduction: f64,
    /// `J W C' (C W C')^{-1} C W J'`.
    #[serde(skip)]
    pub reduction_matrix: DMatrix<f64>,
    /// `J M W J'`.
    #[serde(skip)]
    pub projected_variance: DMatrix<f64>,
    /// Whether each component, added in order, strictly reduces the
    /// error variance.
    pub positivity_flags: Vec<bool>,
    pub condition: f64,
}

impl VarianceReductionReport {
    /// JSON diagnostics `{total_reduction, per_series_reduction, condition, ...}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

pub fn variance_reduction(c: &ConstraintMatrix, w: &CovarianceEstimate) -> Result<VarianceReductionReport> {
    variance_reduction_with(c, w, ProjectionOptions::default())
}

pub fn variance_reduction_with(
    c: &ConstraintMatrix,
    w: &CovarianceEstimate,
    opts: ProjectionOptions,
) -> Result<VarianceReductionReport> {
    let op = build_projection_with(c, w, opts)?;
    let m = c.m;
    let mut scratch = Vec::new();
    let wm = prepared_w(w, opts, &mut scratch)?;
    let reduction_matrix = if c.p == 0 {
        DMatrix::zeros(m, m)
    } else {
        // (C W J')' K^{-1} (C W J')
        let a_y = (&c.c * &wm).columns(0, m).into_owned();
        let k = &c.c * &wm * c.c.transpose();
        let k = (&k + k.transpose()) * 0.5;
        let k_chol = cholesky(&k)
            .ok_or_else(|| FlapError::CovarianceNotPd("Cholesky factorization of C W C' failed".into()))?;
        let r = a_y.transpose() * k_chol.solve(&a_y);
        (&r + r.transpose()) * 0.5
    };
    let projected_variance = (op.mmat.rows(0, m) * &wm).columns(0, m).into_owned();
    let per_series_reduction: Vec<f64> = reduction_matrix.diagonal().iter().copied().collect();
    let total_reduction = per_series_reduction.iter().sum();
    let positivity_flags = (0..c.p)
        .map(|i| positivity_condition(c, w, i).map(|check| check.positive))
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceReductionReport {
        per_series_reduction,
        total_reduction,
        reduction_matrix,
        projected_variance,
        positivity_flags,
        condition: op.condition,
    })
}

/// Outcome of the strict-reduction check for one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivityCheck {
    pub positive: bool,
    /// Euclidean norm of the covariance discrepancy vector.
    pub discrepancy_norm: f64,
    pub tolerance: f64,
}

/// Whether component `component` (0-based), added after the components
/// before it, strictly reduces the error variance of the original series.
///
/// With `psi_i = [-phi_i, 0, ..., 0, 1]` over the first `m + i + 1` entries
/// and `M+` the projection using only the earlier constraints, the
/// discrepancy is `psi_i M+ W J'`; for the first component this is
/// `w_{c_1 y} - phi_1 W_y`. The reduction is positive iff it is nonzero.
pub fn positivity_condition(
    c: &ConstraintMatrix,
    w: &CovarianceEstimate,
    component: usize,
) -> Result<PositivityCheck> {
    check_covariance_dim(c, w)?;
    if component >= c.p {
        return Err(FlapError::Dimension(format!(
            "component index {component} out of range for {} components",
            c.p
        )));
    }
    let m = c.m;
    let dim = m + component + 1;
    let full = (w.matrix() + w.matrix().transpose()) * 0.5;
    let tolerance = POSITIVITY_TOLERANCE * frobenius(&full);
    let wi = full.view((0, 0), (dim, dim)).into_owned();
    let phi = c.phi();

    let mut psi = DVector::zeros(dim);
    for j in 0..m {
        psi[j] = -phi[(component, j)];
    }
    psi[dim - 1] = 1.0;

    // M+ W restricted to the first m columns.
    let w_cols = wi.columns(0, m).into_owned();
    let mw = if component == 0 {
        w_cols
    } else {
        let mut prev = DMatrix::zeros(component, dim);
        for r in 0..component {
            for j in 0..m {
                prev[(r, j)] = -phi[(r, j)];
            }
            prev[(r, m + r)] = 1.0;
        }
        let a = &prev * &wi;
        let k = &a * prev.transpose();
        let k = (&k + k.transpose()) * 0.5;
        let k_chol = cholesky(&k).ok_or_else(|| {
            FlapError::CovarianceNotPd("constraint covariance of earlier components is singular".into())
        })?;
        &w_cols - a.transpose() * k_chol.solve(&a.columns(0, m).into_owned())
    };
    let discrepancy = psi.transpose() * mw;
    let discrepancy_norm = discrepancy.norm();
    Ok(PositivityCheck {
        positive: discrepancy_norm > tolerance,
        discrepancy_norm,
        tolerance,
    })
}

/// Per-series reductions along a nested component sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// Number of components at each step.
    pub components: Vec<usize>,
    /// Per-series reduction vector at each step.
    pub reductions: Vec<DVector<f64>>,
    /// `reductions[k + 1] - reductions[k]`.
    pub deltas: Vec<DVector<f64>>,
    /// `(step, series, delta)` for every delta below the tolerance.
    pub violations: Vec<(usize, usize, f64)>,
}

impl MonotonicityReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that reductions never decrease as components are appended.
///
/// Each step must extend the previous one: earlier weight rows unchanged and
/// the previous covariance equal to the leading block of the next (within
/// `1e-10`).
pub fn monotonicity_check(steps: &[(ConstraintMatrix, CovarianceEstimate)]) -> Result<MonotonicityReport> {
    const NESTING_TOLERANCE: f64 = 1e-10;
    let mut reductions = Vec::with_capacity(steps.len());
    let mut components = Vec::with_capacity(steps.len());
    for (idx, (c, w)) in steps.iter().enumerate() {
        if idx > 0 {
            let (pc, pw) = &steps[idx - 1];
            if pc.m != c.m || pc.p > c.p {
                return Err(FlapError::Nesting(format!(
                    "step {idx} has m = {}, p = {} after m = {}, p = {}",
                    c.m, c.p, pc.m, pc.p
                )));
            }
            let phi_prev = pc.phi();
            let phi_head = c.phi().rows(0, pc.p).into_owned();
            if (phi_prev - phi_head).amax() > NESTING_TOLERANCE {
                return Err(FlapError::Nesting(format!(
                    "step {idx} changes existing component weights"
                )));
            }
            if w.dim() < pw.dim() {
                return Err(FlapError::Nesting(format!("step {idx} shrinks the covariance")));
            }
            let lead = w.matrix().view((0, 0), (pw.dim(), pw.dim()));
            if (pw.matrix() - lead).amax() > NESTING_TOLERANCE {
                return Err(FlapError::Nesting(format!(
                    "covariance at step {} is not the leading block of step {idx}",
                    idx - 1
                )));
            }
        }
        let report = variance_reduction(c, w)?;
        reductions.push(DVector::from_vec(report.per_series_reduction));
        components.push(c.p);
    }
    let deltas: Vec<DVector<f64>> = reductions.windows(2).map(|r| &r[1] - &r[0]).collect();
    let violations = deltas
        .iter()
        .enumerate()
        .flat_map(|(step, d)| {
            d.iter()
                .enumerate()
                .filter(|(_, v)| **v < -MONOTONICITY_TOLERANCE)
                .map(move |(series, v)| (step, series, *v))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(MonotonicityReport {
        components,
        reductions,
        deltas,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| Distribution::<f64>::sample(&StandardNormal, rng));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn random_phi(p: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(p, m, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn constraint_assembly() {
        let c = constraint_from_phi(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(c.matrix(), &DMatrix::from_row_slice(1, 3, &[-1.0, -1.0, 1.0]));
        let toy = constraint_from_phi(&DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, -0.5]));
        assert_eq!(
            toy.matrix(),
            &DMatrix::from_row_slice(2, 4, &[-0.5, -0.5, 1.0, 0.0, -0.5, 0.5, 0.0, 1.0])
        );
    }

    #[test]
    fn coherent_vectors_satisfy_constraint_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = random_phi(3, 4, &mut rng);
        let c = constraint_from_phi(&phi);
        let y = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
        let z = c.summing() * &y;
        let cz = c.matrix() * z;
        assert!(cz.amax() < 1e-14);
    }

    #[test]
    fn identity_w_orthonormal_phi_matches_closed_form() {
        // W = I, Phi Phi' = I: M = I - 0.5 [Phi'Phi, -Phi'; -Phi, I].
        let phi = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.8]);
        let c = constraint_from_phi(&phi);
        let op = build_projection(&c, &CovarianceEstimate::identity(5, 1)).unwrap();
        let mut red = DMatrix::zeros(5, 5);
        red.view_mut((0, 0), (3, 3)).copy_from(&(phi.transpose() * &phi));
        red.view_mut((0, 3), (3, 2)).copy_from(&(-phi.transpose()));
        red.view_mut((3, 0), (2, 3)).copy_from(&(-&phi));
        red.view_mut((3, 3), (2, 2)).fill_with_identity();
        let expected = DMatrix::identity(5, 5) - red * 0.5;
        assert!((op.mmat() - expected).amax() < 1e-12);
        let report = variance_reduction(&c, &CovarianceEstimate::identity(5, 1)).unwrap();
        assert!((report.total_reduction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_example_two_paths_agree() {
        // y^ = (1, 1), c^ = (1.2, 0.3), W = I, c1 = (y1+y2)/2, c2 = (y1-y2)/2.
        // CC' = 1.5 I and C z^ = (0.2, 0.3), so
        // y~ = y^ + Phi' (2/15, 3/15) = (7/6, 29/30).
        let phi = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, -0.5]);
        let c = constraint_from_phi(&phi);
        let op = build_projection(&c, &CovarianceEstimate::identity(4, 1)).unwrap();
        let zhat = DVector::from_vec(vec![1.0, 1.0, 1.2, 0.3]);
        let out = op.project(&zhat).unwrap();
        let m_path = out.ztilde.rows(0, 2).into_owned();
        assert!((&m_path - &out.ytilde).amax() < 1e-12);
        assert!((out.ytilde[0] - 7.0 / 6.0).abs() < 1e-12);
        assert!((out.ytilde[1] - 29.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn coherent_forecast_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = random_phi(3, 4, &mut rng);
        let c = constraint_from_phi(&phi);
        let w = CovarianceEstimate::known(random_spd(7, &mut rng), 1).unwrap();
        let op = build_projection(&c, &w).unwrap();
        let y = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
        let z = c.summing() * &y;
        let out = op.project(&z).unwrap();
        assert!((&out.ztilde - &z).amax() < 1e-10);
        assert!((&out.ytilde - &y).amax() < 1e-10);
    }

    #[test]
    fn m_rows_match_s_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = random_phi(3, 4, &mut rng);
        let c = constraint_from_phi(&phi);
        let w = CovarianceEstimate::known(random_spd(7, &mut rng), 1).unwrap();
        let op = build_projection(&c, &w).unwrap();
        let sg = op.smat() * op.gmat();
        assert!((op.mmat() - sg).amax() < 1e-8);
        let gs = op.gmat() * op.smat();
        assert!((gs - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn zero_components_is_identity() {
        let c = constraint_from_phi(&DMatrix::zeros(0, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = CovarianceEstimate::known(random_spd(3, &mut rng), 1).unwrap();
        let op = build_projection(&c, &w).unwrap();
        let z = DVector::from_vec(vec![0.1, -2.0, 3.5]);
        let out = op.project(&z).unwrap();
        assert_eq!(out.ytilde, z);
        assert_eq!(out.ztilde, z);
        let report = variance_reduction(&c, &w).unwrap();
        assert_eq!(report.total_reduction, 0.0);
        assert!(report.positivity_flags.is_empty());
    }

    #[test]
    fn errors() {
        let c = constraint_from_phi(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        let not_pd = CovarianceEstimate::known(DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]), 1).unwrap();
        assert!(matches!(build_projection(&c, &not_pd), Err(FlapError::CovarianceNotPd(_))));
        let wrong = CovarianceEstimate::identity(4, 1);
        assert!(matches!(build_projection(&c, &wrong), Err(FlapError::Dimension(_))));
        let op = build_projection(&c, &CovarianceEstimate::identity(3, 1)).unwrap();
        assert!(matches!(op.project(&DVector::zeros(2)), Err(FlapError::Dimension(_))));
        assert!(matches!(
            positivity_condition(&c, &CovarianceEstimate::identity(3, 1), 1),
            Err(FlapError::Dimension(_))
        ));
    }

    #[test]
    fn asymmetric_w_is_symmetrized_with_warning() {
        let c = constraint_from_phi(&DMatrix::from_row_slice(1, 2, &[0.6, 0.8]));
        let mut w = DMatrix::identity(3, 3) * 2.0;
        w[(0, 1)] = 0.1;
        w[(1, 0)] = 0.1 + 1e-4;
        let op = build_projection(&c, &CovarianceEstimate::known(w, 1).unwrap()).unwrap();
        assert!(matches!(op.warnings()[0], ProjectionWarning::Symmetrized { .. }));
    }

    #[test]
    fn ill_conditioning_warns_but_proceeds() {
        let c = constraint_from_phi(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1e-9]));
        let w = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut w = w;
        // Components as near-duplicates with almost identical errors.
        w[(2, 3)] = 1.0 - 1e-13;
        w[(3, 2)] = 1.0 - 1e-13;
        w[(2, 2)] = 1.0;
        w[(3, 3)] = 1.0;
        let est = CovarianceEstimate::known(w, 1).unwrap();
        match build_projection_with(&c, &est, ProjectionOptions { ridge: 0.0 }) {
            Ok(op) => assert!(op
                .warnings()
                .iter()
                .any(|w| matches!(w, ProjectionWarning::IllConditioned { .. }))),
            Err(FlapError::CovarianceNotPd(_)) => {}
            Err(e) => panic!("unexpected {e}"),
        }
        let ridge = build_projection_with(&c, &est, ProjectionOptions { ridge: 1e-3 }).unwrap();
        assert!(ridge.condition() < ILL_CONDITION_THRESHOLD);
    }

    #[test]
    fn positivity_identity_w() {
        let phi = DMatrix::from_row_slice(1, 3, &[0.6, 0.0, 0.8]);
        let c = constraint_from_phi(&phi);
        let check = positivity_condition(&c, &CovarianceEstimate::identity(4, 1), 0).unwrap();
        assert!(check.positive);
        assert!((check.discrepancy_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positivity_fails_for_linear_image_errors() {
        // Component error = phi_1 * original errors exactly: W = A Sigma A'.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 3;
        let phi = random_phi(1, m, &mut rng);
        let sigma = random_spd(m, &mut rng);
        let mut a = DMatrix::zeros(m + 1, m);
        a.view_mut((0, 0), (m, m)).fill_with_identity();
        a.row_mut(m).copy_from(&phi.row(0));
        let w = CovarianceEstimate::known(&a * sigma * a.transpose(), 1).unwrap();
        let check = positivity_condition(&constraint_from_phi(&phi), &w, 0).unwrap();
        assert!(!check.positive, "{check:?}");
    }

    #[test]
    fn nesting_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = random_phi(2, 3, &mut rng);
        let w = CovarianceEstimate::known(random_spd(5, &mut rng), 1).unwrap();
        let c2 = constraint_from_phi(&phi);
        let c1 = c2.truncate(1).unwrap();
        let ok = monotonicity_check(&[(c1.clone(), w.leading(4)), (c2.clone(), w.clone())]).unwrap();
        assert!(ok.is_monotone());
        let other = CovarianceEstimate::known(random_spd(4, &mut rng), 1).unwrap();
        assert!(matches!(
            monotonicity_check(&[(c1, other), (c2.clone(), w.clone())]),
            Err(FlapError::Nesting(_))
        ));
        let changed = constraint_from_phi(&random_phi(1, 3, &mut rng));
        assert!(matches!(
            monotonicity_check(&[(changed, w.leading(4)), (c2, w)]),
            Err(FlapError::Nesting(_))
        ));
    }
}
