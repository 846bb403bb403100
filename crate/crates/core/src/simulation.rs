//! VAR data generating processes, simulation and population moments.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::forecasting::{companion_radius, fit_var};
use crate::ingestion::Panel;
use crate::linalg::cholesky;

/// Default number of discarded initial draws.
pub const DEFAULT_BURN_IN: usize = 200;
/// Spectral radius that unstable fits are shrunk to.
pub const STABLE_RADIUS: f64 = 0.98;

/// `y_t = c + sum_j A_j y_{t-j} + u_t`, `u_t ~ N(0, innovation_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarProcess {
    pub coefficients: Vec<DMatrix<f64>>,
    pub intercept: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ProcessFile {
    m: usize,
    order: usize,
    /// `coefficients[j][r][c]` is row `r`, column `c` of `A_{j+1}`.
    coefficients: Vec<Vec<Vec<f64>>>,
    intercept: Vec<f64>,
    innovation_cov: Vec<Vec<f64>>,
    seed: u64,
}

fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], m: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(FlapError::Dimension(format!("{what} must be {m} x {m}")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl VarProcess {
    /// Validates shapes and that the innovation covariance is SPD.
    pub fn new(
        coefficients: Vec<DMatrix<f64>>,
        intercept: DVector<f64>,
        innovation_cov: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        let m = intercept.len();
        if m == 0 {
            return Err(FlapError::Dimension("process needs at least one series".into()));
        }
        if coefficients.iter().any(|a| a.shape() != (m, m)) || innovation_cov.shape() != (m, m) {
            return Err(FlapError::Dimension(format!("all process matrices must be {m} x {m}")));
        }
        if cholesky(&innovation_cov).is_none() {
            return Err(FlapError::CovarianceNotPd("innovation covariance is not SPD".into()));
        }
        Ok(Self {
            coefficients,
            intercept,
            innovation_cov,
            seed,
        })
    }

    pub fn n_series(&self) -> usize {
        self.intercept.len()
    }

    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    /// Companion matrix of the lag polynomial (`mP x mP`).
    pub fn companion(&self) -> DMatrix<f64> {
        let (m, p) = (self.n_series(), self.order());
        let mut f = DMatrix::zeros(m * p, m * p);
        for (j, a) in self.coefficients.iter().enumerate() {
            f.view_mut((0, j * m), (m, m)).copy_from(a);
        }
        if p > 1 {
            f.view_mut((m, 0), (m * (p - 1), m * (p - 1))).fill_with_identity();
        }
        f
    }

    pub fn spectral_radius(&self) -> f64 {
        companion_radius(&self.coefficients)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Scales `A_j` by `c^j`, which multiplies every companion eigenvalue by `c`.
    pub fn rescale_to(&mut self, radius: f64) {
        let current = self.spectral_radius();
        if current <= 0.0 {
            return;
        }
        let c = radius / current;
        let mut factor = 1.0;
        for a in &mut self.coefficients {
            factor *= c;
            *a *= factor;
        }
    }

    /// Unconditional mean `(I - sum A_j)^{-1} c`.
    pub fn mean(&self) -> Result<DVector<f64>> {
        let m = self.n_series();
        let mut poly = DMatrix::identity(m, m);
        for a in &self.coefficients {
            poly -= a;
        }
        poly.lu()
            .solve(&self.intercept)
            .ok_or_else(|| FlapError::Numerical("I - sum A_j is singular".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProcessFile {
            m: self.n_series(),
            order: self.order(),
            coefficients: self.coefficients.iter().map(to_rows).collect(),
            intercept: self.intercept.iter().copied().collect(),
            innovation_cov: to_rows(&self.innovation_cov),
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProcessFile = serde_json::from_str(text)?;
        let m = file.m;
        if file.coefficients.len() != file.order || file.intercept.len() != m {
            return Err(FlapError::Dimension("process file shapes are inconsistent".into()));
        }
        let coefficients = file
            .coefficients
            .iter()
            .map(|a| from_rows(a, m, "coefficient matrix"))
            .collect::<Result<Vec<_>>>()?;
        let cov = from_rows(&file.innovation_cov, m, "innovation covariance")?;
        Self::new(coefficients, DVector::from_vec(file.intercept), cov, file.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Stationary autocovariances `Gamma(k) = Cov(y_t, y_{t-k})` for `k = 0..=max_lag`.
    pub fn autocovariances(&self, max_lag: usize) -> Result<Vec<DMatrix<f64>>> {
        if !self.is_stable() {
            return Err(FlapError::Stability {
                radius: self.spectral_radius(),
            });
        }
        let m = self.n_series();
        if self.order() == 0 {
            let mut out = vec![self.innovation_cov.clone()];
            out.extend((0..max_lag).map(|_| DMatrix::zeros(m, m)));
            return Ok(out);
        }
        let f = self.companion();
        let d = f.nrows();
        let mut q = DMatrix::zeros(d, d);
        q.view_mut((0, 0), (m, m)).copy_from(&self.innovation_cov);
        let sigma = lyapunov(&f, &q)?;
        let mut out = Vec::with_capacity(max_lag + 1);
        let mut fk_sigma = sigma;
        for k in 0..=max_lag {
            if k > 0 {
                fk_sigma = &f * fk_sigma;
            }
            out.push(fk_sigma.view((0, 0), (m, m)).into_owned());
        }
        Ok(out)
    }

    /// MA(infinity) coefficients `Psi_0 = I, ..., Psi_{n-1}`.
    pub fn ma_coefficients(&self, n: usize) -> Vec<DMatrix<f64>> {
        let m = self.n_series();
        let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i == 0 {
                psi.push(DMatrix::identity(m, m));
                continue;
            }
            let mut next = DMatrix::zeros(m, m);
            for (j, a) in self.coefficients.iter().enumerate() {
                if i > j {
                    next += a * &psi[i - j - 1];
                }
            }
            psi.push(next);
        }
        psi
    }

    /// Error covariance of the optimal `h`-step predictor given the full
    /// past: `sum_{j<h} Psi_j Sigma_u Psi_j'`.
    pub fn true_forecast_error_cov(&self, h: usize) -> DMatrix<f64> {
        let m = self.n_series();
        let mut out = DMatrix::zeros(m, m);
        for psi in self.ma_coefficients(h) {
            out += &psi * &self.innovation_cov * psi.transpose();
        }
        out
    }
}

/// Solves `X = F X F' + Q` by the doubling algorithm.
pub fn lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = q.clone();
    let mut a = f.clone();
    for _ in 0..200 {
        let next = &x + &a * &x * a.transpose();
        let delta = (&next - &x).amax();
        x = next;
        a = &a * &a;
        if delta <= 1e-15 * x.amax().max(1.0) {
            return Ok((&x + x.transpose()) * 0.5);
        }
    }
    Err(FlapError::Numerical("Lyapunov doubling did not converge".into()))
}

/// Simulates `t_len` observations after discarding `burn_in` draws. The
/// recursion starts at the unconditional mean.
pub fn simulate(process: &VarProcess, t_len: usize, burn_in: usize) -> Result<Panel> {
    simulate_seeded(process, t_len, burn_in, process.seed)
}

fn simulate_seeded(process: &VarProcess, t_len: usize, burn_in: usize, seed: u64) -> Result<Panel> {
    if t_len == 0 {
        return Err(FlapError::Config("simulation length must be at least 1".into()));
    }
    let radius = process.spectral_radius();
    if radius >= 1.0 {
        return Err(FlapError::Stability { radius });
    }
    let m = process.n_series();
    let p = process.order();
    let chol = cholesky(&process.innovation_cov)
        .ok_or_else(|| FlapError::CovarianceNotPd("innovation covariance is not SPD".into()))?;
    let l = chol.l();
    let mean = process.mean()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burn_in + t_len;
    let mut lags: Vec<DVector<f64>> = vec![mean; p];
    let mut out = DMatrix::zeros(t_len, m);
    for step in 0..total {
        let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = &process.intercept + &l * eps;
        for (j, a) in process.coefficients.iter().enumerate() {
            y += a * &lags[p - 1 - j];
        }
        if step >= burn_in {
            out.set_row(step - burn_in, &y.transpose());
        }
        if p > 0 {
            lags.remove(0);
            lags.push(y);
        }
    }
    Panel::from_matrix(out)
}

/// `n` independent panels seeded `seed_base + r`, simulated in parallel.
pub fn simulate_replicates(
    process: &VarProcess,
    t_len: usize,
    burn_in: usize,
    n: usize,
    seed_base: u64,
) -> Result<Vec<Panel>> {
    (0..n)
        .into_par_iter()
        .map(|r| simulate_seeded(process, t_len, burn_in, seed_base.wrapping_add(r as u64)))
        .collect()
}

/// Fits a VAR(`order`) with intercept and wraps it as a process with
/// identity innovations, shrinking it to radius 0.98 when unstable.
pub fn fit_dgp_from_panel(panel: &Panel, order: usize) -> Result<VarProcess> {
    let fit = fit_var(panel.values(), order, true)?;
    let (c, coefs) = fit.var_coefficients().expect("VAR fit");
    let m = panel.n_series();
    let mut process = VarProcess::new(coefs.to_vec(), c.clone(), DMatrix::identity(m, m), 0)?;
    let radius = process.spectral_radius();
    if radius >= 1.0 {
        log::warn!("fitted DGP has spectral radius {radius:.4}; rescaled to {STABLE_RADIUS}");
        process.rescale_to(STABLE_RADIUS);
    }
    Ok(process)
}

/// A seeded random stable VAR with identity innovations and zero intercept.
///
/// `A_j` has i.i.d. `N(0, (0.6 / j)^2 / m)` entries; the process is rescaled
/// to spectral radius 0.9 when it exceeds it.
pub fn surrogate_dgp(m: usize, order: usize, seed: u64) -> Result<VarProcess> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefficients = (1..=order)
        .map(|j| {
            let sd = 0.6 / j as f64 / (m as f64).sqrt();
            DMatrix::from_fn(m, m, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let mut process = VarProcess::new(coefficients, DVector::zeros(m), DMatrix::identity(m, m), seed)?;
    if process.spectral_radius() > 0.9 {
        process.rescale_to(0.9);
    }
    Ok(process)
}

/// Yule-Walker coefficients of the best linear AR(`q`) predictor for a
/// scalar process with autocovariances `gamma[0..=q]`.
pub fn yule_walker(gamma: &[f64], q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Ok(Vec::new());
    }
    let toeplitz = DMatrix::from_fn(q, q, |i, j| gamma[i.abs_diff(j)]);
    let rhs = DVector::from_fn(q, |i, _| gamma[i + 1]);
    let ch = cholesky(&toeplitz).ok_or_else(|| FlapError::Numerical("Yule-Walker system is singular".into()))?;
    Ok(ch.solve(&rhs).iter().copied().collect())
}

/// Weights `b_{h,1..q}` of the iterated `h`-step AR forecast
/// `yhat_{t+h} = sum_j b_{h,j} y_{t+1-j}`.
pub fn iterated_weights(phi: &[f64], h: usize) -> Vec<f64> {
    let q = phi.len();
    // Each value in the recursion is a linear combination of y_t .. y_{t+1-q}.
    let mut history: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            let mut e = vec![0.0; q];
            e[q - 1 - i] = 1.0;
            e
        })
        .collect();
    for _ in 0..h {
        let len = history.len();
        let mut next = vec![0.0; q];
        for (j, p) in phi.iter().enumerate() {
            for (n, v) in next.iter_mut().zip(&history[len - 1 - j]) {
                *n += p * v;
            }
        }
        history.push(next);
    }
    history.pop().unwrap_or_default()
}

/// Population covariance of the `h`-step errors when every series
/// `z_i = s_i' y` is forecast by its own best linear AR(`q`) predictor.
/// `s` has one row per derived series.
pub fn ar_predictor_error_cov(process: &VarProcess, s: &DMatrix<f64>, q: usize, h: usize) -> Result<DMatrix<f64>> {
    if h == 0 {
        return Err(FlapError::Config("horizon must be at least 1".into()));
    }
    let m = process.n_series();
    if s.ncols() != m {
        return Err(FlapError::Dimension(format!("selection needs {m} columns, has {}", s.ncols())));
    }
    let lags = h + q;
    let gamma = process.autocovariances(lags)?;
    let cov = |d: isize| -> DMatrix<f64> {
        if d >= 0 {
            gamma[d as usize].clone()
        } else {
            gamma[(-d) as usize].transpose()
        }
    };
    let k = s.nrows();
    // filters[i][a] is the scalar weight on z_i at y_{t+h-a}.
    let filters: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let si = s.row(i).transpose();
            let g: Vec<f64> = (0..=q).map(|lag| si.dot(&(&gamma[lag] * &si))).collect();
            let phi = yule_walker(&g, q)?;
            let b = iterated_weights(&phi, h);
            let mut f = vec![0.0; h + q];
            f[0] = 1.0;
            for (j, bj) in b.iter().enumerate() {
                f[h + j] -= bj;
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let width = h + q;
    // Cov(y_{t+h-a}, y_{t+h-b}) = Gamma(b - a).
    let blocks: Vec<DMatrix<f64>> = (0..(2 * width - 1))
        .map(|idx| {
            let d = idx as isize - (width as isize - 1);
            s * cov(d) * s.transpose()
        })
        .collect();
    let mut w = DMatrix::zeros(k, k);
    for a in 0..width {
        for b in 0..width {
            let block = &blocks[b + width - 1 - a];
            for i in 0..k {
                let fa = filters[i][a];
                if fa == 0.0 {
                    continue;
                }
                for j in 0..k {
                    w[(i, j)] += fa * block[(i, j)] * filters[j][b];
                }
            }
        }
    }
    Ok((&w + w.transpose()) * 0.5)
}
