//! Estimation of the base-forecast-error covariance `W`.
//!
//! Residual panels hold one-step in-sample forecast errors, columns stacked
//! expert-major (expert 1's `n` series, then expert 2's, ...). From a panel
//! the `m x m` covariance is assembled under one of four estimators:
//! identity, per-column variances (diagonal), per-expert shrunk blocks with
//! zero cross-expert blocks, or a single shrunk full matrix. Shrinkage pulls
//! the sample covariance toward its diagonal with an intensity estimated
//! from the data (Schafer-Strimmer rule on correlations).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Covariance estimator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// `I_m`; no weighting.
    Identity,
    /// Per-column residual variances on the diagonal.
    Diagonal,
    /// Block-diagonal: one shrunk `n x n` block per expert.
    ExpertBlockShrunk,
    /// Single shrunk `m x m` covariance.
    FullShrunk,
}

/// Panel of in-sample one-step residuals, `T_obs` rows by `m = n * p` columns.
#[derive(Debug, Clone)]
pub struct ResidualPanel {
    data: DMatrix<f64>,
    n: usize,
    p: usize,
}

impl ResidualPanel {
    /// Build a panel from a row-major residual matrix with expert-major columns.
    pub fn new(data: DMatrix<f64>, n: usize, p: usize) -> Result<Self> {
        if data.ncols() != n * p {
            return Err(Error::DimensionMismatch {
                what: "residual panel columns",
                expected: n * p,
                actual: data.ncols(),
            });
        }
        if data.nrows() < 2 {
            return Err(Error::TooFewObservations {
                required: 2,
                actual: data.nrows(),
            });
        }
        Ok(Self { data, n, p })
    }

    /// Build from one `T x n` residual matrix per expert, dropping any row
    /// that carries a non-finite value in any expert (listwise deletion).
    pub fn from_expert_matrices(mats: &[DMatrix<f64>]) -> Result<Self> {
        let p = mats.len();
        if p == 0 {
            return Err(Error::InvalidParameter("no expert residuals given".into()));
        }
        let n = mats[0].ncols();
        let t = mats[0].nrows();
        for m in mats {
            if m.ncols() != n || m.nrows() != t {
                return Err(Error::DimensionMismatch {
                    what: "expert residual matrix shape",
                    expected: n,
                    actual: m.ncols(),
                });
            }
        }
        let keep: Vec<usize> = (0..t)
            .filter(|&r| mats.iter().all(|m| m.row(r).iter().all(|v| v.is_finite())))
            .collect();
        let mut data = DMatrix::zeros(keep.len(), n * p);
        for (out_r, &r) in keep.iter().enumerate() {
            for (j, m) in mats.iter().enumerate() {
                for i in 0..n {
                    data[(out_r, j * n + i)] = m[(r, i)];
                }
            }
        }
        Self::new(data, n, p)
    }

    /// Rows available after trimming.
    pub fn n_obs(&self) -> usize {
        self.data.nrows()
    }

    /// Series count per expert.
    pub fn n_series(&self) -> usize {
        self.n
    }

    /// Expert count.
    pub fn n_experts(&self) -> usize {
        self.p
    }

    /// Full `T x m` residual matrix.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// The `T x n` sub-panel of one expert's residuals.
    pub fn expert_block(&self, expert: usize) -> DMatrix<f64> {
        self.data
            .columns(expert * self.n, self.n)
            .clone_owned()
    }

    /// Residual column for (expert, series).
    pub fn column(&self, expert: usize, series: usize) -> DVector<f64> {
        self.data.column(expert * self.n + series).clone_owned()
    }

    /// Per-series `T x p` residual matrix across experts.
    pub fn series_across_experts(&self, series: usize) -> DMatrix<f64> {
        let t = self.n_obs();
        DMatrix::from_fn(t, self.p, |r, j| self.data[(r, j * self.n + series)])
    }
}

/// Unbiased sample covariance (divisor `T - 1`) of the columns of `data`.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = data.nrows();
    if t < 2 {
        return Err(Error::TooFewObservations {
            required: 2,
            actual: t,
        });
    }
    let k = data.ncols();
    let means: Vec<f64> = (0..k).map(|j| data.column(j).mean()).collect();
    let mut centered = data.clone();
    for j in 0..k {
        for r in 0..t {
            centered[(r, j)] -= means[j];
        }
    }
    Ok(centered.transpose() * centered / (t as f64 - 1.0))
}

/// Shrinkage intensity by the Schafer-Strimmer rule on correlations:
/// `lambda = sum var_hat(r_ij) / sum r_ij^2` over `i != j`, clipped to [0, 1].
/// Columns with zero variance contribute nothing to either sum; when the
/// off-diagonal correlation mass is zero the intensity is defined as 1.
pub fn shrinkage_intensity(data: &DMatrix<f64>) -> Result<f64> {
    let t = data.nrows();
    if t < 2 {
        return Err(Error::TooFewObservations {
            required: 2,
            actual: t,
        });
    }
    let k = data.ncols();
    let tf = t as f64;

    // Standardize columns by the unbiased standard deviation; zero-variance
    // columns become all-zero and drop out of both sums.
    let mut z = DMatrix::zeros(t, k);
    for j in 0..k {
        let col = data.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tf - 1.0);
        if var > 0.0 {
            let sd = var.sqrt();
            for r in 0..t {
                z[(r, j)] = (data[(r, j)] - mean) / sd;
            }
        }
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            // w_t = z_ti * z_tj; r_ij = T/(T-1) * mean(w); var_hat(r_ij)
            // = T/(T-1)^3 * sum (w_t - mean(w))^2.
            let mut w_sum = 0.0;
            for r in 0..t {
                w_sum += z[(r, i)] * z[(r, j)];
            }
            let w_bar = w_sum / tf;
            let r_ij = tf * w_bar / (tf - 1.0);
            let mut ss = 0.0;
            for r in 0..t {
                ss += (z[(r, i)] * z[(r, j)] - w_bar).powi(2);
            }
            let var_r = tf / (tf - 1.0).powi(3) * ss;
            num += var_r;
            den += r_ij * r_ij;
        }
    }
    // Off-diagonal sums are doubled symmetrically; the factor cancels.
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Apply diagonal shrinkage: `lambda * diag(S) + (1 - lambda) * S`.
/// The diagonal of `S` is preserved exactly for any intensity.
pub fn shrink_to_diagonal(s: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    check_symmetric(s)?;
    let k = s.nrows();
    let mut out = s * (1.0 - lambda);
    for i in 0..k {
        out[(i, i)] = s[(i, i)];
    }
    Ok(out)
}

/// Sample covariance of `data` shrunk toward its diagonal, with the
/// estimated intensity returned alongside.
pub fn shrunk_covariance(data: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let s = sample_covariance(data)?;
    let lambda = shrinkage_intensity(data)?;
    Ok((shrink_to_diagonal(&s, lambda)?, lambda))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what: "symmetric matrix",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    let scale = 1.0 + m.amax();
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > 1e-8 * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: worst,
        });
    }
    Ok(())
}

/// Jitter escalation steps for [`ensure_positive_definite`].
const JITTER_STEPS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Make a symmetric matrix positive definite by adding escalating diagonal
/// jitter `delta * mean(diag) * I`. Returns the applied `delta` (0 when the
/// matrix was already p.d.).
pub fn ensure_positive_definite(m: &mut DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    // Symmetrize exactly so downstream factorizations see a clean input.
    let sym = (m.clone() + m.transpose()) * 0.5;
    *m = sym;

    if Cholesky::new(m.clone()).is_some() {
        return Ok(0.0);
    }
    let k = m.nrows();
    let mean_diag = m.diagonal().sum() / k as f64;
    if !mean_diag.is_finite() || mean_diag <= 0.0 {
        return Err(Error::SingularAfterConditioning);
    }
    for &delta in &JITTER_STEPS {
        let mut attempt = m.clone();
        for i in 0..k {
            attempt[(i, i)] += delta * mean_diag;
        }
        if Cholesky::new(attempt.clone()).is_some() {
            *m = attempt;
            return Ok(delta);
        }
    }
    Err(Error::SingularAfterConditioning)
}

/// The assembled error covariance with its estimator tag and diagnostics.
#[derive(Debug, Clone)]
pub struct ErrorCovariance {
    matrix: DMatrix<f64>,
    kind: CovarianceKind,
    n: usize,
    p: usize,
    shrink_lambda: Vec<f64>,
    jitter: f64,
}

impl ErrorCovariance {
    /// Estimate `W` from a residual panel under the chosen kind.
    /// The result is conditioned to be positive definite.
    pub fn estimate(panel: &ResidualPanel, kind: CovarianceKind) -> Result<Self> {
        let n = panel.n_series();
        let p = panel.n_experts();
        let m = n * p;
        let (mut matrix, shrink_lambda) = match kind {
            CovarianceKind::Identity => (DMatrix::identity(m, m), Vec::new()),
            CovarianceKind::Diagonal => {
                let s = sample_covariance(panel.data())?;
                (DMatrix::from_diagonal(&s.diagonal()), Vec::new())
            }
            CovarianceKind::ExpertBlockShrunk => {
                let mut w = DMatrix::zeros(m, m);
                let mut lambdas = Vec::with_capacity(p);
                for j in 0..p {
                    let block_data = panel.expert_block(j);
                    let (block, lambda) = shrunk_covariance(&block_data)?;
                    lambdas.push(lambda);
                    w.view_mut((j * n, j * n), (n, n)).copy_from(&block);
                }
                (w, lambdas)
            }
            CovarianceKind::FullShrunk => {
                let (w, lambda) = shrunk_covariance(panel.data())?;
                (w, vec![lambda])
            }
        };
        let jitter = ensure_positive_definite(&mut matrix)?;
        Ok(Self {
            matrix,
            kind,
            n,
            p,
            shrink_lambda,
            jitter,
        })
    }

    /// Wrap an explicit p.d. matrix (e.g. a known simulation covariance).
    pub fn from_dense(matrix: DMatrix<f64>, n: usize, p: usize) -> Result<Self> {
        if matrix.nrows() != n * p {
            return Err(Error::DimensionMismatch {
                what: "covariance order",
                expected: n * p,
                actual: matrix.nrows(),
            });
        }
        let mut matrix = matrix;
        let jitter = ensure_positive_definite(&mut matrix)?;
        Ok(Self {
            matrix,
            kind: CovarianceKind::FullShrunk,
            n,
            p,
            shrink_lambda: Vec::new(),
            jitter,
        })
    }

    /// Identity covariance of order `n * p`.
    pub fn identity(n: usize, p: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n * p, n * p),
            kind: CovarianceKind::Identity,
            n,
            p,
            shrink_lambda: Vec::new(),
            jitter: 0.0,
        }
    }

    /// The dense `m x m` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Estimator used.
    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    /// Series count per expert.
    pub fn n_series(&self) -> usize {
        self.n
    }

    /// Expert count.
    pub fn n_experts(&self) -> usize {
        self.p
    }

    /// Order of the matrix, `n * p`.
    pub fn order(&self) -> usize {
        self.n * self.p
    }

    /// Shrinkage intensities (one per expert block, or one global).
    pub fn shrink_lambda(&self) -> &[f64] {
        &self.shrink_lambda
    }

    /// Diagonal jitter applied during conditioning.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Whether cross-expert blocks are structurally zero.
    pub fn is_block_diagonal(&self) -> bool {
        matches!(
            self.kind,
            CovarianceKind::Identity | CovarianceKind::Diagonal | CovarianceKind::ExpertBlockShrunk
        )
    }

    /// One expert's diagonal block.
    pub fn expert_block(&self, expert: usize) -> DMatrix<f64> {
        self.matrix
            .view((expert * self.n, expert * self.n), (self.n, self.n))
            .clone_owned()
    }
}
