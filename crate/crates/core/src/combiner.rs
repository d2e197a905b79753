//! Coherent combination of multi-expert base forecasts.
//!
//! The centerpiece is the optimal coherent combination: given `p` experts'
//! stacked base forecasts `y_hat` with error covariance `W` and the linear
//! constraints `C y = 0`, it returns the constrained generalized-least-squares
//! combination. With `K` the design that repeats the identity once per expert,
//! the closed form is
//!
//! ```text
//! W_c = (K' W^-1 K)^-1
//! y~  = M W_c K' W^-1 y_hat,   M = I - W_c C' (C W_c C')^-1 C
//! ```
//!
//! All inverses are applied through factorizations (Cholesky, LU followed by
//! solves); `K` is applied implicitly as expert-block summation whenever `W`
//! is block diagonal. A dense KKT solver over the same objective serves as an
//! independent oracle for testing. Single-expert reconciliation, single-task
//! combination weights and the sequential pipelines round out the module.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::covariance::{ensure_positive_definite, ErrorCovariance, ResidualPanel};
use crate::error::{Error, Result};
use crate::hierarchy::ConstraintMatrix;

/// Coherence threshold below which a forecast is flagged coherent.
pub const COHERENCE_TOL: f64 = 1e-8;

/// Stacked base forecasts of `p` experts over `n` series, expert-major:
/// entry `(expert j, series i)` sits at position `j * n + i`.
#[derive(Debug, Clone)]
pub struct ForecastBundle {
    values: DVector<f64>,
    n: usize,
    p: usize,
}

impl ForecastBundle {
    /// Stack per-expert forecast vectors (all of length `n`).
    pub fn from_experts(experts: &[DVector<f64>]) -> Result<Self> {
        let p = experts.len();
        if p == 0 {
            return Err(Error::InvalidParameter("empty forecast bundle".into()));
        }
        let n = experts[0].len();
        for e in experts {
            if e.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "expert forecast length",
                    expected: n,
                    actual: e.len(),
                });
            }
        }
        let mut values = DVector::zeros(n * p);
        for (j, e) in experts.iter().enumerate() {
            values.rows_mut(j * n, n).copy_from(e);
        }
        Ok(Self { values, n, p })
    }

    /// Wrap an already stacked vector of length `n * p`.
    pub fn from_stacked(values: DVector<f64>, n: usize, p: usize) -> Result<Self> {
        if values.len() != n * p {
            return Err(Error::DimensionMismatch {
                what: "stacked bundle length",
                expected: n * p,
                actual: values.len(),
            });
        }
        Ok(Self { values, n, p })
    }

    /// Series count per expert.
    pub fn n_series(&self) -> usize {
        self.n
    }

    /// Expert count.
    pub fn n_experts(&self) -> usize {
        self.p
    }

    /// Total stacked length `m = n * p`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Whether the bundle is empty (never true for a constructed bundle).
    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    /// The stacked vector.
    pub fn stacked(&self) -> &DVector<f64> {
        &self.values
    }

    /// One expert's forecast vector.
    pub fn expert(&self, j: usize) -> DVector<f64> {
        self.values.rows(j * self.n, self.n).clone_owned()
    }

    /// Forecast of series `i` by expert `j`.
    pub fn value(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.n + i]
    }
}

/// Tag identifying how a coherent forecast was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Optimal coherent combination, diagonal `W`.
    OccWlsv,
    /// Optimal coherent combination, expert-block shrunk `W`.
    OccBe,
    /// Optimal coherent combination with a caller-supplied `W`.
    Occ,
    /// Single-expert least-squares reconciliation.
    MintShr,
    /// Reconcile each expert, then average.
    Src,
    /// Equal-weights combination, then reconcile.
    ScrEw,
    /// Inverse-variance combination, then reconcile.
    ScrVar,
    /// Full-covariance combination, then reconcile.
    ScrCov,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::OccWlsv => "occ_wlsv",
            Method::OccBe => "occ_be",
            Method::Occ => "occ",
            Method::MintShr => "mint_shr",
            Method::Src => "src",
            Method::ScrEw => "scr_ew",
            Method::ScrVar => "scr_var",
            Method::ScrCov => "scr_cov",
        };
        f.write_str(s)
    }
}

/// A combined/reconciled forecast with its coherence diagnostics.
#[derive(Debug, Clone)]
pub struct CoherentForecast {
    /// The n-vector of coherent forecasts.
    pub values: DVector<f64>,
    /// Producing method.
    pub method: Method,
    /// Scale-free coherence residual of `values`.
    pub residual: f64,
    /// `residual <= COHERENCE_TOL`.
    pub coherent: bool,
}

impl CoherentForecast {
    fn new(values: DVector<f64>, method: Method, c: &ConstraintMatrix) -> Result<Self> {
        let residual = c.coherence_residual(&values)?;
        Ok(Self {
            values,
            method,
            residual,
            coherent: residual <= COHERENCE_TOL,
        })
    }
}

/// Materialize `K = 1_p (x) I_n`, the design stacking `p` identities.
fn design_matrix(n: usize, p: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n * p, n);
    for j in 0..p {
        for i in 0..n {
            k[(j * n + i, i)] = 1.0;
        }
    }
    k
}

/// Per-expert inverse blocks of a block-diagonal `W`, via Cholesky solves.
fn expert_block_inverses(w: &ErrorCovariance) -> Result<Vec<DMatrix<f64>>> {
    let n = w.n_series();
    let eye = DMatrix::identity(n, n);
    (0..w.n_experts())
        .map(|j| {
            let block = w.expert_block(j);
            let chol = Cholesky::new(block).ok_or(Error::SingularW)?;
            Ok(chol.solve(&eye))
        })
        .collect()
}

/// The `n x m` linear map sending stacked base forecasts to the optimal
/// coherent combination. Reusable across forecast vectors sharing `W` and `C`.
pub fn occ_map(w: &ErrorCovariance, c: &ConstraintMatrix) -> Result<DMatrix<f64>> {
    let n = w.n_series();
    let p = w.n_experts();
    let m = n * p;
    if c.n_series() != n {
        return Err(Error::DimensionMismatch {
            what: "constraint columns",
            expected: n,
            actual: c.n_series(),
        });
    }

    // G = K' W^-1 K and B_pre = K' W^-1, exploiting block structure when
    // cross-expert blocks are zero.
    let (g, b_pre) = if w.is_block_diagonal() {
        let inverses = expert_block_inverses(w)?;
        let mut g = DMatrix::zeros(n, n);
        let mut b_pre = DMatrix::zeros(n, m);
        for (j, inv) in inverses.iter().enumerate() {
            g += inv;
            b_pre.view_mut((0, j * n), (n, n)).copy_from(inv);
        }
        (g, b_pre)
    } else {
        let chol_w = Cholesky::new(w.matrix().clone()).ok_or(Error::SingularW)?;
        let k = design_matrix(n, p);
        let winv_k = chol_w.solve(&k);
        let g = k.transpose() * &winv_k;
        (g, winv_k.transpose())
    };

    // B = W_c K' W^-1 via a Cholesky solve against G.
    let g_sym = (g.clone() + g.transpose()) * 0.5;
    let chol_g = Cholesky::new(g_sym).ok_or(Error::SingularW)?;
    let b = chol_g.solve(&b_pre);

    if c.n_upper() == 0 {
        return Ok(b);
    }

    // Constrained step: subtract W_c C' (C W_c C')^-1 C B.
    let x_c = chol_g.solve(&c.matrix().transpose());
    let a = c.matrix() * &x_c;
    let a_sym = (a.clone() + a.transpose()) * 0.5;
    let chol_a = Cholesky::new(a_sym).ok_or(Error::RankDeficientConstraints)?;
    let u = chol_a.solve(&(c.matrix() * &b));
    Ok(b - x_c * u)
}

/// Optimal coherent combination of a forecast bundle.
pub fn occ_combine(
    bundle: &ForecastBundle,
    w: &ErrorCovariance,
    c: &ConstraintMatrix,
) -> Result<CoherentForecast> {
    if w.order() != bundle.len() || w.n_series() != bundle.n_series() {
        return Err(Error::DimensionMismatch {
            what: "covariance order",
            expected: bundle.len(),
            actual: w.order(),
        });
    }
    let map = occ_map(w, c)?;
    let values = &map * bundle.stacked();
    let method = match w.kind() {
        crate::covariance::CovarianceKind::Diagonal => Method::OccWlsv,
        crate::covariance::CovarianceKind::ExpertBlockShrunk => Method::OccBe,
        _ => Method::Occ,
    };
    CoherentForecast::new(values, method, c)
}

/// Independent oracle: solve the constrained weighted-least-squares problem
/// directly through its dense `(n + n_u)` KKT system with LU factorization.
/// Shares no solve path with [`occ_combine`].
pub fn qp_oracle_combine(
    bundle: &ForecastBundle,
    w: &ErrorCovariance,
    c: &ConstraintMatrix,
) -> Result<DVector<f64>> {
    let n = bundle.n_series();
    let p = bundle.n_experts();
    let n_u = c.n_upper();
    if w.order() != bundle.len() {
        return Err(Error::DimensionMismatch {
            what: "covariance order",
            expected: bundle.len(),
            actual: w.order(),
        });
    }

    let k = design_matrix(n, p);
    let lu_w = w.matrix().clone().full_piv_lu();
    let winv_k = lu_w.solve(&k).ok_or(Error::SingularKkt)?;
    let winv_y = lu_w.solve(bundle.stacked()).ok_or(Error::SingularKkt)?;
    let g = k.transpose() * winv_k;
    let rhs_top = k.transpose() * winv_y;

    let dim = n + n_u;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&g);
    if n_u > 0 {
        kkt.view_mut((0, n), (n, n_u))
            .copy_from(&c.matrix().transpose());
        kkt.view_mut((n, 0), (n_u, n)).copy_from(c.matrix());
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&rhs_top);

    let solution = kkt.full_piv_lu().solve(&rhs).ok_or(Error::SingularKkt)?;
    Ok(solution.rows(0, n).clone_owned())
}

/// The `n x n` reconciliation projector `M = I - W C' (C W C')^-1 C`.
pub fn mint_map(w_n: &DMatrix<f64>, c: &ConstraintMatrix) -> Result<DMatrix<f64>> {
    let n = c.n_series();
    if w_n.nrows() != n || w_n.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "reconciliation covariance order",
            expected: n,
            actual: w_n.nrows(),
        });
    }
    if c.n_upper() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let wct = w_n * c.matrix().transpose();
    let a = c.matrix() * &wct;
    let a_sym = (a.clone() + a.transpose()) * 0.5;
    let chol = Cholesky::new(a_sym).ok_or(Error::SingularProjection)?;
    let u = chol.solve(c.matrix());
    Ok(DMatrix::identity(n, n) - wct * u)
}

/// Least-squares adjustment of a single incoherent forecast vector.
pub fn mint_reconcile(
    y_hat: &DVector<f64>,
    w_n: &DMatrix<f64>,
    c: &ConstraintMatrix,
) -> Result<CoherentForecast> {
    if y_hat.len() != c.n_series() {
        return Err(Error::DimensionMismatch {
            what: "forecast length",
            expected: c.n_series(),
            actual: y_hat.len(),
        });
    }
    if c.n_upper() == 0 {
        return CoherentForecast::new(y_hat.clone(), Method::MintShr, c);
    }
    let wct = w_n * c.matrix().transpose();
    let a = c.matrix() * &wct;
    let a_sym = (a.clone() + a.transpose()) * 0.5;
    let chol = Cholesky::new(a_sym).ok_or(Error::SingularProjection)?;
    let adj = chol.solve(&(c.matrix() * y_hat));
    CoherentForecast::new(y_hat - wct * adj, Method::MintShr, c)
}

/// Per-series arithmetic mean over experts.
pub fn combine_ew(bundle: &ForecastBundle) -> DVector<f64> {
    let n = bundle.n_series();
    let p = bundle.n_experts();
    DVector::from_fn(n, |i, _| {
        (0..p).map(|j| bundle.value(j, i)).sum::<f64>() / p as f64
    })
}

/// Single-task weighting scheme for per-series combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Equal weights.
    Ew,
    /// Inverse in-sample MSE weights (Bates-Granger).
    Var,
    /// Full per-series covariance weights (Newbold-Granger).
    Cov,
}

/// Inverse-MSE weights, one row per series, columns summing to one.
/// MSEs are floored at `1e-12 * max MSE` so a perfect expert draws nearly
/// all weight instead of dividing by zero.
pub fn ow_var_weights(panel: &ResidualPanel) -> Result<DMatrix<f64>> {
    let n = panel.n_series();
    let p = panel.n_experts();
    let t = panel.n_obs() as f64;
    let mse = DMatrix::from_fn(n, p, |i, j| {
        panel.column(j, i).iter().map(|e| e * e).sum::<f64>() / t
    });
    let max_mse = mse.amax();
    if max_mse == 0.0 {
        return Err(Error::DegeneratePanel(
            "all in-sample MSEs are zero".into(),
        ));
    }
    let floor = 1e-12 * max_mse;
    let mut weights = DMatrix::zeros(n, p);
    for i in 0..n {
        let inv: Vec<f64> = (0..p).map(|j| 1.0 / mse[(i, j)].max(floor)).collect();
        let total: f64 = inv.iter().sum();
        for j in 0..p {
            weights[(i, j)] = inv[j] / total;
        }
    }
    Ok(weights)
}

/// Minimum-variance weights `w = S^-1 1 / (1' S^-1 1)` from a `p x p`
/// error second-moment matrix. Weights sum to one and may be negative.
pub fn newbold_granger_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = sigma.nrows();
    let mut sigma = sigma.clone();
    ensure_positive_definite(&mut sigma).map_err(|_| Error::SingularSeriesCovariance {
        series: "<given>".into(),
    })?;
    let chol = Cholesky::new(sigma).ok_or(Error::SingularSeriesCovariance {
        series: "<given>".into(),
    })?;
    let ones = DVector::from_element(p, 1.0);
    let raw = chol.solve(&ones);
    let total = raw.sum();
    if total.abs() < 1e-300 {
        return Err(Error::SingularSeriesCovariance {
            series: "<given>".into(),
        });
    }
    Ok(raw / total)
}

/// Full-covariance weights, one row per series. Uses uncentered second
/// moments so a diagonal covariance reproduces the inverse-MSE weights.
pub fn ow_cov_weights(panel: &ResidualPanel) -> Result<DMatrix<f64>> {
    let n = panel.n_series();
    let p = panel.n_experts();
    let t = panel.n_obs() as f64;
    let mut weights = DMatrix::zeros(n, p);
    for i in 0..n {
        let r = panel.series_across_experts(i);
        let sigma = r.transpose() * &r / t;
        let w = newbold_granger_weights(&sigma).map_err(|_| Error::SingularSeriesCovariance {
            series: i.to_string(),
        })?;
        for j in 0..p {
            weights[(i, j)] = w[j];
        }
    }
    Ok(weights)
}

/// Weights for the chosen scheme, one row per series.
pub fn single_task_weights(
    scheme: WeightScheme,
    panel: &ResidualPanel,
) -> Result<DMatrix<f64>> {
    match scheme {
        WeightScheme::Ew => {
            let p = panel.n_experts();
            Ok(DMatrix::from_element(
                panel.n_series(),
                p,
                1.0 / p as f64,
            ))
        }
        WeightScheme::Var => ow_var_weights(panel),
        WeightScheme::Cov => ow_cov_weights(panel),
    }
}

/// Apply per-series expert weights to a bundle.
pub fn combine_weighted(bundle: &ForecastBundle, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = bundle.n_series();
    let p = bundle.n_experts();
    if weights.nrows() != n || weights.ncols() != p {
        return Err(Error::DimensionMismatch {
            what: "weight matrix rows",
            expected: n,
            actual: weights.nrows(),
        });
    }
    Ok(DVector::from_fn(n, |i, _| {
        (0..p).map(|j| weights[(i, j)] * bundle.value(j, i)).sum()
    }))
}

/// Inverse-MSE single-task combination.
pub fn combine_ow_var(bundle: &ForecastBundle, panel: &ResidualPanel) -> Result<DVector<f64>> {
    combine_weighted(bundle, &ow_var_weights(panel)?)
}

/// Full-covariance single-task combination.
pub fn combine_ow_cov(bundle: &ForecastBundle, panel: &ResidualPanel) -> Result<DVector<f64>> {
    combine_weighted(bundle, &ow_cov_weights(panel)?)
}

/// Reconcile each expert with its own covariance, then average (src).
pub fn pipeline_src(
    bundle: &ForecastBundle,
    per_expert_w: &[DMatrix<f64>],
    c: &ConstraintMatrix,
) -> Result<CoherentForecast> {
    let p = bundle.n_experts();
    if per_expert_w.len() != p {
        return Err(Error::DimensionMismatch {
            what: "per-expert covariance count",
            expected: p,
            actual: per_expert_w.len(),
        });
    }
    let n = bundle.n_series();
    let mut sum = DVector::zeros(n);
    for (j, w) in per_expert_w.iter().enumerate() {
        sum += mint_reconcile(&bundle.expert(j), w, c)?.values;
    }
    CoherentForecast::new(sum / p as f64, Method::Src, c)
}

/// Combine per series with the chosen scheme, then reconcile (scr).
pub fn pipeline_scr(
    bundle: &ForecastBundle,
    panel: &ResidualPanel,
    scheme: WeightScheme,
    w_n: &DMatrix<f64>,
    c: &ConstraintMatrix,
) -> Result<CoherentForecast> {
    let weights = single_task_weights(scheme, panel)?;
    let combined = combine_weighted(bundle, &weights)?;
    let reconciled = mint_reconcile(&combined, w_n, c)?;
    let method = match scheme {
        WeightScheme::Ew => Method::ScrEw,
        WeightScheme::Var => Method::ScrVar,
        WeightScheme::Cov => Method::ScrCov,
    };
    CoherentForecast::new(reconciled.values, method, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceKind;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_constraint() -> ConstraintMatrix {
        ConstraintMatrix::new(DMatrix::from_row_slice(1, 3, &[1.0, -1.0, -1.0]))
    }

    fn toy_bundle() -> ForecastBundle {
        ForecastBundle::from_experts(&[
            DVector::from_vec(vec![10.0, 6.0, 5.0]),
            DVector::from_vec(vec![12.0, 6.0, 4.0]),
        ])
        .unwrap()
    }

    #[test]
    fn occ_toy_instance() {
        let c = toy_constraint();
        let w = ErrorCovariance::identity(3, 2);
        let out = occ_combine(&toy_bundle(), &w, &c).unwrap();
        let expected = [65.0 / 6.0, 37.0 / 6.0, 28.0 / 6.0];
        for i in 0..3 {
            assert_relative_eq!(out.values[i], expected[i], epsilon = 1e-10);
        }
        assert!(out.coherent);
        assert!(out.residual <= 1e-10);
    }

    #[test]
    fn oracle_matches_toy_instance() {
        let c = toy_constraint();
        let w = ErrorCovariance::identity(3, 2);
        let y = qp_oracle_combine(&toy_bundle(), &w, &c).unwrap();
        let expected = [65.0 / 6.0, 37.0 / 6.0, 28.0 / 6.0];
        for i in 0..3 {
            assert_relative_eq!(y[i], expected[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn oracle_returns_common_coherent_value_unchanged() {
        let c = toy_constraint();
        let coherent = DVector::from_vec(vec![10.0, 6.0, 4.0]);
        let bundle =
            ForecastBundle::from_experts(&[coherent.clone(), coherent.clone()]).unwrap();
        let w = ErrorCovariance::identity(3, 2);
        let y = qp_oracle_combine(&bundle, &w, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(y[i], coherent[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn occ_single_expert_equals_mint() {
        let c = toy_constraint();
        let w_n = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]));
        let bundle =
            ForecastBundle::from_experts(&[DVector::from_vec(vec![10.0, 6.0, 5.0])]).unwrap();
        let w = ErrorCovariance::from_dense(w_n.clone(), 3, 1).unwrap();
        let occ = occ_combine(&bundle, &w, &c).unwrap();
        let mint = mint_reconcile(&bundle.expert(0), &w_n, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(occ.values[i], mint.values[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn occ_identity_w_is_projected_average() {
        let c = toy_constraint();
        let bundle = toy_bundle();
        let w = ErrorCovariance::identity(3, 2);
        let occ = occ_combine(&bundle, &w, &c).unwrap();
        let mean = combine_ew(&bundle);
        let eye = DMatrix::identity(3, 3);
        let projected = mint_reconcile(&mean, &eye, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(occ.values[i], projected.values[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn mint_toy_values() {
        let c = toy_constraint();
        let y = DVector::from_vec(vec![10.0, 6.0, 5.0]);

        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]));
        let out = mint_reconcile(&y, &w, &c).unwrap();
        let expected = [32.0 / 3.0, 35.0 / 6.0, 29.0 / 6.0];
        for i in 0..3 {
            assert_relative_eq!(out.values[i], expected[i], epsilon = 1e-10);
        }

        let eye = DMatrix::identity(3, 3);
        let out = mint_reconcile(&y, &eye, &c).unwrap();
        let expected = [31.0 / 3.0, 17.0 / 3.0, 14.0 / 3.0];
        for i in 0..3 {
            assert_relative_eq!(out.values[i], expected[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn mint_leaves_coherent_input_unchanged() {
        let c = toy_constraint();
        let y = DVector::from_vec(vec![10.0, 6.0, 4.0]);
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 3.0]));
        let out = mint_reconcile(&y, &w, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(out.values[i], y[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn mint_is_idempotent() {
        let c = toy_constraint();
        let y = DVector::from_vec(vec![10.0, 6.0, 5.0]);
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]));
        let once = mint_reconcile(&y, &w, &c).unwrap();
        let twice = mint_reconcile(&once.values, &w, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(twice.values[i], once.values[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn ew_examples() {
        let b = ForecastBundle::from_experts(&[
            DVector::from_vec(vec![10.0]),
            DVector::from_vec(vec![12.0]),
        ])
        .unwrap();
        assert_eq!(combine_ew(&b), DVector::from_vec(vec![11.0]));

        let single =
            ForecastBundle::from_experts(&[DVector::from_vec(vec![3.0, 4.0])]).unwrap();
        assert_eq!(combine_ew(&single), DVector::from_vec(vec![3.0, 4.0]));

        let three = ForecastBundle::from_experts(&[
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 4.0]),
            DVector::from_vec(vec![5.0, 6.0]),
        ])
        .unwrap();
        assert_eq!(combine_ew(&three), DVector::from_vec(vec![3.0, 4.0]));
    }

    /// Panel with prescribed per-(series, expert) MSEs: residual columns of
    /// constant magnitude sqrt(mse).
    fn panel_with_mses(mses: &DMatrix<f64>) -> ResidualPanel {
        let n = mses.nrows();
        let p = mses.ncols();
        let t = 4;
        let data = DMatrix::from_fn(t, n * p, |r, col| {
            let j = col / n;
            let i = col % n;
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            sign * mses[(i, j)].sqrt()
        });
        ResidualPanel::new(data, n, p).unwrap()
    }

    #[test]
    fn ow_var_inverse_mse_weights() {
        let mses = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let panel = panel_with_mses(&mses);
        let weights = ow_var_weights(&panel).unwrap();
        assert_relative_eq!(weights[(0, 0)], 0.75, epsilon = 1e-12);
        assert_relative_eq!(weights[(0, 1)], 0.25, epsilon = 1e-12);

        let bundle = ForecastBundle::from_experts(&[
            DVector::from_vec(vec![10.0]),
            DVector::from_vec(vec![14.0]),
        ])
        .unwrap();
        let combined = combine_ow_var(&bundle, &panel).unwrap();
        assert_relative_eq!(combined[0], 11.0, epsilon = 1e-12);
    }

    #[test]
    fn ow_var_equal_mses_reduce_to_ew() {
        let mses = DMatrix::from_row_slice(2, 3, &[2.0, 2.0, 2.0, 0.5, 0.5, 0.5]);
        let panel = panel_with_mses(&mses);
        let weights = ow_var_weights(&panel).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_relative_eq!(weights[(i, j)], 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ow_var_zero_mse_gets_floored() {
        let mses = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let panel = panel_with_mses(&mses);
        let weights = ow_var_weights(&panel).unwrap();
        assert!(weights[(0, 0)] > 0.999999);
        assert_relative_eq!(weights.row(0).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ow_var_all_zero_is_degenerate() {
        let mses = DMatrix::zeros(1, 2);
        let panel = panel_with_mses(&mses);
        assert!(matches!(
            ow_var_weights(&panel),
            Err(Error::DegeneratePanel(_))
        ));
    }

    #[test]
    fn newbold_granger_worked_example() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 3.0]);
        let w = newbold_granger_weights(&sigma).unwrap();
        assert_relative_eq!(w[0], 5.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn newbold_granger_identity_gives_equal_weights() {
        let w = newbold_granger_weights(&DMatrix::identity(3, 3)).unwrap();
        for j in 0..3 {
            assert_relative_eq!(w[j], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ow_cov_diagonal_reduces_to_ow_var() {
        // Orthogonal sign patterns across experts keep cross moments at
        // zero, so the per-series covariance is diagonal with MSE entries.
        let mses = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 0.5]);
        let t = 8;
        let data = DMatrix::from_fn(t, 4, |r, col| {
            let j = col / 2;
            let i = col % 2;
            let sign = match (r / (j + 1)) % 2 {
                0 => 1.0,
                _ => -1.0,
            };
            sign * mses[(i, j)].sqrt()
        });
        let panel = ResidualPanel::new(data, 2, 2).unwrap();
        let r0 = panel.series_across_experts(0);
        let cross = (r0.column(0).dot(&r0.column(1))).abs();
        assert!(cross < 1e-12, "construction must decorrelate experts");
        let var_w = ow_var_weights(&panel).unwrap();
        let cov_w = ow_cov_weights(&panel).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(cov_w[(i, j)], var_w[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let data = DMatrix::from_fn(16, 6, |r, c| ((r * 7 + c * 3) as f64 * 0.41).sin() + 0.1);
        let panel = ResidualPanel::new(data, 2, 3).unwrap();
        for scheme in [WeightScheme::Ew, WeightScheme::Var, WeightScheme::Cov] {
            let w = single_task_weights(scheme, &panel).unwrap();
            for i in 0..2 {
                assert_relative_eq!(w.row(i).sum(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn src_single_expert_equals_mint() {
        let c = toy_constraint();
        let bundle =
            ForecastBundle::from_experts(&[DVector::from_vec(vec![10.0, 6.0, 5.0])]).unwrap();
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]));
        let src = pipeline_src(&bundle, std::slice::from_ref(&w), &c).unwrap();
        let mint = mint_reconcile(&bundle.expert(0), &w, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(src.values[i], mint.values[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn src_coherent_experts_average_unchanged() {
        let c = toy_constraint();
        let bundle = ForecastBundle::from_experts(&[
            DVector::from_vec(vec![10.0, 6.0, 4.0]),
            DVector::from_vec(vec![20.0, 12.0, 8.0]),
        ])
        .unwrap();
        let eye = DMatrix::identity(3, 3);
        let src = pipeline_src(&bundle, &[eye.clone(), eye], &c).unwrap();
        let expected = [15.0, 9.0, 6.0];
        for i in 0..3 {
            assert_relative_eq!(src.values[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn src_identity_w_matches_occ_identity() {
        let c = toy_constraint();
        let bundle = toy_bundle();
        let eye = DMatrix::identity(3, 3);
        let src = pipeline_src(&bundle, &[eye.clone(), eye], &c).unwrap();
        let expected = [65.0 / 6.0, 37.0 / 6.0, 28.0 / 6.0];
        for i in 0..3 {
            assert_relative_eq!(src.values[i], expected[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn scr_ew_identity_matches_occ_identity() {
        let c = toy_constraint();
        let bundle = toy_bundle();
        let panel = panel_with_mses(&DMatrix::from_element(3, 2, 1.0));
        let eye = DMatrix::identity(3, 3);
        let scr = pipeline_scr(&bundle, &panel, WeightScheme::Ew, &eye, &c).unwrap();
        let expected = [65.0 / 6.0, 37.0 / 6.0, 28.0 / 6.0];
        for i in 0..3 {
            assert_relative_eq!(scr.values[i], expected[i], epsilon = 1e-10);
        }
        assert_eq!(scr.method, Method::ScrEw);
        assert!(scr.coherent);
    }

    #[test]
    fn scr_single_expert_ew_equals_mint() {
        let c = toy_constraint();
        let y = DVector::from_vec(vec![10.0, 6.0, 5.0]);
        let bundle = ForecastBundle::from_experts(std::slice::from_ref(&y)).unwrap();
        let panel = panel_with_mses(&DMatrix::from_element(3, 1, 1.0));
        let w_n = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0]));
        let scr = pipeline_scr(&bundle, &panel, WeightScheme::Ew, &w_n, &c).unwrap();
        let mint = mint_reconcile(&y, &w_n, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(scr.values[i], mint.values[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn scr_is_noop_on_coherent_combined_vector() {
        let c = toy_constraint();
        let coherent = DVector::from_vec(vec![10.0, 6.0, 4.0]);
        let bundle =
            ForecastBundle::from_experts(&[coherent.clone(), coherent.clone()]).unwrap();
        let panel = panel_with_mses(&DMatrix::from_element(3, 2, 1.0));
        let w_n = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 3.0]));
        let scr = pipeline_scr(&bundle, &panel, WeightScheme::Ew, &w_n, &c).unwrap();
        for i in 0..3 {
            assert_relative_eq!(scr.values[i], coherent[i], epsilon = 1e-12);
        }
    }

    // -- randomized checks ---------------------------------------------------

    /// Wishart-style random p.d. matrix with heterogeneous scales.
    pub(crate) fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
        let extra = dim + 4;
        let a = DMatrix::from_fn(dim, extra, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = &a * a.transpose() / extra as f64;
        let scales = DVector::from_fn(dim, |_, _| 0.3 + 2.0 * rng.gen::<f64>());
        let d = DMatrix::from_diagonal(&scales);
        &d * base * d
    }

    /// Hierarchy-style random constraint rows: +1 on own upper column,
    /// -1 on a subset of the trailing columns. Full row rank by layout.
    pub(crate) fn random_constraints(
        rng: &mut ChaCha8Rng,
        n: usize,
        n_u: usize,
    ) -> ConstraintMatrix {
        let mut c = DMatrix::zeros(n_u, n);
        for r in 0..n_u {
            c[(r, r)] = 1.0;
            let mut any = false;
            for j in n_u..n {
                if rng.gen::<f64>() < 0.6 {
                    c[(r, j)] = -1.0;
                    any = true;
                }
            }
            if !any {
                c[(r, n_u + (r % (n - n_u)))] = -1.0;
            }
        }
        ConstraintMatrix::new(c)
    }

    #[test]
    fn occ_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(910);
        for _ in 0..40 {
            let n = rng.gen_range(3..=8);
            let n_u = rng.gen_range(1..=(n - 2).min(4));
            let p = rng.gen_range(1..=3);
            let c = random_constraints(&mut rng, n, n_u);
            let w =
                ErrorCovariance::from_dense(random_spd(&mut rng, n * p), n, p).unwrap();
            let stacked =
                DVector::from_fn(n * p, |_, _| rng.sample::<f64, _>(StandardNormal) * 5.0);
            let bundle = ForecastBundle::from_stacked(stacked, n, p).unwrap();
            let fast = occ_combine(&bundle, &w, &c).unwrap();
            let oracle = qp_oracle_combine(&bundle, &w, &c).unwrap();
            let err = (&fast.values - &oracle).amax();
            assert!(
                err <= 1e-6 * (1.0 + oracle.amax()),
                "occ/oracle gap {err}"
            );
            assert!(fast.residual <= COHERENCE_TOL);
        }
    }

    #[test]
    fn occ_block_path_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(911);
        for _ in 0..20 {
            let n = rng.gen_range(3..=6);
            let p = rng.gen_range(2..=4);
            let n_u = rng.gen_range(1..=(n - 2).min(3));
            let c = random_constraints(&mut rng, n, n_u);
            // Build a residual panel and estimate a block covariance so the
            // structured solve path (implicit K) is exercised.
            let t = 40;
            let data = DMatrix::from_fn(t, n * p, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let panel = ResidualPanel::new(data, n, p).unwrap();
            let w = ErrorCovariance::estimate(&panel, CovarianceKind::ExpertBlockShrunk).unwrap();
            let stacked =
                DVector::from_fn(n * p, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let bundle = ForecastBundle::from_stacked(stacked, n, p).unwrap();
            let fast = occ_combine(&bundle, &w, &c).unwrap();
            let oracle = qp_oracle_combine(&bundle, &w, &c).unwrap();
            let err = (&fast.values - &oracle).amax();
            assert!(err <= 1e-6 * (1.0 + oracle.amax()));
            assert_eq!(fast.method, Method::OccBe);
        }
    }

    #[test]
    fn oracle_unconstrained_is_per_series_gls() {
        // With no constraint rows and diagonal W the solution decouples into
        // per-series inverse-variance combinations.
        let mut rng = ChaCha8Rng::seed_from_u64(912);
        let n = 4;
        let p = 3;
        let variances: Vec<f64> = (0..n * p).map(|_| 0.2 + rng.gen::<f64>() * 3.0).collect();
        let w = ErrorCovariance::from_dense(
            DMatrix::from_diagonal(&DVector::from_vec(variances.clone())),
            n,
            p,
        )
        .unwrap();
        let stacked = DVector::from_fn(n * p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let bundle = ForecastBundle::from_stacked(stacked, n, p).unwrap();
        let c = ConstraintMatrix::unconstrained(n);

        let occ = occ_combine(&bundle, &w, &c).unwrap();
        let oracle = qp_oracle_combine(&bundle, &w, &c).unwrap();
        for i in 0..n {
            let num: f64 = (0..p)
                .map(|j| bundle.value(j, i) / variances[j * n + i])
                .sum();
            let den: f64 = (0..p).map(|j| 1.0 / variances[j * n + i]).sum();
            let gls = num / den;
            assert_relative_eq!(occ.values[i], gls, epsilon = 1e-10);
            assert_relative_eq!(oracle[i], gls, epsilon = 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn occ_scale_invariant_under_sigma_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let p = 3;
            let c = random_constraints(&mut rng, n, 2);
            let stacked = DVector::from_fn(n * p, |_, _| rng.sample::<f64, _>(StandardNormal) * 4.0);
            let bundle = ForecastBundle::from_stacked(stacked, n, p).unwrap();
            let baseline = occ_combine(&bundle, &ErrorCovariance::identity(n, p), &c).unwrap();
            for sigma2 in [0.01, 1.0, 100.0] {
                let w = ErrorCovariance::from_dense(
                    DMatrix::identity(n * p, n * p) * sigma2, n, p).unwrap();
                let scaled = occ_combine(&bundle, &w, &c).unwrap();
                prop_assert!((&scaled.values - &baseline.values).amax() <= 1e-10);
            }
        }

        #[test]
        fn mint_idempotent_on_random_input(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let c = random_constraints(&mut rng, n, 2);
            let w = random_spd(&mut rng, n);
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 10.0);
            let once = mint_reconcile(&y, &w, &c).unwrap();
            let twice = mint_reconcile(&once.values, &w, &c).unwrap();
            prop_assert!((&twice.values - &once.values).amax() <= 1e-10 * (1.0 + once.values.amax()));
            prop_assert!(once.residual <= COHERENCE_TOL);
        }
    }
}
