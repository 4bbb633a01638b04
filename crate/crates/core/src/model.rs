//! Core model containers: dimensions, data panel, parameter state, and the
//! companion-form representation of the VAR block.
//!
//! The model couples a measurement equation mapping latent factors and
//! observed national aggregates into regional series,
//!
//! ```text
//! H[t] = LF * F[t] + LM * M[t] + eps[t],    eps[t] ~ N(0, diag(sigma2))
//! ```
//!
//! with a VAR(Q) state equation over y[t] = (F[t], M[t]):
//!
//! ```text
//! y[t] = A * x[t] + zeta * z[t] + u[t],     u[t] ~ N(0, SigmaU)
//! ```
//!
//! where x[t] stacks Q lags of y and z is an optional exogenous proxy.
//! Identification freezes the top S x S block of LF to the identity and the
//! first S rows of LM to zero, so the first S regional series are the
//! factors plus noise.

use nalgebra::{DMatrix, DVector};

use crate::error::{FavarError, Result};

/// All dimension constants of one model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Number of regional series (R).
    pub n_regions: usize,
    /// Number of latent factors (S).
    pub n_factors: usize,
    /// Number of observable national aggregates (K).
    pub n_aggregates: usize,
    /// VAR lag order (Q).
    pub lag_order: usize,
    /// Number of time periods in the panel (T).
    pub n_periods: usize,
    /// Impulse-response horizon in months (H_max).
    pub horizon: usize,
}

impl ModelDims {
    pub fn new(
        n_regions: usize,
        n_factors: usize,
        n_aggregates: usize,
        lag_order: usize,
        n_periods: usize,
        horizon: usize,
    ) -> Result<Self> {
        let dims = ModelDims {
            n_regions,
            n_factors,
            n_aggregates,
            lag_order,
            n_periods,
            horizon,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_factors < 1 {
            return Err(FavarError::Config("need at least one factor".into()));
        }
        if self.lag_order < 1 {
            return Err(FavarError::Config("lag order must be at least 1".into()));
        }
        if self.n_regions <= self.n_factors {
            return Err(FavarError::Config(format!(
                "need more regions than factors (R={}, S={})",
                self.n_regions, self.n_factors
            )));
        }
        if self.n_periods <= self.lag_order {
            return Err(FavarError::Config(format!(
                "need more periods than lags (T={}, Q={})",
                self.n_periods, self.lag_order
            )));
        }
        Ok(())
    }

    /// Number of VAR variables, S + K.
    pub fn n_vars(&self) -> usize {
        self.n_factors + self.n_aggregates
    }

    /// Total loading-element count L = R * (S + K).
    pub fn n_loadings(&self) -> usize {
        self.n_regions * self.n_vars()
    }

    /// Free (sampled) loading elements: rows S+1..R of the loading block.
    pub fn n_free_loadings(&self) -> usize {
        (self.n_regions - self.n_factors) * self.n_vars()
    }

    /// VAR coefficient count J = (S + K)^2 * Q, excluding proxy coefficients.
    pub fn n_var_coeffs(&self) -> usize {
        self.n_vars() * self.n_vars() * self.lag_order
    }
}

/// Observed panel after ingestion: regional series, national aggregates,
/// and the optional proxy, row-aligned on a common time index.
#[derive(Debug, Clone)]
pub struct PanelData {
    /// T x R matrix of transformed regional series.
    pub regional: DMatrix<f64>,
    /// T x K matrix of transformed national aggregates.
    pub aggregates: DMatrix<f64>,
    /// Length-T proxy series, absent when no instrument is supplied.
    pub proxy: Option<DVector<f64>>,
    /// Ordered period labels, YYYY-MM.
    pub time_index: Vec<String>,
}

impl PanelData {
    pub fn n_periods(&self) -> usize {
        self.regional.nrows()
    }

    /// Checks row alignment and finiteness of every stored value.
    pub fn validate(&self) -> Result<()> {
        let t = self.regional.nrows();
        if self.aggregates.nrows() != t {
            return Err(FavarError::Data(format!(
                "aggregate rows ({}) do not match regional rows ({})",
                self.aggregates.nrows(),
                t
            )));
        }
        if let Some(z) = &self.proxy {
            if z.len() != t {
                return Err(FavarError::Data(format!(
                    "proxy length ({}) does not match panel rows ({})",
                    z.len(),
                    t
                )));
            }
        }
        if self.time_index.len() != t {
            return Err(FavarError::Data(format!(
                "time index length ({}) does not match panel rows ({})",
                self.time_index.len(),
                t
            )));
        }
        let all_finite = self.regional.iter().all(|v| v.is_finite())
            && self.aggregates.iter().all(|v| v.is_finite())
            && self.proxy.iter().flat_map(|z| z.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(FavarError::Data("panel contains non-finite values".into()));
        }
        Ok(())
    }
}

/// One full parameter state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FavarParams {
    /// R x S factor loadings; top S x S block frozen to the identity.
    pub factor_loadings: DMatrix<f64>,
    /// R x K coefficients on the observed aggregates; first S rows frozen to zero.
    pub agg_loadings: DMatrix<f64>,
    /// Length-R measurement variances, strictly positive.
    pub meas_var: DVector<f64>,
    /// (S+K) x Q(S+K) VAR coefficient matrix.
    pub var_coeffs: DMatrix<f64>,
    /// Length-(S+K) contemporaneous impact of the proxy on y[t].
    pub proxy_coeffs: Option<DVector<f64>>,
    /// (S+K) x (S+K) innovation covariance, symmetric positive definite.
    pub innov_cov: DMatrix<f64>,
}

impl FavarParams {
    /// Zero-initialized state with the identification blocks in place.
    pub fn zeros(dims: &ModelDims, with_proxy: bool) -> Self {
        let m = dims.n_vars();
        let mut factor_loadings = DMatrix::zeros(dims.n_regions, dims.n_factors);
        for s in 0..dims.n_factors {
            factor_loadings[(s, s)] = 1.0;
        }
        FavarParams {
            factor_loadings,
            agg_loadings: DMatrix::zeros(dims.n_regions, dims.n_aggregates),
            meas_var: DVector::from_element(dims.n_regions, 1.0),
            var_coeffs: DMatrix::zeros(m, dims.lag_order * m),
            proxy_coeffs: with_proxy.then(|| DVector::zeros(m)),
            innov_cov: DMatrix::identity(m, m),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.factor_loadings.ncols()
    }

    pub fn n_aggregates(&self) -> usize {
        self.agg_loadings.ncols()
    }

    pub fn n_vars(&self) -> usize {
        self.n_factors() + self.n_aggregates()
    }

    /// Verifies the frozen identification blocks, variance positivity, and
    /// that the innovation covariance is symmetric positive definite.
    pub fn check_invariants(&self) -> Result<()> {
        let s = self.n_factors();
        for i in 0..s {
            for j in 0..s {
                let want = if i == j { 1.0 } else { 0.0 };
                if self.factor_loadings[(i, j)] != want {
                    return Err(FavarError::Numerical(format!(
                        "identification block violated at factor loading ({i},{j})"
                    )));
                }
            }
            for k in 0..self.n_aggregates() {
                if self.agg_loadings[(i, k)] != 0.0 {
                    return Err(FavarError::Numerical(format!(
                        "identification block violated at aggregate loading ({i},{k})"
                    )));
                }
            }
        }
        if self.meas_var.iter().any(|v| !(*v > 0.0)) {
            return Err(FavarError::Numerical(
                "measurement variances must be strictly positive".into(),
            ));
        }
        check_spd(&self.innov_cov, "innovation covariance")?;
        Ok(())
    }
}

/// Normal-Gamma shrinkage state for the VAR-coefficient and loading blocks.
///
/// Local scales are stored in the parametrization where each coefficient has
/// conditional prior variance `2 * local / global`. The Gibbs sweep keeps
/// this pairing consistent when the global scale is refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    /// Local scales for the VAR block (one per coefficient, proxy included).
    pub var_local: DVector<f64>,
    /// Global shrinkage scale for the VAR block.
    pub var_global: f64,
    /// Local scales for the free loading elements, rows S+1..R.
    pub loading_local: DVector<f64>,
    /// Global shrinkage scale for the loadings.
    pub loading_global: f64,
}

impl ShrinkageState {
    pub fn ones(n_var_block: usize, n_free_loadings: usize) -> Self {
        ShrinkageState {
            var_local: DVector::from_element(n_var_block, 1.0),
            var_global: 1.0,
            loading_local: DVector::from_element(n_free_loadings, 1.0),
            loading_global: 1.0,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let pos = self.var_local.iter().all(|v| *v > 0.0)
            && self.loading_local.iter().all(|v| *v > 0.0)
            && self.var_global > 0.0
            && self.loading_global > 0.0;
        if !pos {
            return Err(FavarError::Numerical(
                "shrinkage scales must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Gamma shape of the VAR-block local scales.
    pub shape_local_var: f64,
    /// Gamma shape of the loading-block local scales.
    pub shape_local_loading: f64,
    /// Gamma (shape, rate) prior on the loading global scale.
    pub global_shape_loading: f64,
    pub global_rate_loading: f64,
    /// Gamma (shape, rate) prior on the VAR global scale.
    pub global_shape_var: f64,
    pub global_rate_var: f64,
    /// Inverse-Gamma (shape, scale) prior on the measurement variances.
    pub meas_var_shape: f64,
    pub meas_var_scale: f64,
    /// Inverted-Wishart prior degrees of freedom on the innovation covariance.
    pub innov_dof: f64,
    /// Inverted-Wishart prior scale matrix, (S+K) x (S+K).
    pub innov_scale: DMatrix<f64>,
}

impl Hyperparams {
    pub fn validate(&self, n_vars: usize) -> Result<()> {
        let scalars = [
            self.shape_local_var,
            self.shape_local_loading,
            self.global_shape_loading,
            self.global_rate_loading,
            self.global_shape_var,
            self.global_rate_var,
            self.meas_var_shape,
            self.meas_var_scale,
            self.innov_dof,
        ];
        if scalars.iter().any(|v| !(*v > 0.0)) {
            return Err(FavarError::Config(
                "hyperparameters must be strictly positive".into(),
            ));
        }
        if self.innov_scale.nrows() != n_vars || self.innov_scale.ncols() != n_vars {
            return Err(FavarError::Config(format!(
                "innovation prior scale must be {n_vars} x {n_vars}"
            )));
        }
        if self.innov_dof <= n_vars as f64 - 1.0 {
            return Err(FavarError::Config(
                "innovation prior dof must exceed dim - 1".into(),
            ));
        }
        check_spd(&self.innov_scale, "innovation prior scale")
            .map_err(|e| FavarError::Config(e.to_string()))
    }
}

/// Default hyperparameters: strong global-local shrinkage with heavy tails
/// and weakly informative variance priors.
pub fn default_hyperparams(dims: &ModelDims) -> Hyperparams {
    let m = dims.n_vars();
    Hyperparams {
        shape_local_var: 0.1,
        shape_local_loading: 0.1,
        global_shape_loading: 0.01,
        global_rate_loading: 0.01,
        global_shape_var: 0.01,
        global_rate_var: 0.01,
        meas_var_shape: 0.01,
        meas_var_scale: 0.01,
        innov_dof: m as f64 + 1.0,
        innov_scale: DMatrix::identity(m, m) * 1e-2,
    }
}

/// First-order companion representation of the VAR(Q) block.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionForm {
    /// Q(S+K) x Q(S+K) companion matrix: coefficient rows on top,
    /// sub-diagonal identity blocks below.
    pub phi: DMatrix<f64>,
    n_vars: usize,
}

impl CompanionForm {
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Pads a contemporaneous impact vector with zeros into companion space.
    pub fn stack_impact(&self, impact: &DVector<f64>) -> Result<DVector<f64>> {
        if impact.len() != self.n_vars {
            return Err(FavarError::Config(format!(
                "impact length {} does not match variable count {}",
                impact.len(),
                self.n_vars
            )));
        }
        let mut stacked = DVector::zeros(self.phi.nrows());
        stacked.rows_mut(0, self.n_vars).copy_from(impact);
        Ok(stacked)
    }
}

/// Builds the companion matrix for a coefficient matrix of shape
/// (S+K) x Q(S+K).
pub fn build_companion(var_coeffs: &DMatrix<f64>, dims: &ModelDims) -> Result<CompanionForm> {
    let m = dims.n_vars();
    let q = dims.lag_order;
    if var_coeffs.nrows() != m || var_coeffs.ncols() != q * m {
        return Err(FavarError::Config(format!(
            "VAR coefficient matrix is {} x {}, expected {} x {}",
            var_coeffs.nrows(),
            var_coeffs.ncols(),
            m,
            q * m
        )));
    }
    let d = q * m;
    let mut phi = DMatrix::zeros(d, d);
    phi.view_mut((0, 0), (m, d)).copy_from(var_coeffs);
    for i in 0..d - m {
        phi[(m + i, i)] = 1.0;
    }
    Ok(CompanionForm { phi, n_vars: m })
}

/// Largest eigenvalue modulus of the companion matrix.
pub fn spectral_radius(phi: &DMatrix<f64>) -> f64 {
    phi.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Cholesky-based SPD check with a descriptive error.
pub fn check_spd(mat: &DMatrix<f64>, what: &str) -> Result<()> {
    if mat.nrows() != mat.ncols() {
        return Err(FavarError::Numerical(format!("{what} is not square")));
    }
    let max_asym = (mat - mat.transpose()).amax();
    let scale = mat.amax().max(1e-300);
    if max_asym > 1e-8 * scale {
        return Err(FavarError::Numerical(format!(
            "{what} is not symmetric (max asymmetry {max_asym:.2e})"
        )));
    }
    if mat.clone().cholesky().is_none() {
        return Err(FavarError::Numerical(format!(
            "{what} is not positive definite"
        )));
    }
    Ok(())
}
