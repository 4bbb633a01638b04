//! The Gibbs sampler: full-conditional draws for the VAR coefficients,
//! latent factors, covariances, loadings, measurement variances, and the
//! Normal-Gamma shrinkage hierarchy, plus the chain driver.
//!
//! One sweep executes, in order:
//!
//! 1. VAR coefficients (and proxy impacts) from their joint conjugate
//!    Gaussian with Kronecker-structured precision;
//! 2. the factor path by forward-filtering backward-sampling;
//! 3. the innovation covariance from its inverted-Wishart conditional;
//! 4. free loading rows from independent conjugate regressions;
//! 5. measurement variances from independent inverse-Gamma conditionals;
//! 6. local scales (GIG) and then the global scale (Gamma) of the VAR block;
//! 7. the same pair for the loading block.
//!
//! The stored local scales pair with the global scale so that each
//! coefficient's conditional prior variance is `2 * local / global`. The
//! GIG step draws that prior variance directly; the chain re-expresses it
//! in local-scale units around whichever global value is current, keeping
//! the pairing exact across the global-scale refresh.
//!
//! Steps 4 and 5 run their independent rows in parallel on substreams
//! derived from (seed, step, iteration, row), so output is identical for
//! any worker count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

use crate::dist::{
    master_rng, sample_gamma, sample_gig, sample_inverse_gamma, sample_inverse_wishart,
    substream, GigParams, GIG_CHI_FLOOR,
};
use crate::error::{FavarError, Result};
use crate::model::{FavarParams, Hyperparams, ModelDims, PanelData, ShrinkageState};
use crate::state_space::ffbs_factor_path;

pub const STEP_NAMES: [&str; 9] = [
    "var_coeffs",
    "factors",
    "sigma_u",
    "loadings",
    "meas_var",
    "tau_a",
    "xi_a",
    "tau_lambda",
    "xi_lambda",
];

const SUBSTREAM_LOADINGS: u64 = 4;
const SUBSTREAM_MEAS_VAR: u64 = 5;

/// Chain length, burn-in, thinning, and reproducibility settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub n_draws: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub store_factors: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_draws {
            return Err(FavarError::Config(format!(
                "burn-in ({}) must be smaller than total draws ({})",
                self.n_burn, self.n_draws
            )));
        }
        if self.thin < 1 {
            return Err(FavarError::Config("thinning stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of draws the chain will retain.
    pub fn n_stored(&self) -> usize {
        (self.n_draws - self.n_burn).div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Cumulative wall time per sweep step, nanoseconds.
    pub step_nanos: [u64; 9],
    pub n_iterations: usize,
}

/// Retained posterior draws.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub config: ChainConfig,
    pub draws: Vec<FavarParams>,
    pub shrinkage_draws: Vec<ShrinkageState>,
    pub factor_paths: Option<Vec<DMatrix<f64>>>,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// Conjugate Gaussian posterior machinery
// ---------------------------------------------------------------------------

/// Gaussian posterior N(mean, precision^-1) held in factored form.
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianPosterior {
    fn from_precision(precision: DMatrix<f64>, rhs: &DVector<f64>) -> Result<Self> {
        let dim = precision.nrows();
        let chol = match precision.clone().cholesky() {
            Some(c) => c,
            None => {
                let eig = precision.symmetric_eigen().eigenvalues;
                let max = eig.amax();
                let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
                return Err(FavarError::Numerical(format!(
                    "singular posterior precision ({dim} x {dim}); eigenvalue range \
                     [{min:.3e}, {max:.3e}], condition {:.3e}",
                    max / min.abs().max(f64::MIN_POSITIVE)
                )));
            }
        };
        let mean = chol.solve(rhs);
        Ok(GaussianPosterior {
            mean,
            chol_lower: chol.l(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        use rand_distr::StandardNormal;
        let eta = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = self
            .chol_lower
            .transpose()
            .solve_upper_triangular(&eta)
            .expect("triangular solve cannot fail on a Cholesky factor");
        &self.mean + z
    }
}

/// Joint conjugate posterior of vec(B) for Y = X B' + U with U rows
/// N(0, innov_cov) and independent N(0, prior_var_j) priors per element.
/// vec(B) stacks B column-major, so coefficients of one regressor column are
/// contiguous.
pub fn var_coeff_posterior(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    innov_cov: &DMatrix<f64>,
    prior_var: &DVector<f64>,
) -> Result<GaussianPosterior> {
    let m = y.ncols();
    let p = x.ncols();
    if prior_var.len() != m * p {
        return Err(FavarError::Config(format!(
            "prior variance vector has {} entries, expected {}",
            prior_var.len(),
            m * p
        )));
    }
    let chol_u = innov_cov
        .clone()
        .cholesky()
        .ok_or_else(|| FavarError::Numerical("innovation covariance is not SPD".into()))?;
    let innov_inv = chol_u.inverse();
    let xtx = x.transpose() * x;
    let ytx = y.transpose() * x; // m x p

    let mut precision = DMatrix::zeros(m * p, m * p);
    for pc in 0..p {
        for pr in 0..p {
            let w = xtx[(pr, pc)];
            if w == 0.0 {
                continue;
            }
            for i in 0..m {
                for j in 0..m {
                    precision[(pr * m + i, pc * m + j)] += w * innov_inv[(i, j)];
                }
            }
        }
    }
    for idx in 0..m * p {
        let v = prior_var[idx];
        if !(v > 0.0) {
            return Err(FavarError::Parameter("nonpositive prior variance".into()));
        }
        precision[(idx, idx)] += 1.0 / v;
    }
    let sy = &innov_inv * ytx; // m x p
    let rhs = DVector::from_fn(m * p, |idx, _| sy[(idx % m, idx / m)]);
    GaussianPosterior::from_precision(precision, &rhs)
}

/// Conditional prior variances of the VAR block: 2 * local / global.
pub fn var_prior_variances(shrink: &ShrinkageState) -> DVector<f64> {
    shrink.var_local.map(|t| 2.0 * t / shrink.var_global)
}

/// Conditional prior variances of the free loadings.
pub fn loading_prior_variances(shrink: &ShrinkageState) -> DVector<f64> {
    shrink
        .loading_local
        .map(|t| 2.0 * t / shrink.loading_global)
}

/// Step 1: joint draw of the VAR coefficient matrix and, when a proxy
/// column is present, the proxy impact vector.
pub fn draw_var_coeffs<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    innov_cov: &DMatrix<f64>,
    shrink: &ShrinkageState,
    with_proxy: bool,
    lag_order: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Option<DVector<f64>>)> {
    let m = y.ncols();
    let p = x.ncols();
    let expected = lag_order * m + usize::from(with_proxy);
    if p != expected {
        return Err(FavarError::Config(format!(
            "regressor count {p} does not match lag structure (expected {expected})"
        )));
    }
    let prior_var = var_prior_variances(shrink);
    let posterior = var_coeff_posterior(y, x, innov_cov, &prior_var)?;
    let draw = posterior.sample(rng);
    Ok(unstack_coeffs(&draw, m, lag_order, with_proxy))
}

pub(crate) fn unstack_coeffs(
    stacked: &DVector<f64>,
    m: usize,
    lag_order: usize,
    with_proxy: bool,
) -> (DMatrix<f64>, Option<DVector<f64>>) {
    let qm = lag_order * m;
    let mut a = DMatrix::zeros(m, qm);
    for c in 0..qm {
        for i in 0..m {
            a[(i, c)] = stacked[c * m + i];
        }
    }
    let zeta = with_proxy.then(|| DVector::from_fn(m, |i, _| stacked[qm * m + i]));
    (a, zeta)
}

/// Stacks (A, zeta) in the prior's coefficient order.
pub(crate) fn stack_coeffs(params: &FavarParams) -> DVector<f64> {
    let n = params.var_coeffs.len()
        + params.proxy_coeffs.as_ref().map_or(0, |z| z.len());
    DVector::from_iterator(
        n,
        params
            .var_coeffs
            .iter()
            .chain(params.proxy_coeffs.iter().flat_map(|z| z.iter()))
            .cloned(),
    )
}

/// Step 2: factor path draw (forward filtering, backward sampling).
pub fn draw_factors<R: Rng + ?Sized>(
    params: &FavarParams,
    data: &PanelData,
    lag_order: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    ffbs_factor_path(params, data, lag_order, rng)
}

/// Step 3: innovation covariance from its inverted-Wishart conditional with
/// dof = prior dof + T and scale = residual outer-product sum + prior scale.
pub fn draw_sigma_u<R: Rng + ?Sized>(
    residuals: &DMatrix<f64>,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let t_eff = residuals.nrows();
    let scale = residuals.transpose() * residuals + &hyper.innov_scale;
    sample_inverse_wishart(hyper.innov_dof + t_eff as f64, &scale, rng)
}

/// Per-row conjugate posterior for one regional loading row.
pub fn loading_row_posterior(
    wtw: &DMatrix<f64>,
    wth: &DVector<f64>,
    meas_var: f64,
    prior_var: &DVector<f64>,
) -> Result<GaussianPosterior> {
    let m = wtw.nrows();
    let mut precision = wtw / meas_var;
    for i in 0..m {
        let v = prior_var[i];
        if !(v > 0.0) {
            return Err(FavarError::Parameter("nonpositive prior variance".into()));
        }
        precision[(i, i)] += 1.0 / v;
    }
    let rhs = wth / meas_var;
    GaussianPosterior::from_precision(precision, &rhs)
}

/// Step 4: free loading rows r = S+1..R as independent regressions of the
/// regional series on (factors, aggregates). Frozen identification rows are
/// rebuilt from constants. Row draws use per-row substreams.
pub fn draw_loadings(
    data: &PanelData,
    factors: &DMatrix<f64>,
    params: &FavarParams,
    shrink: &ShrinkageState,
    lag_order: usize,
    seed: u64,
    iter: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = params.n_factors();
    let k = params.n_aggregates();
    let m = s + k;
    let n_regions = params.factor_loadings.nrows();
    let q = lag_order;
    let t_total = data.n_periods();
    let regressors = build_loading_regressors(data, factors, q);
    let wtw = regressors.transpose() * &regressors;
    let prior = loading_prior_variances(shrink);

    let rows: Vec<(usize, DVector<f64>)> = (s..n_regions)
        .into_par_iter()
        .map(|r| -> Result<(usize, DVector<f64>)> {
            let h_col = DVector::from_fn(t_total - q, |i, _| data.regional[(q + i, r)]);
            let wth = regressors.transpose() * h_col;
            let row_prior = DVector::from_fn(m, |j, _| prior[(r - s) * m + j]);
            let posterior = loading_row_posterior(&wtw, &wth, params.meas_var[r], &row_prior)?;
            let mut rng = substream(seed, SUBSTREAM_LOADINGS, iter, r as u64);
            Ok((r, posterior.sample(&mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut factor_loadings = DMatrix::zeros(n_regions, s);
    for i in 0..s {
        factor_loadings[(i, i)] = 1.0;
    }
    let mut agg_loadings = DMatrix::zeros(n_regions, k);
    for (r, coef) in rows {
        for j in 0..s {
            factor_loadings[(r, j)] = coef[j];
        }
        for j in 0..k {
            agg_loadings[(r, j)] = coef[s + j];
        }
    }
    Ok((factor_loadings, agg_loadings))
}

/// Inverse-Gamma shape/scale of one measurement-variance conditional.
pub fn meas_var_posterior(n_obs: usize, rss: f64, hyper: &Hyperparams) -> (f64, f64) {
    (
        0.5 * n_obs as f64 + hyper.meas_var_shape,
        0.5 * rss + hyper.meas_var_scale,
    )
}

/// Step 5: measurement variances for every region (identification rows
/// included; their loadings are constants but their noise is still sampled).
pub fn draw_meas_var(
    data: &PanelData,
    factors: &DMatrix<f64>,
    params: &FavarParams,
    hyper: &Hyperparams,
    lag_order: usize,
    seed: u64,
    iter: u64,
) -> Result<DVector<f64>> {
    let q = lag_order;
    let t_eff = data.n_periods() - q;
    let n_regions = params.factor_loadings.nrows();
    let regressors = build_loading_regressors(data, factors, q);
    let draws: Vec<(usize, f64)> = (0..n_regions)
        .into_par_iter()
        .map(|r| -> Result<(usize, f64)> {
            let mut rss = 0.0;
            for i in 0..t_eff {
                let mut fitted = 0.0;
                for j in 0..params.n_factors() {
                    fitted += params.factor_loadings[(r, j)] * regressors[(i, j)];
                }
                for j in 0..params.n_aggregates() {
                    fitted +=
                        params.agg_loadings[(r, j)] * regressors[(i, params.n_factors() + j)];
                }
                let e = data.regional[(q + i, r)] - fitted;
                rss += e * e;
            }
            let (alpha, beta) = meas_var_posterior(t_eff, rss, hyper);
            let mut rng = substream(seed, SUBSTREAM_MEAS_VAR, iter, r as u64);
            Ok((r, sample_inverse_gamma(alpha, beta, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DVector::zeros(n_regions);
    for (r, v) in draws {
        out[r] = v;
    }
    Ok(out)
}

/// Regressor matrix (factors, aggregates) over the effective sample.
pub(crate) fn build_loading_regressors(
    data: &PanelData,
    factors: &DMatrix<f64>,
    lag_order: usize,
) -> DMatrix<f64> {
    let q = lag_order;
    let t_eff = data.n_periods() - q;
    let s = factors.ncols();
    let k = data.aggregates.ncols();
    DMatrix::from_fn(t_eff, s + k, |i, j| {
        if j < s {
            factors[(q + i, j)]
        } else {
            data.aggregates[(q + i, j - s)]
        }
    })
}

/// GIG conditional of the per-coefficient prior variances: one draw of
/// GIG(shape - 1/2, coeff^2, shape * global) per coefficient, with the
/// squared coefficient floored to keep the density proper under extreme
/// shrinkage.
pub fn draw_local_scales<R: Rng + ?Sized>(
    coeffs: &DVector<f64>,
    shape: f64,
    global: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(coeffs.len());
    for j in 0..coeffs.len() {
        let chi = (coeffs[j] * coeffs[j]).max(GIG_CHI_FLOOR);
        let params = GigParams::new(shape - 0.5, chi, shape * global)?;
        out[j] = sample_gig(&params, rng)?;
    }
    Ok(out)
}

/// Step 6: VAR-block local scales.
pub fn draw_tau_a<R: Rng + ?Sized>(
    params: &FavarParams,
    shrink: &ShrinkageState,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let coeffs = stack_coeffs(params);
    draw_local_scales(&coeffs, hyper.shape_local_var, shrink.var_global, rng)
}

/// Step 8: loading-block local scales over the free rows only; frozen
/// identification constants sit outside the shrinkage hierarchy.
pub fn draw_tau_lambda<R: Rng + ?Sized>(
    params: &FavarParams,
    shrink: &ShrinkageState,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let coeffs = stack_free_loadings(params);
    draw_local_scales(&coeffs, hyper.shape_local_loading, shrink.loading_global, rng)
}

/// Free loading elements in row-major (region, then factor/aggregate) order,
/// matching the loading prior-variance layout.
pub(crate) fn stack_free_loadings(params: &FavarParams) -> DVector<f64> {
    let s = params.n_factors();
    let k = params.n_aggregates();
    let n_regions = params.factor_loadings.nrows();
    let mut out = DVector::zeros((n_regions - s) * (s + k));
    let mut idx = 0;
    for r in s..n_regions {
        for j in 0..s {
            out[idx] = params.factor_loadings[(r, j)];
            idx += 1;
        }
        for j in 0..k {
            out[idx] = params.agg_loadings[(r, j)];
            idx += 1;
        }
    }
    out
}

/// Gamma conditional of a global shrinkage scale given the current
/// (local, global) pairing: shape = prior_shape + tail_shape * n, rate =
/// prior_rate + (tail_shape / 2) * sum of prior variances.
pub fn draw_global_scale<R: Rng + ?Sized>(
    local: &DVector<f64>,
    global_current: f64,
    tail_shape: f64,
    prior_shape: f64,
    prior_rate: f64,
    rng: &mut R,
) -> Result<f64> {
    let prior_var_sum: f64 = local.iter().map(|t| 2.0 * t / global_current).sum();
    let shape = prior_shape + tail_shape * local.len() as f64;
    let rate = prior_rate + 0.5 * tail_shape * prior_var_sum;
    sample_gamma(shape, rate, rng)
}

/// Step 7: VAR-block global scale.
pub fn draw_xi_a<R: Rng + ?Sized>(
    shrink: &ShrinkageState,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    draw_global_scale(
        &shrink.var_local,
        shrink.var_global,
        hyper.shape_local_var,
        hyper.global_shape_var,
        hyper.global_rate_var,
        rng,
    )
}

/// Step 9: loading-block global scale.
pub fn draw_xi_lambda<R: Rng + ?Sized>(
    shrink: &ShrinkageState,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    draw_global_scale(
        &shrink.loading_local,
        shrink.loading_global,
        hyper.shape_local_loading,
        hyper.global_shape_loading,
        hyper.global_rate_loading,
        rng,
    )
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

/// Resumable sampler state. Construct, `advance`, and `take_output`; the
/// full state (including the RNG) serializes through `chainio` so an
/// interrupted run resumes bit-identically.
pub struct ChainRunner {
    pub(crate) data: PanelData,
    pub(crate) dims: ModelDims,
    pub(crate) hyper: Hyperparams,
    pub(crate) config: ChainConfig,
    pub(crate) completed: usize,
    pub(crate) params: FavarParams,
    pub(crate) shrink: ShrinkageState,
    pub(crate) factors: DMatrix<f64>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) draws: Vec<FavarParams>,
    pub(crate) shrinkage_draws: Vec<ShrinkageState>,
    pub(crate) factor_paths: Option<Vec<DMatrix<f64>>>,
    pub(crate) diagnostics: Diagnostics,
}

impl ChainRunner {
    pub fn new(
        data: PanelData,
        dims: ModelDims,
        hyper: Hyperparams,
        config: ChainConfig,
    ) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        hyper.validate(dims.n_vars())?;
        data.validate()?;
        if data.regional.ncols() != dims.n_regions
            || data.aggregates.ncols() != dims.n_aggregates
            || data.n_periods() != dims.n_periods
        {
            return Err(FavarError::Config(
                "panel shape does not match model dimensions".into(),
            ));
        }
        // Constant series break both scaling and the shrinkage conditionals;
        // reject before sampling starts.
        for c in 0..data.regional.ncols() {
            let col = data.regional.column(c);
            let first = col[0];
            if col.iter().all(|v| *v == first) {
                return Err(FavarError::Data(format!(
                    "regional series {c} is constant"
                )));
            }
        }
        let with_proxy = data.proxy.is_some();
        let params = FavarParams::zeros(&dims, with_proxy);
        let shrink = ShrinkageState::ones(
            dims.n_var_coeffs() + if with_proxy { dims.n_vars() } else { 0 },
            dims.n_free_loadings(),
        );
        // The identification makes the first S regional series the factors
        // plus noise; they are the natural starting path.
        let factors = DMatrix::from_fn(dims.n_periods, dims.n_factors, |i, j| {
            data.regional[(i, j)]
        });
        let rng = master_rng(config.seed);
        Ok(ChainRunner {
            data,
            dims,
            hyper,
            config,
            completed: 0,
            params,
            shrink,
            factors,
            rng,
            draws: Vec::with_capacity(config.n_stored()),
            shrinkage_draws: Vec::with_capacity(config.n_stored()),
            factor_paths: config.store_factors.then(Vec::new),
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_complete(&self) -> bool {
        self.completed >= self.config.n_draws
    }

    /// Runs up to `max_iters` further sweeps (stopping at the configured
    /// total). Numerical failures report the iteration and step.
    pub fn advance(&mut self, max_iters: usize) -> Result<()> {
        let target = self.config.n_draws.min(self.completed.saturating_add(max_iters));
        while self.completed < target {
            let iter = self.completed + 1;
            self.sweep(iter as u64)
                .map_err(|e| annotate_iteration(e, iter))?;
            self.completed = iter;
            if iter > self.config.n_burn && (iter - self.config.n_burn - 1).is_multiple_of(self.config.thin)
            {
                self.params.check_invariants()?;
                self.shrink.check_invariants()?;
                self.draws.push(self.params.clone());
                self.shrinkage_draws.push(self.shrink.clone());
                if let Some(paths) = &mut self.factor_paths {
                    paths.push(self.factors.clone());
                }
            }
        }
        Ok(())
    }

    fn sweep(&mut self, iter: u64) -> Result<()> {
        let q = self.dims.lag_order;
        let with_proxy = self.data.proxy.is_some();
        let seed = self.config.seed;
        let mut clock = StepClock::new(&mut self.diagnostics);

        // (1) VAR coefficients and proxy impacts.
        let (y, x) = build_var_data(&self.factors, &self.data, q, with_proxy);
        let (a, zeta) = draw_var_coeffs(
            &y,
            &x,
            &self.params.innov_cov,
            &self.shrink,
            with_proxy,
            q,
            &mut self.rng,
        )
        .map_err(|e| annotate_step(e, 0))?;
        self.params.var_coeffs = a;
        self.params.proxy_coeffs = zeta;
        clock.lap(0);

        // (2) Factor path.
        self.factors = draw_factors(&self.params, &self.data, q, &mut self.rng)
            .map_err(|e| annotate_step(e, 1))?;
        clock.lap(1);

        // (3) Innovation covariance.
        let (y, x) = build_var_data(&self.factors, &self.data, q, with_proxy);
        let coeffs = stack_coeffs(&self.params);
        let m = self.dims.n_vars();
        let p = x.ncols();
        let mut b = DMatrix::zeros(m, p);
        for c in 0..p {
            for i in 0..m {
                b[(i, c)] = coeffs[c * m + i];
            }
        }
        let residuals = &y - &x * b.transpose();
        self.params.innov_cov = draw_sigma_u(&residuals, &self.hyper, &mut self.rng)
            .map_err(|e| annotate_step(e, 2))?;
        clock.lap(2);

        // (4) Loadings.
        let (lf, lm) = draw_loadings(
            &self.data,
            &self.factors,
            &self.params,
            &self.shrink,
            q,
            seed,
            iter,
        )
        .map_err(|e| annotate_step(e, 3))?;
        self.params.factor_loadings = lf;
        self.params.agg_loadings = lm;
        clock.lap(3);

        // (5) Measurement variances.
        self.params.meas_var = draw_meas_var(
            &self.data,
            &self.factors,
            &self.params,
            &self.hyper,
            q,
            seed,
            iter,
        )
        .map_err(|e| annotate_step(e, 4))?;
        clock.lap(4);

        // (6)/(7) VAR-block shrinkage: draw the prior variances, re-express
        // them as local scales around the refreshed global scale.
        let g_var = draw_tau_a(&self.params, &self.shrink, &self.hyper, &mut self.rng)
            .map_err(|e| annotate_step(e, 5))?;
        self.shrink.var_local = &g_var * (self.shrink.var_global / 2.0);
        clock.lap(5);
        let xi_a = draw_xi_a(&self.shrink, &self.hyper, &mut self.rng)
            .map_err(|e| annotate_step(e, 6))?;
        self.shrink.var_local = &g_var * (xi_a / 2.0);
        self.shrink.var_global = xi_a;
        clock.lap(6);

        // (8)/(9) Loading-block shrinkage.
        let g_load = draw_tau_lambda(&self.params, &self.shrink, &self.hyper, &mut self.rng)
            .map_err(|e| annotate_step(e, 7))?;
        self.shrink.loading_local = &g_load * (self.shrink.loading_global / 2.0);
        clock.lap(7);
        let xi_l = draw_xi_lambda(&self.shrink, &self.hyper, &mut self.rng)
            .map_err(|e| annotate_step(e, 8))?;
        self.shrink.loading_local = &g_load * (xi_l / 2.0);
        self.shrink.loading_global = xi_l;
        clock.lap(8);

        self.diagnostics.n_iterations += 1;
        Ok(())
    }

    pub fn take_output(self) -> ChainOutput {
        ChainOutput {
            config: self.config,
            draws: self.draws,
            shrinkage_draws: self.shrinkage_draws,
            factor_paths: self.factor_paths,
            diagnostics: self.diagnostics,
        }
    }
}

struct StepClock<'a> {
    diagnostics: &'a mut Diagnostics,
    last: Instant,
}

impl<'a> StepClock<'a> {
    fn new(diagnostics: &'a mut Diagnostics) -> Self {
        StepClock {
            diagnostics,
            last: Instant::now(),
        }
    }

    fn lap(&mut self, step: usize) {
        let now = Instant::now();
        self.diagnostics.step_nanos[step] += now.duration_since(self.last).as_nanos() as u64;
        self.last = now;
    }
}

fn annotate_step(e: FavarError, step: usize) -> FavarError {
    match e {
        FavarError::Numerical(msg) => {
            FavarError::Numerical(format!("step {}: {}", STEP_NAMES[step], msg))
        }
        FavarError::Parameter(msg) => {
            FavarError::Parameter(format!("step {}: {}", STEP_NAMES[step], msg))
        }
        other => other,
    }
}

fn annotate_iteration(e: FavarError, iter: usize) -> FavarError {
    match e {
        FavarError::Numerical(msg) => FavarError::Numerical(format!("iteration {iter}, {msg}")),
        FavarError::Parameter(msg) => FavarError::Parameter(format!("iteration {iter}, {msg}")),
        other => other,
    }
}

/// Stacked (y, x) regression data over the effective sample: y rows are
/// (F[t], M[t]); x rows stack Q lags plus the proxy column when present.
pub fn build_var_data(
    factors: &DMatrix<f64>,
    data: &PanelData,
    lag_order: usize,
    with_proxy: bool,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = lag_order;
    let t_total = data.n_periods();
    let t_eff = t_total - q;
    let s = factors.ncols();
    let k = data.aggregates.ncols();
    let m = s + k;
    let y = DMatrix::from_fn(t_eff, m, |i, j| {
        let r = q + i;
        if j < s {
            factors[(r, j)]
        } else {
            data.aggregates[(r, j - s)]
        }
    });
    let p = q * m + usize::from(with_proxy);
    let x = DMatrix::from_fn(t_eff, p, |i, j| {
        let r = q + i;
        if j < q * m {
            let lag = j / m;
            let v = j % m;
            if v < s {
                factors[(r - 1 - lag, v)]
            } else {
                data.aggregates[(r - 1 - lag, v - s)]
            }
        } else {
            data.proxy.as_ref().map_or(0.0, |z| z[r])
        }
    });
    (y, x)
}

/// Runs a complete chain.
pub fn run_chain(
    data: PanelData,
    dims: ModelDims,
    hyper: Hyperparams,
    config: ChainConfig,
) -> Result<ChainOutput> {
    let mut runner = ChainRunner::new(data, dims, hyper, config)?;
    runner.advance(config.n_draws)?;
    Ok(runner.take_output())
}
