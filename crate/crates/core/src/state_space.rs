//! Linear-Gaussian state space: Kalman filtering, forward-filtering
//! backward-sampling, and the integrated likelihood with the latent factors
//! marginalized out.
//!
//! The model is mapped onto a factor-only state. With y[t] = (F[t], M[t])
//! following the VAR and M observed, the factor block conditional on the
//! aggregate innovations gives
//!
//! ```text
//! F[t] = (AF - G*AM) x[t] + (zF - G*zM) z[t] + G*M[t] + eta[t]
//! eta[t] ~ N(0, SigmaFF - G*SigmaMF),   G = SigmaFM * SigmaMM^-1
//! ```
//!
//! so the state beta[t] = (F[t], ..., F[t-Q]) evolves on known data only,
//! the M[t] equation becomes a K-row observation on lagged factor blocks
//! (whitened by the Cholesky factor of SigmaMM), and each regional row is a
//! scalar observation H[r,t] - LM[r]*M[t] = LF[r]*F[t] + eps. All observation
//! noise is diagonal after whitening, so rows are conditioned one at a time
//! with Joseph-form covariance updates; no singular innovation covariance
//! ever arises. The likelihood conditions on the first Q periods of the
//! panel: rows 0..Q-1 enter only as initial VAR lags.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::MvnFactor;
use crate::error::{FavarError, Result};
use crate::model::{FavarParams, PanelData};

const LN_2PI: f64 = 1.8378770664093453;

/// Diffuse-but-proper initial state variance for the factor block.
pub const INIT_STATE_VAR: f64 = 10.0;

/// One observation block; rows are conditioned sequentially, which requires
/// the noise to be diagonal (zeros allowed).
#[derive(Debug, Clone)]
pub struct ObsBlock {
    /// n x d loading matrix.
    pub loading: DMatrix<f64>,
    /// Known additive offsets, length n.
    pub offset: DVector<f64>,
    /// Observed values, length n.
    pub value: DVector<f64>,
    /// Diagonal noise variances, length n, each >= 0.
    pub noise_diag: DVector<f64>,
}

impl ObsBlock {
    pub fn empty(state_dim: usize) -> Self {
        ObsBlock {
            loading: DMatrix::zeros(0, state_dim),
            offset: DVector::zeros(0),
            value: DVector::zeros(0),
            noise_diag: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One filter step: an optional transition (with per-step intercept)
/// followed by an observation block. The first step carries no transition;
/// its observations condition the initial state directly.
#[derive(Debug, Clone)]
pub struct SsStep {
    pub trans_intercept: Option<DVector<f64>>,
    pub obs: ObsBlock,
    /// Constant log-density correction for this step. Nonzero when the
    /// observation rows are a whitened linear transform of the raw data, in
    /// which case it carries the Jacobian of that transform.
    pub loglik_offset: f64,
}

/// A complete linear-Gaussian system with shared transition matrices.
#[derive(Debug, Clone)]
pub struct StateSpaceSystem {
    pub trans: DMatrix<f64>,
    pub trans_noise: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub steps: Vec<SsStep>,
}

impl StateSpaceSystem {
    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        if self.trans.nrows() != d
            || self.trans.ncols() != d
            || self.trans_noise.nrows() != d
            || self.trans_noise.ncols() != d
            || self.init_cov.nrows() != d
            || self.init_cov.ncols() != d
        {
            return Err(FavarError::Config("state-space dimension mismatch".into()));
        }
        if self.steps.is_empty() {
            return Err(FavarError::Config("state space has no steps".into()));
        }
        if self.steps[0].trans_intercept.is_some() {
            return Err(FavarError::Config(
                "first step must not carry a transition".into(),
            ));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 && step.trans_intercept.is_none() {
                return Err(FavarError::Config(format!(
                    "step {i} is missing its transition intercept"
                )));
            }
            let n = step.obs.len();
            let ob = &step.obs;
            if ob.loading.nrows() != n
                || ob.loading.ncols() != d
                || ob.offset.len() != n
                || ob.noise_diag.len() != n
            {
                return Err(FavarError::Config(format!(
                    "observation block shapes inconsistent at step {i}"
                )));
            }
            let finite = ob.value.iter().all(|v| v.is_finite())
                && ob.offset.iter().all(|v| v.is_finite())
                && ob.loading.iter().all(|v| v.is_finite());
            if !finite {
                return Err(FavarError::Data(format!(
                    "non-finite observation input at step {i}"
                )));
            }
            if ob.noise_diag.iter().any(|v| *v < 0.0) {
                return Err(FavarError::Config(format!(
                    "negative observation noise at step {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Filtered and one-step-predicted moments per step, plus the accumulated
/// Gaussian log-likelihood of all observations.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Conditions (mean, cov) on one scalar observation `value = z'x + offset + e`,
/// `e ~ N(0, r)`, accumulating its predictive log density. Joseph-form update.
fn scalar_update(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    z: &DVector<f64>,
    offset: f64,
    value: f64,
    r: f64,
    loglik: &mut f64,
) -> Result<()> {
    let d = mean.len();
    let pz = &*cov * z;
    let f = z.dot(&pz) + r;
    if !(f > 0.0) || !f.is_finite() {
        return Err(FavarError::Numerical(format!(
            "innovation variance lost positivity (f = {f:.3e})"
        )));
    }
    let v = value - offset - z.dot(mean);
    *loglik += -0.5 * (LN_2PI + f.ln() + v * v / f);
    let k = pz / f;

    // mean update
    mean.axpy(v, &k, 1.0);

    // cov = (I - k z') cov (I - k z')' + r k k'
    let mut kz = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            kz[(i, j)] = ((i == j) as u8 as f64) - k[i] * z[j];
        }
    }
    let tmp = &kz * &*cov;
    let mut new_cov = &tmp * kz.transpose();
    for i in 0..d {
        for j in 0..d {
            new_cov[(i, j)] += r * k[i] * k[j];
        }
    }
    symmetrize(&mut new_cov);
    *cov = new_cov;
    Ok(())
}

/// Full forward pass. Exact Gaussian log density of every observation row is
/// accumulated via the scalar prediction-error decomposition.
pub fn kalman_filter(sys: &StateSpaceSystem) -> Result<FilterOutput> {
    sys.validate()?;
    let n = sys.steps.len();
    let mut out = FilterOutput {
        pred_mean: Vec::with_capacity(n),
        pred_cov: Vec::with_capacity(n),
        filt_mean: Vec::with_capacity(n),
        filt_cov: Vec::with_capacity(n),
        loglik: 0.0,
    };
    let mut mean = sys.init_mean.clone();
    let mut cov = sys.init_cov.clone();
    let d = sys.state_dim();
    let mut z = DVector::zeros(d);

    for step in &sys.steps {
        out.loglik += step.loglik_offset;
        if let Some(intercept) = &step.trans_intercept {
            mean = &sys.trans * &mean + intercept;
            cov = &sys.trans * cov * sys.trans.transpose() + &sys.trans_noise;
            symmetrize(&mut cov);
        }
        out.pred_mean.push(mean.clone());
        out.pred_cov.push(cov.clone());

        for row in 0..step.obs.len() {
            for c in 0..d {
                z[c] = step.obs.loading[(row, c)];
            }
            scalar_update(
                &mut mean,
                &mut cov,
                &z,
                step.obs.offset[row],
                step.obs.value[row],
                step.obs.noise_diag[row],
                &mut out.loglik,
            )?;
        }
        out.filt_mean.push(mean.clone());
        out.filt_cov.push(cov.clone());
    }
    if !out.loglik.is_finite() {
        return Err(FavarError::Numerical("log-likelihood is not finite".into()));
    }
    Ok(out)
}

/// Exact joint draw of the state path given all observations.
///
/// Backward pass conditions the filtered state at step t on the drawn state
/// at t+1 through the one-step-predicted moments; the predicted covariance
/// is positive definite by construction, and the conditional covariance is
/// sampled through its symmetric square root, which tolerates the exact
/// degeneracies introduced by companion-shift transitions.
pub fn ffbs_draw<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let filt = kalman_filter(sys)?;
    ffbs_draw_with_filter(sys, &filt, rng)
}

/// Backward-sampling pass reusing an existing forward pass.
pub fn ffbs_draw_with_filter<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    filt: &FilterOutput,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let n = sys.steps.len();
    let mut states: Vec<DVector<f64>> = vec![DVector::zeros(0); n];

    let terminal = MvnFactor::from_psd(&filt.filt_cov[n - 1])?;
    states[n - 1] = terminal.sample(&filt.filt_mean[n - 1], rng);

    for t in (0..n - 1).rev() {
        let pred_cov_next = &filt.pred_cov[t + 1];
        let pred_mean_next = &filt.pred_mean[t + 1];
        let chol = pred_cov_next.clone().cholesky().ok_or_else(|| {
            FavarError::Numerical("predicted covariance lost definiteness in backward pass".into())
        })?;
        // J = C T' P^-1 via P^-1 (T C), C symmetric.
        let tc = &sys.trans * &filt.filt_cov[t];
        let gain = chol.solve(&tc).transpose();
        let mean = &filt.filt_mean[t] + &gain * (&states[t + 1] - pred_mean_next);
        let mut cov = &filt.filt_cov[t] - &gain * tc;
        symmetrize(&mut cov);
        let factor = MvnFactor::from_psd(&cov)?;
        states[t] = factor.sample(&mean, rng);
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// FAVAR system assembly
// ---------------------------------------------------------------------------

/// Pieces of the VAR split into factor and aggregate blocks, shared by the
/// system builder and the Gibbs data step.
pub(crate) struct VarSplit {
    pub af_eff: DMatrix<f64>,  // AF - G*AM
    pub zeta_eff: DVector<f64>, // zF - G*zM (zero when no proxy)
    pub gain: DMatrix<f64>,     // G = SigmaFM SigmaMM^-1
    pub cond_cov: DMatrix<f64>, // SigmaFF - G SigmaMF
    pub chol_mm: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

pub(crate) fn split_var(params: &FavarParams) -> Result<VarSplit> {
    let s = params.n_factors();
    let k = params.n_aggregates();
    let qm = params.var_coeffs.ncols();
    let a_f = params.var_coeffs.rows(0, s).clone_owned();
    let a_m = params.var_coeffs.rows(s, k).clone_owned();
    let sig = &params.innov_cov;
    let sig_ff = sig.view((0, 0), (s, s)).clone_owned();
    let sig_fm = sig.view((0, s), (s, k)).clone_owned();
    let sig_mm = sig.view((s, s), (k, k)).clone_owned();

    let (gain, chol_mm) = if k > 0 {
        let chol = sig_mm.clone().cholesky().ok_or_else(|| {
            FavarError::Numerical("aggregate innovation block is not positive definite".into())
        })?;
        // G' solves SigmaMM G' = SigmaMF
        let gain = chol.solve(&sig_fm.transpose()).transpose();
        (gain, Some(chol))
    } else {
        (DMatrix::zeros(s, 0), None)
    };

    let af_eff = &a_f - &gain * &a_m;
    let mut cond_cov = &sig_ff - &gain * sig_fm.transpose();
    symmetrize(&mut cond_cov);

    let zeta_eff = match &params.proxy_coeffs {
        Some(zeta) => {
            let z_f = zeta.rows(0, s).clone_owned();
            let z_m = zeta.rows(s, k).clone_owned();
            z_f - &gain * z_m
        }
        None => DVector::zeros(s),
    };
    debug_assert_eq!(af_eff.ncols(), qm);
    Ok(VarSplit {
        af_eff,
        zeta_eff,
        gain,
        cond_cov,
        chol_mm,
    })
}

/// Builds the filter system for the model at the given parameters.
///
/// States run over data rows Q-1 .. T-1 (0-based); step 0 is the initial
/// factor-lag block. Aggregate rows are attached one step early so that the
/// transition intercept may use the current aggregates.
pub fn assemble_favar_system(
    params: &FavarParams,
    data: &PanelData,
    lag_order: usize,
) -> Result<StateSpaceSystem> {
    let s = params.n_factors();
    let k = params.n_aggregates();
    let m = s + k;
    let q = lag_order;
    let t_total = data.n_periods();
    let n_regions = params.factor_loadings.nrows();
    if t_total <= q {
        return Err(FavarError::Config("panel shorter than lag order".into()));
    }
    if s == 0 {
        return Err(FavarError::Config(
            "state-space assembly requires at least one factor".into(),
        ));
    }
    if params.var_coeffs.ncols() != q * m {
        return Err(FavarError::Config(
            "VAR coefficients do not match the lag order".into(),
        ));
    }
    let split = split_var(params)?;
    let d = (q + 1) * s;

    let mut trans = DMatrix::zeros(d, d);
    for lag in 0..q {
        // factor columns of lag block `lag` act on state block `lag`.
        for i in 0..s {
            for j in 0..s {
                trans[(i, lag * s + j)] = split.af_eff[(i, lag * m + j)];
            }
        }
    }
    for i in 0..(q * s) {
        trans[(s + i, i)] = 1.0;
    }
    let mut trans_noise = DMatrix::zeros(d, d);
    trans_noise
        .view_mut((0, 0), (s, s))
        .copy_from(&split.cond_cov);

    // Constant loading pieces.
    let mut h_loading = DMatrix::zeros(n_regions, d);
    h_loading
        .view_mut((0, 0), (n_regions, s))
        .copy_from(&params.factor_loadings);

    // Whitened aggregate observation loading: rows of L^-1 * AM on the
    // factor-lag blocks 0..Q-1.
    let a_m = params.var_coeffs.rows(s, k).clone_owned();
    let mut m_loading_raw = DMatrix::zeros(k, d);
    for lag in 0..q {
        for i in 0..k {
            for j in 0..s {
                m_loading_raw[(i, lag * s + j)] = a_m[(i, lag * m + j)];
            }
        }
    }
    let m_loading_white = match &split.chol_mm {
        Some(chol) => chol
            .l()
            .solve_lower_triangular(&m_loading_raw)
            .ok_or_else(|| FavarError::Numerical("aggregate whitening failed".into()))?,
        None => m_loading_raw.clone(),
    };

    let zeta = params.proxy_coeffs.as_ref();
    let z_m = zeta.map(|z| z.rows(s, k).clone_owned());

    // Offset of the aggregate equation at data row r: AM over lagged M
    // columns plus the proxy impact.
    let m_offset_raw = |r: usize| -> DVector<f64> {
        let mut off = DVector::zeros(k);
        for lag in 0..q {
            let m_lag = data.aggregates.row(r - 1 - lag);
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += a_m[(i, lag * m + s + j)] * m_lag[j];
                }
                off[i] += acc;
            }
        }
        if let (Some(zm), Some(z)) = (&z_m, &data.proxy) {
            off += zm * z[r];
        }
        off
    };

    let whiten = |v: &DVector<f64>| -> Result<DVector<f64>> {
        match &split.chol_mm {
            Some(chol) => chol
                .l()
                .solve_lower_triangular(v)
                .ok_or_else(|| FavarError::Numerical("aggregate whitening failed".into())),
            None => Ok(v.clone()),
        }
    };

    // Jacobian of the whitening map: observing L^-1 M instead of M shifts
    // the log density by -ln det L.
    let whiten_jacobian: f64 = match &split.chol_mm {
        Some(chol) => -chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => 0.0,
    };

    let m_obs_for_row = |r: usize| -> Result<ObsBlock> {
        Ok(ObsBlock {
            loading: m_loading_white.clone(),
            offset: whiten(&m_offset_raw(r))?,
            value: whiten(&data.aggregates.row(r).transpose())?,
            noise_diag: DVector::from_element(k, 1.0),
        })
    };

    let h_obs_for_row = |r: usize| -> ObsBlock {
        let m_row = data.aggregates.row(r).transpose();
        ObsBlock {
            loading: h_loading.clone(),
            offset: &params.agg_loadings * m_row,
            value: data.regional.row(r).transpose(),
            noise_diag: params.meas_var.clone(),
        }
    };

    let stack = |a: ObsBlock, b: ObsBlock| -> ObsBlock {
        let n = a.len() + b.len();
        let mut loading = DMatrix::zeros(n, d);
        loading.view_mut((0, 0), (a.len(), d)).copy_from(&a.loading);
        loading.view_mut((a.len(), 0), (b.len(), d)).copy_from(&b.loading);
        let cat = |x: &DVector<f64>, y: &DVector<f64>| {
            DVector::from_iterator(n, x.iter().chain(y.iter()).cloned())
        };
        ObsBlock {
            loading,
            offset: cat(&a.offset, &b.offset),
            value: cat(&a.value, &b.value),
            noise_diag: cat(&a.noise_diag, &b.noise_diag),
        }
    };

    // Transition intercept into the state at data row r.
    let intercept_for_row = |r: usize| -> DVector<f64> {
        let mut c = DVector::zeros(d);
        for lag in 0..q {
            let m_lag = data.aggregates.row(r - 1 - lag);
            for i in 0..s {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += split.af_eff[(i, lag * m + s + j)] * m_lag[j];
                }
                c[i] += acc;
            }
        }
        if let Some(z) = &data.proxy {
            if zeta.is_some() {
                for i in 0..s {
                    c[i] += split.zeta_eff[i] * z[r];
                }
            }
        }
        let m_now = data.aggregates.row(r);
        for i in 0..s {
            let mut acc = 0.0;
            for j in 0..k {
                acc += split.gain[(i, j)] * m_now[j];
            }
            c[i] += acc;
        }
        c
    };

    let mut steps = Vec::with_capacity(t_total - q + 1);
    // Step 0: initial block, observes the aggregates of row Q.
    steps.push(SsStep {
        trans_intercept: None,
        obs: m_obs_for_row(q)?,
        loglik_offset: whiten_jacobian,
    });
    for r in q..t_total {
        let (obs, loglik_offset) = if r + 1 < t_total {
            (stack(h_obs_for_row(r), m_obs_for_row(r + 1)?), whiten_jacobian)
        } else {
            (h_obs_for_row(r), 0.0)
        };
        steps.push(SsStep {
            trans_intercept: Some(intercept_for_row(r)),
            obs,
            loglik_offset,
        });
    }

    Ok(StateSpaceSystem {
        trans,
        trans_noise,
        init_mean: DVector::zeros(d),
        init_cov: DMatrix::identity(d, d) * INIT_STATE_VAR,
        steps,
    })
}

/// Draws the factor path F[0..T-1] (T x S) from its joint smoothing
/// distribution. Rows 0..Q-1 come from the sampled initial lag block.
pub fn ffbs_factor_path<R: Rng + ?Sized>(
    params: &FavarParams,
    data: &PanelData,
    lag_order: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let sys = assemble_favar_system(params, data, lag_order)?;
    let states = ffbs_draw(&sys, rng)?;
    Ok(factor_path_from_states(
        &states,
        params.n_factors(),
        lag_order,
        data.n_periods(),
    ))
}

pub(crate) fn factor_path_from_states(
    states: &[DVector<f64>],
    n_factors: usize,
    lag_order: usize,
    n_periods: usize,
) -> DMatrix<f64> {
    let s = n_factors;
    let q = lag_order;
    let mut path = DMatrix::zeros(n_periods, s);
    // states[0] is beta_{Q-1} = (F_{Q-1}, ..., F_{Q-1-Q}); rows 0..Q-1 of the
    // path sit in its trailing blocks.
    for r in 0..q {
        let block = q - 1 - r;
        for j in 0..s {
            path[(r, j)] = states[0][block * s + j];
        }
    }
    for (i, st) in states.iter().enumerate().skip(1) {
        let r = q - 1 + i;
        for j in 0..s {
            path[(r, j)] = st[j];
        }
    }
    path
}

/// Exact log density of the panel given parameters, latent factors
/// integrated out by the filter. Conditions on the first Q rows.
///
/// A factorless parameter set (S = 0) degenerates to independent Gaussian
/// regressions, evaluated directly.
pub fn integrated_loglik(
    params: &FavarParams,
    data: &PanelData,
    lag_order: usize,
) -> Result<f64> {
    if params.n_factors() == 0 {
        return factorless_loglik(params, data, lag_order);
    }
    let sys = assemble_favar_system(params, data, lag_order)?;
    Ok(kalman_filter(&sys)?.loglik)
}

fn factorless_loglik(params: &FavarParams, data: &PanelData, lag_order: usize) -> Result<f64> {
    let k = params.n_aggregates();
    let q = lag_order;
    let t_total = data.n_periods();
    let chol = params
        .innov_cov
        .clone()
        .cholesky()
        .ok_or_else(|| FavarError::Numerical("innovation covariance not SPD".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let mut loglik = 0.0;
    for r in q..t_total {
        let mut mean = DVector::zeros(k);
        for lag in 0..q {
            let m_lag = data.aggregates.row(r - 1 - lag).transpose();
            mean += params.var_coeffs.view((0, lag * k), (k, k)) * m_lag;
        }
        if let (Some(zeta), Some(z)) = (&params.proxy_coeffs, &data.proxy) {
            mean += zeta * z[r];
        }
        let resid = data.aggregates.row(r).transpose() - mean;
        let white = chol.l().solve_lower_triangular(&resid).unwrap();
        loglik += -0.5 * (k as f64 * LN_2PI + log_det + white.norm_squared());

        let m_row = data.aggregates.row(r).transpose();
        let fitted = &params.agg_loadings * m_row;
        for i in 0..params.factor_loadings.nrows() {
            let e = data.regional[(r, i)] - fitted[i];
            let s2 = params.meas_var[i];
            loglik += -0.5 * (LN_2PI + s2.ln() + e * e / s2);
        }
    }
    Ok(loglik)
}
