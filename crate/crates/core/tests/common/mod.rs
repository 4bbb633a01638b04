//! Shared oracle code for the integration suites. Everything here computes
//! expected values by routes independent of the library implementation:
//! joint-Gaussian conditioning by direct covariance construction, and GIG
//! moments by quadrature of the Bessel-K integral representation.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};

use favar::model::{FavarParams, PanelData};
use favar::state_space::StateSpaceSystem;

const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Brute-force joint-Gaussian conditioning for a generic state-space system
// ---------------------------------------------------------------------------

pub struct BruteForceResult {
    /// Smoothed (all-data) state means per step.
    pub smoothed_mean: Vec<DVector<f64>>,
    /// Smoothed state covariances per step.
    pub smoothed_cov: Vec<DMatrix<f64>>,
    /// Filtered means per step (conditioning on observations up to and
    /// including that step).
    pub filtered_mean: Vec<DVector<f64>>,
    /// Exact joint log density of all observations.
    pub loglik: f64,
}

/// Builds the joint Gaussian of (states, observations) by forward
/// accumulation of cross-covariance blocks and conditions it directly.
pub fn brute_force_condition(sys: &StateSpaceSystem) -> BruteForceResult {
    let d = sys.state_dim();
    let n_steps = sys.steps.len();

    // State means and cross-covariances C[i][j] = Cov(s_i, s_j), j >= i.
    let mut mean = vec![DVector::zeros(d); n_steps];
    let mut cov = vec![vec![DMatrix::zeros(d, d); n_steps]; n_steps];

    mean[0] = sys.init_mean.clone();
    cov[0][0] = sys.init_cov.clone();
    for t in 1..n_steps {
        let c = sys.steps[t].trans_intercept.as_ref().unwrap();
        mean[t] = &sys.trans * &mean[t - 1] + c;
        cov[t][t] = &sys.trans * &cov[t - 1][t - 1] * sys.trans.transpose() + &sys.trans_noise;
        for i in 0..t {
            cov[i][t] = &cov[i][t - 1] * sys.trans.transpose();
        }
    }

    // Stack observation rows: value = z' s_t + offset + e.
    struct Row {
        step: usize,
        z: DVector<f64>,
        offset: f64,
        value: f64,
        noise: f64,
    }
    let mut rows = Vec::new();
    for (t, step) in sys.steps.iter().enumerate() {
        for r in 0..step.obs.len() {
            rows.push(Row {
                step: t,
                z: step.obs.loading.row(r).transpose(),
                offset: step.obs.offset[r],
                value: step.obs.value[r],
                noise: step.obs.noise_diag[r],
            });
        }
    }
    let n_obs = rows.len();

    let state_cov = |i: usize, j: usize| -> DMatrix<f64> {
        if i <= j {
            cov[i][j].clone()
        } else {
            cov[j][i].transpose()
        }
    };

    // Observation covariance and state-observation cross blocks.
    let mut obs_cov = DMatrix::zeros(n_obs, n_obs);
    let mut obs_mean = DVector::zeros(n_obs);
    for (a, ra) in rows.iter().enumerate() {
        obs_mean[a] = ra.z.dot(&mean[ra.step]) + ra.offset;
        for (b, rb) in rows.iter().enumerate() {
            let mut v = (ra.z.transpose() * state_cov(ra.step, rb.step) * &rb.z)[(0, 0)];
            if a == b {
                v += ra.noise;
            }
            obs_cov[(a, b)] = v;
        }
    }
    let mut cross = vec![DMatrix::zeros(d, n_obs); n_steps]; // Cov(s_t, obs)
    for t in 0..n_steps {
        for (b, rb) in rows.iter().enumerate() {
            let col = state_cov(t, rb.step) * &rb.z;
            cross[t].set_column(b, &col);
        }
    }

    let values = DVector::from_fn(n_obs, |i, _| rows[i].value);
    let resid = &values - &obs_mean;

    let chol = obs_cov
        .clone()
        .cholesky()
        .expect("oracle: observation covariance must be PD");
    let solve_resid = chol.solve(&resid);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let loglik = -0.5 * (n_obs as f64 * LN_2PI + logdet + resid.dot(&solve_resid));

    let mut smoothed_mean = Vec::with_capacity(n_steps);
    let mut smoothed_cov = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        smoothed_mean.push(&mean[t] + &cross[t] * &solve_resid);
        let gain = chol.solve(&cross[t].transpose());
        smoothed_cov.push(&cov[t][t] - &cross[t] * gain);
    }

    // Filtered means: condition on observation prefixes.
    let mut filtered_mean = Vec::with_capacity(n_steps);
    let mut upto = 0usize;
    for t in 0..n_steps {
        upto += sys.steps[t].obs.len();
        if upto == 0 {
            filtered_mean.push(mean[t].clone());
            continue;
        }
        let oc = obs_cov.view((0, 0), (upto, upto)).clone_owned();
        let r = resid.rows(0, upto).clone_owned();
        let x = cross[t].columns(0, upto).clone_owned();
        let chol_p = oc.cholesky().expect("oracle: prefix covariance must be PD");
        filtered_mean.push(&mean[t] + &x * chol_p.solve(&r));
    }

    BruteForceResult {
        smoothed_mean,
        smoothed_cov,
        filtered_mean,
        loglik,
    }
}

// ---------------------------------------------------------------------------
// Model-level oracle: joint distribution of the panel built directly from
// the measurement and state equations, bypassing the system assembly.
// ---------------------------------------------------------------------------

pub struct FavarOracle {
    pub loglik: f64,
    /// Smoothed factor means, rows 0..T-1.
    pub factor_mean: DMatrix<f64>,
    /// Smoothed factor variances per (row, factor).
    pub factor_var: DMatrix<f64>,
}

/// Builds the affine representation of every F[r], M[r], H[r] over the basis
/// (initial factor block, VAR innovations) and conditions on the observed
/// panel. The first Q rows of aggregates enter as constants; regional rows
/// 0..Q-1 are outside the likelihood.
pub fn favar_joint_oracle(params: &FavarParams, data: &PanelData, q: usize) -> FavarOracle {
    let s = params.n_factors();
    let k = params.n_aggregates();
    let m = s + k;
    let t_total = data.n_periods();
    let n_regions = params.factor_loadings.nrows();
    let init_var = favar::state_space::INIT_STATE_VAR;

    // Basis: (Q+1)S initial factor components (F_{Q-1}, ..., F_{-1}),
    // then m-dimensional innovations u_r for r = Q..T-1.
    let n_u = t_total - q;
    let basis_dim = (q + 1) * s + n_u * m;
    let u_off = (q + 1) * s;

    // Basis covariance.
    let mut basis_cov = DMatrix::zeros(basis_dim, basis_dim);
    for i in 0..(q + 1) * s {
        basis_cov[(i, i)] = init_var;
    }
    for t in 0..n_u {
        basis_cov
            .view_mut((u_off + t * m, u_off + t * m), (m, m))
            .copy_from(&params.innov_cov);
    }

    // Affine representation: coeff (rows x basis_dim) + constant.
    #[derive(Clone)]
    struct Affine {
        coeff: DMatrix<f64>,
        cons: DVector<f64>,
    }
    let constant = |v: DVector<f64>, basis_dim: usize| Affine {
        coeff: DMatrix::zeros(v.len(), basis_dim),
        cons: v,
    };

    // F_r for r < Q comes from the initial block: component (q-1-r).
    let mut f_rep: Vec<Affine> = Vec::with_capacity(t_total);
    let mut m_rep: Vec<Affine> = Vec::with_capacity(t_total);
    for r in 0..q {
        let mut coeff = DMatrix::zeros(s, basis_dim);
        let block = q - 1 - r;
        for j in 0..s {
            coeff[(j, block * s + j)] = 1.0;
        }
        f_rep.push(Affine {
            coeff,
            cons: DVector::zeros(s),
        });
        m_rep.push(constant(data.aggregates.row(r).transpose(), basis_dim));
    }
    for r in q..t_total {
        let mut coeff = DMatrix::zeros(m, basis_dim);
        let mut cons = DVector::zeros(m);
        for lag in 0..q {
            let rl = r - 1 - lag;
            let a_f = params.var_coeffs.view((0, lag * m), (m, s));
            let a_m = params.var_coeffs.view((0, lag * m + s), (m, k));
            coeff += a_f * &f_rep[rl].coeff;
            cons += a_f * &f_rep[rl].cons;
            coeff += a_m * &m_rep[rl].coeff;
            cons += a_m * &m_rep[rl].cons;
        }
        if let (Some(zeta), Some(z)) = (&params.proxy_coeffs, &data.proxy) {
            cons += zeta * z[r];
        }
        let idx = u_off + (r - q) * m;
        for i in 0..m {
            coeff[(i, idx + i)] += 1.0;
        }
        f_rep.push(Affine {
            coeff: coeff.rows(0, s).clone_owned(),
            cons: cons.rows(0, s).clone_owned(),
        });
        m_rep.push(Affine {
            coeff: coeff.rows(s, k).clone_owned(),
            cons: cons.rows(s, k).clone_owned(),
        });
    }

    // Observation rows: M_r (exact) then H_r (noise sigma2) for r = Q..T-1.
    struct Row {
        coeff: DVector<f64>,
        cons: f64,
        value: f64,
        noise: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for r in q..t_total {
        for i in 0..k {
            rows.push(Row {
                coeff: m_rep[r].coeff.row(i).transpose(),
                cons: m_rep[r].cons[i],
                value: data.aggregates[(r, i)],
                noise: 0.0,
            });
        }
        for i in 0..n_regions {
            let coeff = (params.factor_loadings.row(i) * &f_rep[r].coeff
                + params.agg_loadings.row(i) * &m_rep[r].coeff)
                .transpose();
            let cons = params.factor_loadings.row(i).transpose().dot(&f_rep[r].cons)
                + params.agg_loadings.row(i).transpose().dot(&m_rep[r].cons);
            rows.push(Row {
                coeff,
                cons,
                value: data.regional[(r, i)],
                noise: params.meas_var[i],
            });
        }
    }

    let n_obs = rows.len();
    let mut obs_cov = DMatrix::zeros(n_obs, n_obs);
    let mut obs_mean = DVector::zeros(n_obs);
    let cov_coeffs: Vec<DVector<f64>> =
        rows.iter().map(|r| &basis_cov * &r.coeff).collect();
    for (a, ra) in rows.iter().enumerate() {
        obs_mean[a] = ra.cons;
        for (b, rb) in rows.iter().enumerate() {
            let mut v = ra.coeff.dot(&cov_coeffs[b]);
            if a == b {
                v += rb.noise;
            }
            obs_cov[(a, b)] = v;
        }
    }
    let values = DVector::from_fn(n_obs, |i, _| rows[i].value);
    let resid = &values - &obs_mean;
    let chol = obs_cov
        .cholesky()
        .expect("oracle: panel covariance must be PD");
    let solve_resid = chol.solve(&resid);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let loglik = -0.5 * (n_obs as f64 * LN_2PI + logdet + resid.dot(&solve_resid));

    let mut factor_mean = DMatrix::zeros(t_total, s);
    let mut factor_var = DMatrix::zeros(t_total, s);
    for r in 0..t_total {
        for j in 0..s {
            let coeff = f_rep[r].coeff.row(j).transpose();
            let bc = &basis_cov * &coeff;
            let cross = DVector::from_fn(n_obs, |i, _| rows[i].coeff.dot(&bc));
            factor_mean[(r, j)] = f_rep[r].cons[j] + cross.dot(&solve_resid);
            factor_var[(r, j)] = coeff.dot(&bc) - cross.dot(&chol.solve(&cross));
        }
    }

    FavarOracle {
        loglik,
        factor_mean,
        factor_var,
    }
}

// ---------------------------------------------------------------------------
// Bessel-K by quadrature and GIG moments
// ---------------------------------------------------------------------------

/// Scaled modified Bessel function e^x K_nu(x), evaluated from the integral
/// representation with the trapezoid rule. The integrand is even in t with
/// double-exponential decay, so uniform trapezoid converges superalgebraically.
pub fn kv_scaled(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    let nu = nu.abs();
    // Integrate e^{-x(cosh t - 1)} cosh(nu t) over [0, t_max].
    let t_max = ((1.0 + (760.0 + 60.0 * nu) / x).ln() * 2.0).clamp(4.0, 60.0);
    // acosh(1+y) <= ln(2(1+y)); the bound above is generous.
    let n = 1 << 17;
    let h = t_max / n as f64;
    let f = |t: f64| (-x * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
    let mut sum = 0.5 * f(0.0) + 0.5 * f(t_max);
    for i in 1..n {
        sum += f(i as f64 * h);
    }
    sum * h
}

/// k-th moment of GIG(p, chi, psi) via the Bessel-ratio formula
/// E[X^k] = (chi/psi)^(k/2) K_{p+k}(omega) / K_p(omega), omega = sqrt(chi psi).
pub fn gig_moment(p: f64, chi: f64, psi: f64, k: i32) -> f64 {
    assert!(chi > 0.0 && psi > 0.0);
    let omega = (chi * psi).sqrt();
    (chi / psi).powf(k as f64 / 2.0) * kv_scaled(p + k as f64, omega) / kv_scaled(p, omega)
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Deterministic toy parameter set with the identification blocks in place.
pub fn toy_params(
    n_regions: usize,
    n_factors: usize,
    n_aggregates: usize,
    lag_order: usize,
    with_proxy: bool,
    seed: u64,
) -> FavarParams {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = n_factors + n_aggregates;
    let mut factor_loadings = DMatrix::zeros(n_regions, n_factors);
    for i in 0..n_factors {
        factor_loadings[(i, i)] = 1.0;
    }
    for r in n_factors..n_regions {
        for j in 0..n_factors {
            factor_loadings[(r, j)] = rng.random::<f64>() * 2.0 - 1.0;
        }
    }
    let mut agg_loadings = DMatrix::zeros(n_regions, n_aggregates);
    for r in n_factors..n_regions {
        for j in 0..n_aggregates {
            agg_loadings[(r, j)] = 0.5 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    let meas_var = DVector::from_fn(n_regions, |_, _| 0.3 + 0.7 * rng.random::<f64>());
    let mut var_coeffs =
        DMatrix::from_fn(m, lag_order * m, |_, _| 0.5 * (rng.random::<f64>() - 0.5));
    // keep it stable: damp until the companion spectral radius is below 0.9
    loop {
        let dims = favar::model::ModelDims::new(
            n_regions,
            n_factors,
            n_aggregates,
            lag_order,
            lag_order + 2,
            72,
        )
        .unwrap();
        let comp = favar::model::build_companion(&var_coeffs, &dims).unwrap();
        let rho = favar::model::spectral_radius(&comp.phi);
        if rho < 0.9 {
            break;
        }
        var_coeffs *= 0.9 / (rho + 0.05);
    }
    let w = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
    let innov_cov = &w * w.transpose() / m as f64 + DMatrix::identity(m, m) * 0.4;
    let proxy_coeffs =
        with_proxy.then(|| DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5));
    FavarParams {
        factor_loadings,
        agg_loadings,
        meas_var,
        var_coeffs,
        proxy_coeffs,
        innov_cov,
    }
}

/// Simulates a panel from `params` (pure forward simulation, zero initial
/// lags, discarding a burn-in stretch), independent of the library's
/// synthetic generator.
pub fn toy_panel(
    params: &FavarParams,
    lag_order: usize,
    n_periods: usize,
    with_proxy: bool,
    seed: u64,
) -> (PanelData, DMatrix<f64>) {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let s = params.n_factors();
    let k = params.n_aggregates();
    let m = s + k;
    let n_regions = params.factor_loadings.nrows();
    let burn = 50;
    let total = n_periods + burn;
    let innov_factor = params.innov_cov.clone().cholesky().unwrap().l();

    let mut y = DMatrix::zeros(total, m);
    let mut z_all = DVector::zeros(total);
    for r in 0..total {
        let mut mean = DVector::zeros(m);
        for lag in 0..lag_order {
            if r > lag {
                let prev = y.row(r - 1 - lag).transpose();
                mean += params.var_coeffs.view((0, lag * m), (m, m)) * prev;
            }
        }
        z_all[r] = rng.sample::<f64, _>(StandardNormal);
        if let Some(zeta) = &params.proxy_coeffs {
            mean += zeta * z_all[r];
        }
        let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = mean + &innov_factor * eps;
        y.row_mut(r).copy_from(&draw.transpose());
    }

    let mut regional = DMatrix::zeros(n_periods, n_regions);
    let mut aggregates = DMatrix::zeros(n_periods, k);
    let mut proxy = DVector::zeros(n_periods);
    let mut factors = DMatrix::zeros(n_periods, s);
    for r in 0..n_periods {
        let src = r + burn;
        let f = y.row(src).columns(0, s).transpose();
        let mm = y.row(src).columns(s, k).transpose();
        factors.row_mut(r).copy_from(&f.transpose());
        aggregates.row_mut(r).copy_from(&mm.transpose());
        proxy[r] = z_all[src];
        let noise = DVector::from_fn(n_regions, |i, _| {
            params.meas_var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let h = &params.factor_loadings * &f + &params.agg_loadings * &mm + noise;
        regional.row_mut(r).copy_from(&h.transpose());
    }
    let panel = PanelData {
        regional,
        aggregates,
        proxy: with_proxy.then_some(proxy),
        time_index: (0..n_periods).map(|i| format!("2000-{:02}", i % 12 + 1)).collect(),
    };
    (panel, factors)
}
