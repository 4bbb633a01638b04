//! Impulse-response propagation, regional mapping through the loadings,
//! cumulative responses, posterior quantile bands, and Moran's I.

use nalgebra::{DMatrix, DVector};

use crate::error::{FavarError, Result};
use crate::model::CompanionForm;

/// Propagates a contemporaneous impact through the companion dynamics.
///
/// Row h of the result is the response of the VAR variables h periods after
/// impact; row 0 is the impact itself.
pub fn propagate(
    companion: &CompanionForm,
    impact: &DVector<f64>,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    let m = companion.n_vars();
    let mut state = companion.stack_impact(impact)?;
    let mut responses = DMatrix::zeros(horizon + 1, m);
    responses.row_mut(0).copy_from(&impact.transpose());
    for h in 1..=horizon {
        state = &companion.phi * state;
        responses
            .row_mut(h)
            .copy_from(&state.rows(0, m).transpose());
    }
    Ok(responses)
}

/// Maps VAR-variable responses into regional responses through the loadings:
/// region r at horizon h responds by LF[r] . factor_resp + LM[r] . agg_resp.
pub fn regional_irf(
    responses: &DMatrix<f64>,
    factor_loadings: &DMatrix<f64>,
    agg_loadings: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = factor_loadings.ncols();
    let k = agg_loadings.ncols();
    if responses.ncols() != s + k {
        return Err(FavarError::Config(format!(
            "responses have {} columns, loadings expect {}",
            responses.ncols(),
            s + k
        )));
    }
    if factor_loadings.nrows() != agg_loadings.nrows() {
        return Err(FavarError::Config("loading row counts differ".into()));
    }
    let factor_part = responses.columns(0, s) * factor_loadings.transpose();
    let agg_part = responses.columns(s, k) * agg_loadings.transpose();
    Ok(factor_part + agg_part)
}

/// Prefix sums along the horizon, per series.
pub fn cumulate(responses: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = responses.clone();
    for h in 1..out.nrows() {
        for j in 0..out.ncols() {
            out[(h, j)] = out[(h - 1, j)] + responses[(h, j)];
        }
    }
    out
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `(n-1)p + 1` convention). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&prob));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = prob * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Pointwise quantile bands over per-draw response matrices.
#[derive(Debug, Clone)]
pub struct QuantileBands {
    pub q16: DMatrix<f64>,
    pub q50: DMatrix<f64>,
    pub q84: DMatrix<f64>,
}

impl QuantileBands {
    /// Band ordering q16 <= q50 <= q84 at every cell.
    pub fn check_ordering(&self) -> Result<()> {
        for i in 0..self.q50.nrows() {
            for j in 0..self.q50.ncols() {
                if !(self.q16[(i, j)] <= self.q50[(i, j)] && self.q50[(i, j)] <= self.q84[(i, j)])
                {
                    return Err(FavarError::Numerical(format!(
                        "band ordering violated at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Computes 16/50/84 bands cell by cell across draws. All draws must share
/// one shape; at least two draws are required.
pub fn quantile_bands(draws: &[DMatrix<f64>]) -> Result<QuantileBands> {
    if draws.len() < 2 {
        return Err(FavarError::Config(
            "quantile bands need at least two retained draws".into(),
        ));
    }
    let (rows, cols) = draws[0].shape();
    if draws.iter().any(|d| d.shape() != (rows, cols)) {
        return Err(FavarError::Config("draw shapes differ".into()));
    }
    let mut q16 = DMatrix::zeros(rows, cols);
    let mut q50 = DMatrix::zeros(rows, cols);
    let mut q84 = DMatrix::zeros(rows, cols);
    let mut cell = vec![0.0; draws.len()];
    for i in 0..rows {
        for j in 0..cols {
            for (d, m) in draws.iter().enumerate() {
                cell[d] = m[(i, j)];
            }
            cell.sort_by(|a, b| a.partial_cmp(b).unwrap());
            q16[(i, j)] = quantile_sorted(&cell, 0.16);
            q50[(i, j)] = quantile_sorted(&cell, 0.50);
            q84[(i, j)] = quantile_sorted(&cell, 0.84);
        }
    }
    Ok(QuantileBands { q16, q50, q84 })
}

/// Global Moran's I over a spatial weight matrix with zero diagonal:
/// I = (R / sum W) * sum_ij W_ij (v_i - vbar)(v_j - vbar) / sum_i (v_i - vbar)^2.
///
/// With `row_standardize` each row of W is scaled to sum to one first
/// (all-zero rows are left alone).
pub fn morans_i(values: &DVector<f64>, weights: &DMatrix<f64>, row_standardize: bool) -> Result<f64> {
    let n = values.len();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(FavarError::Config(format!(
            "weight matrix is {}x{}, expected {}x{}",
            weights.nrows(),
            weights.ncols(),
            n,
            n
        )));
    }
    if (0..n).any(|i| weights[(i, i)] != 0.0) {
        return Err(FavarError::Config("weight matrix must have a zero diagonal".into()));
    }
    let mut w = weights.clone();
    if row_standardize {
        for i in 0..n {
            let row_sum: f64 = w.row(i).iter().sum();
            if row_sum != 0.0 {
                for j in 0..n {
                    w[(i, j)] /= row_sum;
                }
            }
        }
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return Err(FavarError::Numerical(
            "Moran's I is undefined for constant values".into(),
        ));
    }
    let w_sum: f64 = w.iter().sum();
    if w_sum == 0.0 {
        return Err(FavarError::Config("weight matrix sums to zero".into()));
    }
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            if w[(i, j)] != 0.0 {
                num += w[(i, j)] * (values[i] - mean) * (values[j] - mean);
            }
        }
    }
    Ok((n as f64 / w_sum) * (num / denom))
}

// ---------------------------------------------------------------------------
// Posterior IRF pipeline
// ---------------------------------------------------------------------------

/// Identification scheme applied per posterior draw.
#[derive(Debug, Clone)]
pub enum IdentScheme {
    Proxy,
    Sign(crate::ident::SignRestrictionSpec),
}

/// Banded impulse responses for one family of series, in long-table order:
/// rows = horizons, columns = series.
#[derive(Debug, Clone)]
pub struct BandedIrf {
    pub bands: QuantileBands,
    /// Median of the per-draw cumulative responses.
    pub cum_q50: DMatrix<f64>,
}

/// Full impulse-response summary of a chain.
#[derive(Debug, Clone)]
pub struct IrfSet {
    pub horizon: usize,
    /// All VAR variables: factors first, then aggregates.
    pub macro_irf: BandedIrf,
    /// Factor block only.
    pub factor_irf: BandedIrf,
    /// Regional responses through the loadings.
    pub regional_irf: BandedIrf,
    /// Median cumulative regional response at the final horizon.
    pub cumulative_regional: DVector<f64>,
    pub n_draws_used: usize,
    pub n_excluded: usize,
    /// Total rotation draws spent by the sign search (zero for proxy runs).
    pub sign_tries: u64,
}

impl IrfSet {
    pub fn check_invariants(&self, policy_var: usize) -> crate::error::Result<()> {
        self.macro_irf.bands.check_ordering()?;
        self.factor_irf.bands.check_ordering()?;
        self.regional_irf.bands.check_ordering()?;
        let q50 = self.macro_irf.bands.q50[(0, policy_var)];
        if q50 != crate::ident::POLICY_IMPACT {
            return Err(FavarError::Numerical(format!(
                "policy impact median is {q50}, expected {}",
                crate::ident::POLICY_IMPACT
            )));
        }
        Ok(())
    }
}

const SUBSTREAM_IRF: u64 = 6;

/// Per-draw identification, propagation, regional mapping, and banding.
///
/// Draws whose identification fails (degenerate instrument, or no accepted
/// rotation within the retry budget) are excluded from the quantiles and
/// counted. Sign searches use per-draw substreams, so the result is
/// independent of worker count.
pub fn compute_irf_set(
    draws: &[crate::model::FavarParams],
    dims: &crate::model::ModelDims,
    policy_var: usize,
    scheme: &IdentScheme,
    seed: u64,
) -> crate::error::Result<IrfSet> {
    use crate::ident::{proxy_impact, sign_restricted_impact, SignSearch};
    use rayon::prelude::*;

    if draws.len() < 2 {
        return Err(FavarError::Config(
            "impulse responses need at least two retained draws".into(),
        ));
    }
    let s = dims.n_factors;
    let m = dims.n_vars();
    let h_max = dims.horizon;

    struct DrawIrf {
        macro_resp: DMatrix<f64>,
        tries: u64,
    }

    let per_draw: Vec<Option<DrawIrf>> = draws
        .par_iter()
        .enumerate()
        .map(|(i, params)| -> crate::error::Result<Option<DrawIrf>> {
            let impact = match scheme {
                IdentScheme::Proxy => {
                    let zeta = params.proxy_coeffs.as_ref().ok_or_else(|| {
                        FavarError::Config(
                            "proxy identification requires proxy coefficients in the chain".into(),
                        )
                    })?;
                    match proxy_impact(zeta, policy_var) {
                        Ok(si) => Some((si, 0u64)),
                        Err(FavarError::Numerical(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
                IdentScheme::Sign(spec) => {
                    let mut rng = crate::dist::substream(seed, SUBSTREAM_IRF, 0, i as u64);
                    match sign_restricted_impact(&params.innov_cov, spec, policy_var, &mut rng)? {
                        SignSearch::Accepted { impact, tries } => Some((impact, tries as u64)),
                        SignSearch::Rejected { tries } => {
                            let _ = tries;
                            None
                        }
                    }
                }
            };
            let Some((impact, tries)) = impact else {
                return Ok(None);
            };
            let companion = crate::model::build_companion(&params.var_coeffs, dims)?;
            let macro_resp = propagate(&companion, &impact.impact, h_max)?;
            Ok(Some(DrawIrf { macro_resp, tries }))
        })
        .collect::<crate::error::Result<Vec<_>>>()?;

    let kept: Vec<usize> = (0..draws.len()).filter(|i| per_draw[*i].is_some()).collect();
    let n_excluded = draws.len() - kept.len();
    if kept.len() < 2 {
        return Err(FavarError::Numerical(format!(
            "identification excluded {} of {} draws; not enough to form bands",
            n_excluded,
            draws.len()
        )));
    }
    let sign_tries: u64 = per_draw.iter().flatten().map(|d| d.tries).sum();

    let macro_draws: Vec<DMatrix<f64>> = kept
        .iter()
        .map(|&i| per_draw[i].as_ref().unwrap().macro_resp.clone())
        .collect();
    let macro_cum: Vec<DMatrix<f64>> = macro_draws.iter().map(cumulate).collect();
    let macro_irf = BandedIrf {
        bands: quantile_bands(&macro_draws)?,
        cum_q50: quantile_bands(&macro_cum)?.q50,
    };
    let take_cols = |mats: &[DMatrix<f64>], from: usize, n: usize| -> Vec<DMatrix<f64>> {
        mats.iter().map(|d| d.columns(from, n).clone_owned()).collect()
    };
    let factor_draws = take_cols(&macro_draws, 0, s);
    let factor_cum = take_cols(&macro_cum, 0, s);
    let factor_irf = BandedIrf {
        bands: quantile_bands(&factor_draws)?,
        cum_q50: quantile_bands(&factor_cum)?.q50,
    };

    // Regional responses, region by region to bound memory at full scale.
    let n_regions = dims.n_regions;
    let n_kept = kept.len();
    let mut reg_q16 = DMatrix::zeros(h_max + 1, n_regions);
    let mut reg_q50 = DMatrix::zeros(h_max + 1, n_regions);
    let mut reg_q84 = DMatrix::zeros(h_max + 1, n_regions);
    let mut reg_cum_q50 = DMatrix::zeros(h_max + 1, n_regions);
    let mut cumulative_regional = DVector::zeros(n_regions);

    let results: Vec<(usize, Vec<[f64; 4]>, f64)> = (0..n_regions)
        .into_par_iter()
        .map(|r| {
            let mut resp = DMatrix::zeros(h_max + 1, n_kept);
            for (col, &i) in kept.iter().enumerate() {
                let params = &draws[i];
                let mac = &per_draw[i].as_ref().unwrap().macro_resp;
                for h in 0..=h_max {
                    let mut v = 0.0;
                    for j in 0..s {
                        v += params.factor_loadings[(r, j)] * mac[(h, j)];
                    }
                    for j in 0..m - s {
                        v += params.agg_loadings[(r, j)] * mac[(h, s + j)];
                    }
                    resp[(h, col)] = v;
                }
            }
            let mut rows = Vec::with_capacity(h_max + 1);
            let mut cum = vec![0.0; n_kept];
            let mut level = vec![0.0; n_kept];
            let mut final_cum_median = 0.0;
            for h in 0..=h_max {
                for c in 0..n_kept {
                    level[c] = resp[(h, c)];
                    cum[c] += resp[(h, c)];
                }
                let mut sorted = level.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut sorted_cum = cum.clone();
                sorted_cum.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let row = [
                    quantile_sorted(&sorted, 0.16),
                    quantile_sorted(&sorted, 0.50),
                    quantile_sorted(&sorted, 0.84),
                    quantile_sorted(&sorted_cum, 0.50),
                ];
                if h == h_max {
                    final_cum_median = row[3];
                }
                rows.push(row);
            }
            (r, rows, final_cum_median)
        })
        .collect();
    for (r, rows, final_cum) in results {
        for (h, row) in rows.iter().enumerate() {
            reg_q16[(h, r)] = row[0];
            reg_q50[(h, r)] = row[1];
            reg_q84[(h, r)] = row[2];
            reg_cum_q50[(h, r)] = row[3];
        }
        cumulative_regional[r] = final_cum;
    }

    let set = IrfSet {
        horizon: h_max,
        macro_irf,
        factor_irf,
        regional_irf: BandedIrf {
            bands: QuantileBands {
                q16: reg_q16,
                q50: reg_q50,
                q84: reg_q84,
            },
            cum_q50: reg_cum_q50,
        },
        cumulative_regional,
        n_draws_used: n_kept,
        n_excluded,
        sign_tries,
    };
    set.check_invariants(policy_var)?;
    Ok(set)
}
