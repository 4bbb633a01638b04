//! Panel ingestion, stationarity transforms, panel writing, and the
//! synthetic-data generator used by the verification harnesses.
//!
//! Input format: comma-delimited UTF-8 text with a header row; the first
//! column holds period labels (YYYY-MM, strictly increasing), one column per
//! series. Lines starting with `#` are comments. No quoting is supported;
//! series names must not contain commas.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FavarError, Result};
use crate::model::{build_companion, spectral_radius, FavarParams, ModelDims, PanelData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Regional,
    Aggregate,
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// 100 * (ln x_t - ln x_{t-1}): monthly growth rate in percent.
    LogDiffX100,
    /// First difference.
    Diff,
}

impl Transform {
    fn consumes_row(&self) -> bool {
        !matches!(self, Transform::None)
    }
}

/// Declares how one file column enters the model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeriesSpec {
    pub name: String,
    pub kind: SeriesKind,
    #[serde(default)]
    pub transform: Transform,
    #[serde(default)]
    pub policy_indicator: bool,
}

/// Cross-field validation of a spec list: at most one proxy, exactly one
/// policy indicator sitting on an aggregate, unique names.
pub fn validate_specs(specs: &[SeriesSpec], proxy_required: bool) -> Result<()> {
    let mut seen = HashMap::new();
    for s in specs {
        if seen.insert(s.name.clone(), ()).is_some() {
            return Err(FavarError::Config(format!("duplicate series name {}", s.name)));
        }
    }
    let n_proxy = specs.iter().filter(|s| s.kind == SeriesKind::Proxy).count();
    if n_proxy > 1 {
        return Err(FavarError::Config("more than one proxy series declared".into()));
    }
    if proxy_required && n_proxy == 0 {
        return Err(FavarError::Config(
            "proxy identification requires exactly one proxy series".into(),
        ));
    }
    let policy: Vec<&SeriesSpec> = specs.iter().filter(|s| s.policy_indicator).collect();
    if policy.len() != 1 {
        return Err(FavarError::Config(format!(
            "exactly one policy indicator required, found {}",
            policy.len()
        )));
    }
    if policy[0].kind != SeriesKind::Aggregate {
        return Err(FavarError::Config(
            "the policy indicator must be an aggregate series".into(),
        ));
    }
    if specs.iter().any(|s| s.kind == SeriesKind::Proxy && s.policy_indicator) {
        return Err(FavarError::Config("the proxy cannot be the policy indicator".into()));
    }
    Ok(())
}

/// A loaded panel with the column bookkeeping the rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub data: PanelData,
    pub regional_names: Vec<String>,
    pub aggregate_names: Vec<String>,
    pub proxy_name: Option<String>,
    /// Position of the policy indicator within the aggregates.
    pub policy_index: usize,
}

/// Loads, transforms, and validates a panel file against a spec list.
///
/// Regional and aggregate columns are ordered as they appear in the spec
/// list. Differencing transforms consume the first row; the drop is applied
/// to every series so rows stay aligned.
pub fn load_panel(path: &Path, specs: &[SeriesSpec]) -> Result<LoadedPanel> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| FavarError::Data("panel file is empty".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 {
        return Err(FavarError::Data("panel needs a period column and data columns".into()));
    }
    let names = &columns[1..];

    let mut col_of = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if col_of.insert(n.to_string(), i).is_some() {
            return Err(FavarError::Data(format!("duplicate column {n} in panel header")));
        }
    }
    for spec in specs {
        if !col_of.contains_key(&spec.name) {
            return Err(FavarError::Data(format!(
                "series {} declared but missing from the panel",
                spec.name
            )));
        }
    }
    let declared: HashMap<&str, &SeriesSpec> =
        specs.iter().map(|s| (s.name.as_str(), s)).collect();
    let undeclared: Vec<&&str> = names.iter().filter(|n| !declared.contains_key(**n)).collect();
    if !undeclared.is_empty() {
        return Err(FavarError::Data(format!(
            "panel columns without a series spec: {}",
            undeclared
                .iter()
                .take(8)
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    // Parse the body, collecting every malformed cell.
    let mut periods: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut bad_cells: Vec<String> = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(FavarError::Data(format!(
                "row {} has {} fields, expected {}",
                row_idx + 2,
                fields.len(),
                columns.len()
            )));
        }
        periods.push(fields[0].to_string());
        for (c, f) in fields[1..].iter().enumerate() {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => values[c].push(v),
                _ => {
                    if bad_cells.len() < 10 {
                        bad_cells.push(format!("({}, {})", fields[0], names[c]));
                    }
                    values[c].push(f64::NAN);
                }
            }
        }
    }
    if !bad_cells.is_empty() {
        return Err(FavarError::Data(format!(
            "missing or non-numeric cells at {}",
            bad_cells.join(", ")
        )));
    }
    if periods.len() < 2 {
        return Err(FavarError::Data("panel has fewer than two rows".into()));
    }
    for w in periods.windows(2) {
        if w[1] <= w[0] {
            return Err(FavarError::Data(format!(
                "periods must be strictly increasing: {} follows {}",
                w[1], w[0]
            )));
        }
    }

    // Transform, then drop the first row if any series consumed it.
    let any_diff = specs.iter().any(|s| s.transform.consumes_row());
    let drop = usize::from(any_diff);
    let t_out = periods.len() - drop;
    let transformed: HashMap<&str, Vec<f64>> = specs
        .iter()
        .map(|spec| {
            let col = &values[col_of[&spec.name]];
            let full = apply_transform(col, spec.transform, &spec.name)?;
            // offset <= drop always: a consuming transform forces drop = 1.
            let start = drop - full_offset(spec.transform);
            Ok((spec.name.as_str(), full[start..].to_vec()))
        })
        .collect::<Result<HashMap<_, _>>>()?;

    let regional_specs: Vec<&SeriesSpec> =
        specs.iter().filter(|s| s.kind == SeriesKind::Regional).collect();
    let aggregate_specs: Vec<&SeriesSpec> =
        specs.iter().filter(|s| s.kind == SeriesKind::Aggregate).collect();
    let proxy_spec = specs.iter().find(|s| s.kind == SeriesKind::Proxy);

    let grab = |spec: &SeriesSpec| -> &[f64] { &transformed[spec.name.as_str()] };
    let regional = DMatrix::from_fn(t_out, regional_specs.len(), |i, j| grab(regional_specs[j])[i]);
    let aggregates =
        DMatrix::from_fn(t_out, aggregate_specs.len(), |i, j| grab(aggregate_specs[j])[i]);
    let proxy = proxy_spec.map(|s| DVector::from_fn(t_out, |i, _| grab(s)[i]));

    for (j, spec) in regional_specs.iter().enumerate() {
        let col = regional.column(j);
        if col.iter().all(|v| *v == col[0]) {
            return Err(FavarError::Data(format!("series {} is constant", spec.name)));
        }
    }

    let policy_index = aggregate_specs
        .iter()
        .position(|s| s.policy_indicator)
        .ok_or_else(|| FavarError::Config("no policy indicator among the aggregates".into()))?;

    let data = PanelData {
        regional,
        aggregates,
        proxy,
        time_index: periods[drop..].to_vec(),
    };
    data.validate()?;
    Ok(LoadedPanel {
        data,
        regional_names: regional_specs.iter().map(|s| s.name.clone()).collect(),
        aggregate_names: aggregate_specs.iter().map(|s| s.name.clone()).collect(),
        proxy_name: proxy_spec.map(|s| s.name.clone()),
        policy_index,
    })
}

/// Rows consumed by the transform itself.
fn full_offset(t: Transform) -> usize {
    usize::from(t.consumes_row())
}

fn apply_transform(raw: &[f64], transform: Transform, name: &str) -> Result<Vec<f64>> {
    match transform {
        Transform::None => Ok(raw.to_vec()),
        Transform::Diff => Ok(raw.windows(2).map(|w| w[1] - w[0]).collect()),
        Transform::LogDiffX100 => raw
            .windows(2)
            .map(|w| {
                if w[0] <= 0.0 || w[1] <= 0.0 {
                    Err(FavarError::Data(format!(
                        "series {name}: log transform needs positive values"
                    )))
                } else {
                    Ok(100.0 * (w[1].ln() - w[0].ln()))
                }
            })
            .collect(),
    }
}

/// Writes a panel as delimited text. `{}` formatting round-trips f64 values
/// bit-exactly, so a written panel reloads without loss under the identity
/// transform.
pub fn write_panel(
    path: &Path,
    time_index: &[String],
    columns: &[(String, Vec<f64>)],
    header_comments: &[String],
) -> Result<()> {
    let mut out = String::new();
    for c in header_comments {
        writeln!(out, "# {c}").unwrap();
    }
    out.push_str("period");
    for (name, col) in columns {
        assert_eq!(col.len(), time_index.len(), "column {name} length mismatch");
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, p) in time_index.iter().enumerate() {
        out.push_str(p);
        for (_, col) in columns {
            write!(out, ",{}", col[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a square spatial weight matrix from delimited text: `n` rows of
/// `n` comma-separated numbers, `#` comments allowed, no header.
pub fn load_weights_csv(path: &Path, n: usize) -> Result<DMatrix<f64>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        FavarError::Data(format!("weight matrix has non-numeric entry {f}"))
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(FavarError::Data(format!(
            "weight matrix must be {n} x {n} to match the regional series"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Monthly period labels starting at the given year-month.
pub fn month_labels(start_year: i32, start_month: u32, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let total = (start_month as usize - 1) + i;
            format!("{:04}-{:02}", start_year + (total / 12) as i32, total % 12 + 1)
        })
        .collect()
}

/// Column names for generated panels. The seven-aggregate case mirrors the
/// usual monetary block with the one-year rate as the policy indicator.
pub fn default_series_names(n_regions: usize, n_aggregates: usize) -> (Vec<String>, Vec<String>, usize) {
    let regional = (1..=n_regions).map(|i| format!("REGION_{i:03}")).collect();
    if n_aggregates == 7 {
        let names = [
            "HOUST",
            "INDPRO",
            "CPI",
            "GS1",
            "TERM_SPREAD",
            "MORTGAGE_SPREAD",
            "EBP",
        ];
        (regional, names.iter().map(|s| s.to_string()).collect(), 3)
    } else {
        (
            regional,
            (1..=n_aggregates).map(|i| format!("AGG_{i:02}")).collect(),
            0,
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Generator settings. The VAR coefficients are rescaled lag-block by
/// lag-block until the companion spectral radius hits `ar_strength`, so the
/// simulated system is always stationary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub n_factors: usize,
    pub n_aggregates: usize,
    pub lag_order: usize,
    pub n_periods: usize,
    /// Standard deviation of the free loadings.
    pub loading_scale: f64,
    /// Uniform range of the measurement variances.
    pub meas_var_range: (f64, f64),
    /// Target companion spectral radius, in (0, 1).
    pub ar_strength: f64,
    /// Overall scale of the VAR innovation covariance.
    pub innov_scale: f64,
    /// Correlation of the proxy with the structural shock, in [0, 1).
    pub proxy_relevance: f64,
    /// Fraction of innovation variance attributed to the structural shock.
    pub impact_share: f64,
    /// Policy variable position within the aggregates.
    pub policy_index: usize,
}

impl SynthConfig {
    pub fn small(n_regions: usize, n_factors: usize, n_aggregates: usize, n_periods: usize) -> Self {
        SynthConfig {
            n_regions,
            n_factors,
            n_aggregates,
            lag_order: 2,
            n_periods,
            loading_scale: 1.0,
            meas_var_range: (0.2, 0.8),
            ar_strength: 0.65,
            innov_scale: 1.0,
            proxy_relevance: 0.8,
            impact_share: 0.5,
            policy_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_factors < 1 || self.n_regions < self.n_factors {
            return Err(FavarError::Config("need n_regions >= n_factors >= 1".into()));
        }
        if self.lag_order < 1 || self.n_periods <= self.lag_order {
            return Err(FavarError::Config("need n_periods > lag_order >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ar_strength) {
            return Err(FavarError::Config("ar_strength must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.proxy_relevance) {
            return Err(FavarError::Config("proxy_relevance must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.impact_share) || self.impact_share == 0.0 {
            return Err(FavarError::Config("impact_share must lie in (0, 1)".into()));
        }
        if self.n_aggregates > 0 && self.policy_index >= self.n_aggregates {
            return Err(FavarError::Config("policy_index out of range".into()));
        }
        if self.meas_var_range.0 < 0.0 || self.meas_var_range.1 < self.meas_var_range.0 {
            return Err(FavarError::Config("invalid measurement variance range".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows about the draw, for recovery tests.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub panel: PanelData,
    /// Ground truth in the conditional-on-proxy parametrization the sampler
    /// estimates.
    pub truth: FavarParams,
    /// True factor path, T x S.
    pub factors: DMatrix<f64>,
    /// Structural shocks s_t.
    pub shocks: DVector<f64>,
    /// Composite VAR innovations (impact column times shock plus noise).
    pub var_innovations: DMatrix<f64>,
    /// Unnormalized true impact column of the structural shock.
    pub true_impact: DVector<f64>,
    pub regional_names: Vec<String>,
    pub aggregate_names: Vec<String>,
    pub policy_index: usize,
}

/// Simulates the model forward: the structural shock enters the VAR through
/// a fixed impact column, the proxy is shock plus noise, and the regional
/// panel is loadings times the state plus measurement error.
pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthOutput> {
    cfg.validate()?;
    let s = cfg.n_factors;
    let k = cfg.n_aggregates;
    let m = s + k;
    let q = cfg.lag_order;
    let t = cfg.n_periods;
    let r = cfg.n_regions;

    // Loadings with the identification blocks frozen.
    let mut factor_loadings = DMatrix::zeros(r, s);
    for i in 0..s {
        factor_loadings[(i, i)] = 1.0;
    }
    for row in s..r {
        for j in 0..s {
            factor_loadings[(row, j)] = cfg.loading_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut agg_loadings = DMatrix::zeros(r, k);
    for row in s..r {
        for j in 0..k {
            agg_loadings[(row, j)] =
                0.5 * cfg.loading_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (lo, hi) = cfg.meas_var_range;
    let meas_var = DVector::from_fn(r, |_, _| lo + (hi - lo) * rng.random::<f64>());

    // Stable VAR coefficients: rescale lag block q by c^q to move every
    // companion eigenvalue by the factor c.
    let mut var_coeffs = DMatrix::from_fn(m, q * m, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
    let probe_dims = ModelDims::new(m + 1, m, 0, q, q + 2, 72)?;
    for _ in 0..8 {
        let comp = build_companion(&var_coeffs, &probe_dims)?;
        let rho = spectral_radius(&comp.phi);
        if !rho.is_finite() {
            return Err(FavarError::Config("generator produced a non-finite system".into()));
        }
        if rho <= cfg.ar_strength + 1e-9 {
            break;
        }
        let c = cfg.ar_strength / rho;
        for lag in 0..q {
            let scale = c.powi(lag as i32 + 1);
            for i in 0..m {
                for j in 0..m {
                    var_coeffs[(i, lag * m + j)] *= scale;
                }
            }
        }
    }
    {
        let comp = build_companion(&var_coeffs, &probe_dims)?;
        if spectral_radius(&comp.phi) >= 1.0 {
            return Err(FavarError::Config(
                "generator could not stabilize the VAR after rescaling".into(),
            ));
        }
    }

    // Total innovation covariance and the structural impact column.
    let w = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma_total =
        (&w * w.transpose()) * (cfg.innov_scale / m as f64) + DMatrix::identity(m, m) * (0.25 * cfg.innov_scale);
    let chol_total = sigma_total.clone().cholesky().unwrap().l();
    let policy_var = s + cfg.policy_index.min(k.saturating_sub(1));
    let impact = loop {
        let dir = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let cand = &chol_total * dir * cfg.impact_share.sqrt();
        if k == 0 || cand[policy_var].abs() >= 0.15 * cand.norm() {
            break cand;
        }
    };
    let mut sigma_noise = &sigma_total - &impact * impact.transpose();
    sigma_noise = (&sigma_noise + sigma_noise.transpose()) * 0.5;
    let chol_noise = sigma_noise
        .clone()
        .cholesky()
        .ok_or_else(|| FavarError::Config("impact share too large for the covariance".into()))?
        .l();

    // Forward simulation with a burn-in stretch.
    let burn = 100;
    let total = t + burn;
    let gamma = cfg.proxy_relevance;
    let noise_sd = (1.0 - gamma * gamma).sqrt();
    let mut y = DMatrix::zeros(total, m);
    let mut z = DVector::zeros(total);
    let mut shocks_all = DVector::zeros(total);
    let mut innov_all = DMatrix::zeros(total, m);
    for row in 0..total {
        let mut mean = DVector::zeros(m);
        for lag in 0..q {
            if row > lag {
                mean += var_coeffs.view((0, lag * m), (m, m)) * y.row(row - 1 - lag).transpose();
            }
        }
        let shock: f64 = rng.sample(StandardNormal);
        shocks_all[row] = shock;
        z[row] = gamma * shock + noise_sd * rng.sample::<f64, _>(StandardNormal);
        let eta = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &impact * shock + &chol_noise * eta;
        innov_all.row_mut(row).copy_from(&u.transpose());
        let draw = mean + u;
        y.row_mut(row).copy_from(&draw.transpose());
    }

    let mut regional = DMatrix::zeros(t, r);
    let mut aggregates = DMatrix::zeros(t, k);
    let mut proxy = DVector::zeros(t);
    let mut factors = DMatrix::zeros(t, s);
    let mut shocks = DVector::zeros(t);
    let mut var_innovations = DMatrix::zeros(t, m);
    for row in 0..t {
        let src = row + burn;
        let f = y.row(src).columns(0, s).transpose();
        let mm = y.row(src).columns(s, k).transpose();
        factors.row_mut(row).copy_from(&f.transpose());
        aggregates.row_mut(row).copy_from(&mm.transpose());
        proxy[row] = z[src];
        shocks[row] = shocks_all[src];
        var_innovations.row_mut(row).copy_from(&innov_all.row(src));
        let noise = DVector::from_fn(r, |i, _| {
            meas_var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let h = &factor_loadings * f + &agg_loadings * mm + noise;
        regional.row_mut(row).copy_from(&h.transpose());
    }

    // Conditional-on-proxy ground truth: with Var(z) = 1 the implied proxy
    // coefficient is relevance * impact and the conditional covariance keeps
    // the unexplained shock share.
    let zeta_true = &impact * gamma;
    let mut innov_cov = &sigma_noise + &impact * impact.transpose() * (1.0 - gamma * gamma);
    innov_cov = (&innov_cov + innov_cov.transpose()) * 0.5;

    let truth = FavarParams {
        factor_loadings,
        agg_loadings,
        meas_var,
        var_coeffs,
        proxy_coeffs: Some(zeta_true),
        innov_cov,
    };

    let (regional_names, aggregate_names, _) = default_series_names(r, k);
    let panel = PanelData {
        regional,
        aggregates,
        proxy: Some(proxy),
        time_index: month_labels(1997, 4, t),
    };
    Ok(SynthOutput {
        panel,
        truth,
        factors,
        shocks,
        var_innovations,
        true_impact: impact,
        regional_names,
        aggregate_names,
        policy_index: cfg.policy_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn spec(name: &str, kind: SeriesKind, transform: Transform, policy: bool) -> SeriesSpec {
        SeriesSpec {
            name: name.into(),
            kind,
            transform,
            policy_indicator: policy,
        }
    }

    fn basic_specs() -> Vec<SeriesSpec> {
        vec![
            spec("R1", SeriesKind::Regional, Transform::LogDiffX100, false),
            spec("R2", SeriesKind::Regional, Transform::None, false),
            spec("A1", SeriesKind::Aggregate, Transform::Diff, true),
        ]
    }

    #[test]
    fn log_diff_arithmetic() {
        let f = write_tmp(
            "period,R1,R2,A1\n2001-01,100,5,1.0\n2001-02,102,6,1.5\n2001-03,104,7,1.2\n",
        );
        let loaded = load_panel(f.path(), &basic_specs()).unwrap();
        let want = 100.0 * (102f64.ln() - 100f64.ln());
        assert_abs_diff_eq!(loaded.data.regional[(0, 0)], want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 1.98026, epsilon = 1e-4);
        // transform=none passes through (after the shared one-row drop)
        assert_eq!(loaded.data.regional[(0, 1)], 6.0);
        assert_abs_diff_eq!(loaded.data.aggregates[(0, 0)], 0.5, epsilon = 1e-12);
        assert_eq!(loaded.data.time_index, vec!["2001-02", "2001-03"]);
        assert_eq!(loaded.policy_index, 0);
    }

    #[test]
    fn five_period_fixture_loads_as_four_rows() {
        let f = write_tmp(
            "period,R1,R2,A1\n\
             2001-01,100,5.0,1.0\n2001-02,102,6.0,1.5\n2001-03,104,5.5,1.2\n\
             2001-04,103,5.8,1.4\n2001-05,105,6.2,1.1\n",
        );
        let loaded = load_panel(f.path(), &basic_specs()).unwrap();
        assert_eq!(loaded.data.n_periods(), 4);
        assert_eq!(loaded.data.regional.ncols(), 2);
        assert_eq!(loaded.data.aggregates.ncols(), 1);
        assert_eq!(loaded.regional_names, vec!["R1", "R2"]);
    }

    #[test]
    fn loader_lists_missing_cells() {
        let f = write_tmp("period,R1,R2,A1\n2001-01,100,,1.0\n2001-02,102,6,\n");
        let err = load_panel(f.path(), &basic_specs()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2001-01, R2)"), "{msg}");
        assert!(msg.contains("(2001-02, A1)"), "{msg}");
    }

    #[test]
    fn loader_rejects_unsorted_and_duplicate_periods() {
        let f = write_tmp("period,R1,R2,A1\n2001-02,1,2,3\n2001-01,2,3,4\n");
        assert!(load_panel(f.path(), &basic_specs()).is_err());
        let f = write_tmp("period,R1,R2,A1\n2001-01,1,2,3\n2001-01,2,3,4\n");
        assert!(load_panel(f.path(), &basic_specs()).is_err());
    }

    #[test]
    fn loader_rejects_constant_series() {
        let specs = vec![
            spec("R1", SeriesKind::Regional, Transform::None, false),
            spec("A1", SeriesKind::Aggregate, Transform::None, true),
        ];
        let f = write_tmp("period,R1,A1\n2001-01,2.0,1.0\n2001-02,2.0,1.5\n2001-03,2.0,0.5\n");
        let err = load_panel(f.path(), &specs).unwrap_err();
        assert!(err.to_string().contains("constant"));
    }

    #[test]
    fn loader_rejects_undeclared_columns() {
        let f = write_tmp("period,R1,R2,A1,EXTRA\n2001-01,1,2,3,4\n2001-02,2,3,4,5\n");
        let err = load_panel(f.path(), &basic_specs()).unwrap_err();
        assert!(err.to_string().contains("EXTRA"));
    }

    #[test]
    fn spec_validation_rules() {
        let mut specs = basic_specs();
        assert!(validate_specs(&specs, false).is_ok());
        assert!(validate_specs(&specs, true).is_err()); // proxy required but absent
        specs.push(spec("Z", SeriesKind::Proxy, Transform::None, false));
        assert!(validate_specs(&specs, true).is_ok());
        specs.push(spec("Z2", SeriesKind::Proxy, Transform::None, false));
        assert!(validate_specs(&specs, true).is_err()); // two proxies
        let no_policy = vec![spec("R1", SeriesKind::Regional, Transform::None, false)];
        assert!(validate_specs(&no_policy, false).is_err());
    }

    #[test]
    fn panel_round_trips_bit_exactly() {
        let time = month_labels(1999, 11, 3);
        let cols = vec![
            ("R1".to_string(), vec![1.25, -0.3333333333333333, 1e-17]),
            ("A1".to_string(), vec![0.1 + 0.2, 2.0f64.sqrt(), -5.0]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&path, &time, &cols, &["synthetic test panel".to_string()]).unwrap();
        let specs = vec![
            spec("R1", SeriesKind::Regional, Transform::None, false),
            spec("A1", SeriesKind::Aggregate, Transform::None, true),
        ];
        let loaded = load_panel(&path, &specs).unwrap();
        for i in 0..3 {
            assert_eq!(loaded.data.regional[(i, 0)], cols[0].1[i]);
            assert_eq!(loaded.data.aggregates[(i, 0)], cols[1].1[i]);
        }
        assert_eq!(loaded.data.time_index, time);
    }

    #[test]
    fn month_labels_wrap_years() {
        assert_eq!(
            month_labels(1997, 11, 4),
            vec!["1997-11", "1997-12", "1998-01", "1998-02"]
        );
    }

    #[test]
    fn generator_degenerate_identity_case() {
        // S = R with zero measurement noise: the panel is the factor path.
        let mut cfg = SynthConfig::small(2, 2, 1, 30);
        cfg.meas_var_range = (0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = generate_synthetic(&cfg, &mut rng).unwrap();
        assert_eq!(out.panel.regional, out.factors);
    }

    #[test]
    fn generator_innovation_covariance_matches_target() {
        let mut cfg = SynthConfig::small(3, 1, 2, 50_000);
        cfg.proxy_relevance = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate_synthetic(&cfg, &mut rng).unwrap();
        let t = out.var_innovations.nrows() as f64;
        let emp = out.var_innovations.transpose() * &out.var_innovations / t;
        // Unconditional innovation covariance: noise + full impact share.
        let total = {
            let d = &out.true_impact * out.true_impact.transpose();
            let g2 = cfg.proxy_relevance * cfg.proxy_relevance;
            out.truth.innov_cov.clone() - &d * (1.0 - g2) + &d
        };
        let rel = (&emp - &total).norm() / total.norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn proxy_regression_recovers_relevance() {
        let cfg = SynthConfig::small(3, 1, 2, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = generate_synthetic(&cfg, &mut rng).unwrap();
        let z = out.panel.proxy.as_ref().unwrap();
        let s = &out.shocks;
        let t = z.len() as f64;
        let sxx: f64 = s.iter().map(|v| v * v).sum();
        let sxy: f64 = s.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let slope = sxy / sxx;
        let resid_var = (0..z.len())
            .map(|i| (z[i] - slope * s[i]).powi(2))
            .sum::<f64>()
            / (t - 1.0);
        let se = (resid_var / sxx).sqrt();
        assert!(
            (slope - cfg.proxy_relevance).abs() <= 3.0 * se,
            "slope {slope}, want {} (se {se})",
            cfg.proxy_relevance
        );
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let cfg = SynthConfig::small(4, 1, 2, 40);
        let a = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.panel.regional, b.panel.regional);
        assert_eq!(a.truth.var_coeffs, b.truth.var_coeffs);
    }

    #[test]
    fn generator_truth_passes_invariants() {
        let cfg = SynthConfig::small(6, 1, 2, 40);
        let out = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        out.truth.check_invariants().unwrap();
        // stationarity was enforced
        let dims = ModelDims::new(6, 1, 2, 2, 40, 72).unwrap();
        let comp = build_companion(&out.truth.var_coeffs, &dims).unwrap();
        assert!(spectral_radius(&comp.phi) < 1.0);
    }
}
