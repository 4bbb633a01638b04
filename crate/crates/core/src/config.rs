//! Run configuration: a single TOML file, schema-validated with unknown
//! keys rejected, plus scalar overrides from the command line. Every output
//! embeds the SHA-256 of (file bytes, applied overrides), so runs with equal
//! hashes are byte-identical.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SeriesKind, SeriesSpec, SynthConfig, Transform};
use crate::error::{FavarError, Result};
use crate::gibbs::ChainConfig;
use crate::ident::{Direction, SignRestriction, SignRestrictionSpec};
use crate::model::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identification {
    Proxy,
    Sign,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_identification")]
    pub identification: Identification,
    /// Worker-thread cap; 0 means all available cores.
    #[serde(default)]
    pub threads: usize,
    pub data: DataSection,
    #[serde(default)]
    pub defaults: DefaultsSection,
    #[serde(default)]
    pub series: Vec<SeriesSpec>,
    #[serde(default)]
    pub dims: DimsSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub hyper: HyperSection,
    #[serde(default)]
    pub sign_restrictions: Option<SignSection>,
    #[serde(default)]
    pub spatial: Option<SpatialSection>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
}

fn default_identification() -> Identification {
    Identification::Proxy
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub panel: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultsSection {
    /// Transform applied to panel columns that have no explicit series
    /// entry; such columns are treated as regional series.
    pub regional_transform: Option<Transform>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsSection {
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_h_max")]
    pub h_max: usize,
}

fn default_s() -> usize {
    1
}
fn default_q() -> usize {
    2
}
fn default_h_max() -> usize {
    72
}

impl Default for DimsSection {
    fn default() -> Self {
        DimsSection {
            s: 1,
            q: 2,
            h_max: 72,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(default = "default_n_draws")]
    pub n_draws: usize,
    #[serde(default = "default_n_burn")]
    pub n_burn: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub store_factors: bool,
    /// Checkpoint interval in iterations; 0 disables checkpointing.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_n_draws() -> usize {
    20_000
}
fn default_n_burn() -> usize {
    10_000
}
fn default_thin() -> usize {
    1
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            n_draws: 20_000,
            n_burn: 10_000,
            thin: 1,
            store_factors: false,
            checkpoint_every: 0,
        }
    }
}

/// Prior hyperparameters in the conventional notation; anything omitted
/// falls back to the strong-shrinkage defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub vartheta_a: Option<f64>,
    pub vartheta_lambda: Option<f64>,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub d0: Option<f64>,
    pub d1: Option<f64>,
    pub e0: Option<f64>,
    pub e1: Option<f64>,
    pub nu: Option<f64>,
    pub sigma_bar_diag: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignSection {
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    #[serde(default)]
    pub rules: Vec<SignRule>,
}

fn default_max_tries() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignRule {
    pub series: String,
    pub sign: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialSection {
    pub weights: PathBuf,
    #[serde(default = "default_true")]
    pub row_standardize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub r: usize,
    pub t: usize,
    #[serde(default = "default_synth_k")]
    pub k: usize,
    #[serde(default = "default_loading_scale")]
    pub loading_scale: f64,
    #[serde(default = "default_meas_lo")]
    pub meas_var_min: f64,
    #[serde(default = "default_meas_hi")]
    pub meas_var_max: f64,
    #[serde(default = "default_ar_strength")]
    pub ar_strength: f64,
    #[serde(default = "default_innov_scale")]
    pub innov_scale: f64,
    #[serde(default = "default_relevance")]
    pub proxy_relevance: f64,
    #[serde(default = "default_impact_share")]
    pub impact_share: f64,
}

fn default_synth_k() -> usize {
    7
}
fn default_loading_scale() -> f64 {
    1.0
}
fn default_meas_lo() -> f64 {
    0.2
}
fn default_meas_hi() -> f64 {
    0.8
}
fn default_ar_strength() -> f64 {
    0.65
}
fn default_innov_scale() -> f64 {
    1.0
}
fn default_relevance() -> f64 {
    0.8
}
fn default_impact_share() -> f64 {
    0.5
}

/// Scalar command-line overrides, folded into the config hash.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub n_draws: Option<usize>,
    pub n_burn: Option<usize>,
}

impl Overrides {
    fn canonical(&self) -> String {
        format!(
            "seed={:?};output_dir={:?};threads={:?};n_draws={:?};n_burn={:?}",
            self.seed, self.output_dir, self.threads, self.n_draws, self.n_burn
        )
    }
}

/// A parsed, override-applied configuration plus its provenance hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub config_hash: [u8; 32],
    /// Directory the config file lives in; relative data paths resolve here.
    pub base_dir: PathBuf,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let raw = std::fs::read(path)
        .map_err(|e| FavarError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|_| FavarError::Config("config is not valid utf-8".into()))?;
    let mut config: RunConfig =
        toml::from_str(text).map_err(|e| FavarError::Config(format!("config: {e}")))?;

    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(d) = &overrides.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(t) = overrides.threads {
        config.threads = t;
    }
    if let Some(n) = overrides.n_draws {
        config.chain.n_draws = n;
    }
    if let Some(n) = overrides.n_burn {
        config.chain.n_burn = n;
    }
    config.validate()?;

    let mut hasher = Sha256::new();
    hasher.update(&raw);
    hasher.update(overrides.canonical().as_bytes());
    let config_hash: [u8; 32] = hasher.finalize().into();
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(LoadedConfig {
        config,
        config_hash,
        base_dir,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.chain_config().validate()?;
        if self.dims.s < 1 {
            return Err(FavarError::Config("dims.s must be at least 1".into()));
        }
        if self.dims.q < 1 {
            return Err(FavarError::Config("dims.q must be at least 1".into()));
        }
        if let Some(sign) = &self.sign_restrictions {
            for rule in &sign.rules {
                parse_direction(&rule.sign)?;
            }
            if sign.max_tries == 0 {
                return Err(FavarError::Config("sign max_tries must be positive".into()));
            }
        }
        if let Some(s) = &self.synthetic {
            self.synth_config(s).validate()?;
        }
        Ok(())
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            n_draws: self.chain.n_draws,
            n_burn: self.chain.n_burn,
            thin: self.chain.thin,
            seed: self.seed,
            store_factors: self.chain.store_factors,
        }
    }

    /// Hyperparameters at the configured overrides, defaults elsewhere.
    pub fn hyperparams(&self, n_vars: usize) -> Hyperparams {
        let h = &self.hyper;
        let m = n_vars;
        Hyperparams {
            shape_local_var: h.vartheta_a.unwrap_or(0.1),
            shape_local_loading: h.vartheta_lambda.unwrap_or(0.1),
            global_shape_loading: h.c0.unwrap_or(0.01),
            global_rate_loading: h.c1.unwrap_or(0.01),
            global_shape_var: h.d0.unwrap_or(0.01),
            global_rate_var: h.d1.unwrap_or(0.01),
            meas_var_shape: h.e0.unwrap_or(0.01),
            meas_var_scale: h.e1.unwrap_or(0.01),
            innov_dof: h.nu.unwrap_or(m as f64 + 1.0),
            innov_scale: DMatrix::identity(m, m) * h.sigma_bar_diag.unwrap_or(1e-2),
        }
    }

    fn synth_config(&self, s: &SyntheticSection) -> SynthConfig {
        SynthConfig {
            n_regions: s.r,
            n_factors: self.dims.s,
            n_aggregates: s.k,
            lag_order: self.dims.q,
            n_periods: s.t,
            loading_scale: s.loading_scale,
            meas_var_range: (s.meas_var_min, s.meas_var_max),
            ar_strength: s.ar_strength,
            innov_scale: s.innov_scale,
            proxy_relevance: s.proxy_relevance,
            impact_share: s.impact_share,
            policy_index: crate::data::default_series_names(s.r, s.k).2,
        }
    }

    pub fn synthetic_config(&self) -> Result<SynthConfig> {
        let s = self
            .synthetic
            .as_ref()
            .ok_or_else(|| FavarError::Config("config has no [synthetic] section".into()))?;
        Ok(self.synth_config(s))
    }

    /// Full series-spec list for the panel at `path`: explicit entries plus
    /// default-regional treatment of undeclared columns.
    pub fn resolve_series(&self, panel_path: &Path) -> Result<Vec<SeriesSpec>> {
        let raw = std::fs::read_to_string(panel_path)
            .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", panel_path.display())))?;
        let header = raw
            .lines()
            .find(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
            .ok_or_else(|| FavarError::Data("panel file is empty".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).skip(1).collect();
        let declared: HashMap<&str, &SeriesSpec> =
            self.series.iter().map(|s| (s.name.as_str(), s)).collect();
        let mut specs = Vec::with_capacity(names.len());
        for n in names {
            match declared.get(n) {
                Some(s) => specs.push((*s).clone()),
                None => {
                    let transform = self.defaults.regional_transform.ok_or_else(|| {
                        FavarError::Config(format!(
                            "column {n} has no series entry and no defaults.regional_transform is set"
                        ))
                    })?;
                    specs.push(SeriesSpec {
                        name: n.to_string(),
                        kind: SeriesKind::Regional,
                        transform,
                        policy_indicator: false,
                    });
                }
            }
        }
        for s in &self.series {
            if !specs.iter().any(|x| x.name == s.name) {
                return Err(FavarError::Data(format!(
                    "series {} declared but missing from the panel",
                    s.name
                )));
            }
        }
        crate::data::validate_specs(&specs, self.identification == Identification::Proxy)?;
        Ok(specs)
    }

    /// Sign-restriction spec resolved against the aggregate names. Without
    /// explicit rules, the conventional monetary set is used: output, housing
    /// investment, prices, and the term spread rise on impact while the
    /// one-year rate falls.
    pub fn resolve_sign_spec(
        &self,
        aggregate_names: &[String],
        n_factors: usize,
    ) -> Result<SignRestrictionSpec> {
        let (rules, max_tries): (Vec<(String, Direction)>, usize) = match &self.sign_restrictions {
            Some(section) if !section.rules.is_empty() => (
                section
                    .rules
                    .iter()
                    .map(|r| Ok((r.series.clone(), parse_direction(&r.sign)?)))
                    .collect::<Result<_>>()?,
                section.max_tries,
            ),
            other => {
                let max_tries = other.as_ref().map_or(1000, |s| s.max_tries);
                (default_sign_rules(), max_tries)
            }
        };
        let mut restrictions = Vec::with_capacity(rules.len());
        for (name, direction) in rules {
            let pos = aggregate_names.iter().position(|n| *n == name).ok_or_else(|| {
                FavarError::Config(format!(
                    "sign restriction on unknown aggregate {name}; available: {}",
                    aggregate_names.join(", ")
                ))
            })?;
            restrictions.push(SignRestriction {
                var_index: n_factors + pos,
                direction,
            });
        }
        SignRestrictionSpec::new(
            restrictions,
            max_tries,
            n_factors + aggregate_names.len(),
        )
    }
}

/// The default impact restrictions for a monetary easing.
pub fn default_sign_rules() -> Vec<(String, Direction)> {
    [
        ("INDPRO", Direction::Positive),
        ("HOUST", Direction::Positive),
        ("CPI", Direction::Positive),
        ("TERM_SPREAD", Direction::Positive),
        ("GS1", Direction::Negative),
    ]
    .into_iter()
    .map(|(n, d)| (n.to_string(), d))
    .collect()
}

fn parse_direction(s: &str) -> Result<Direction> {
    match s {
        "+" | "positive" => Ok(Direction::Positive),
        "-" | "negative" => Ok(Direction::Negative),
        other => Err(FavarError::Config(format!(
            "sign must be + or -, got {other}"
        ))),
    }
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<[u8; 32]> {
    let bytes = std::fs::read(path)
        .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).into())
}
