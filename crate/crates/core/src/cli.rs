//! Command-line front end: simulate, estimate, irf, and dic subcommands
//! wired through the run configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chainio::{self, ChainMeta};
use crate::config::{hash_hex, load_config, sha256_file, Identification, LoadedConfig, Overrides};
use crate::data::{self, load_panel, write_panel};
use crate::dic::compute_dic;
use crate::error::{FavarError, Result};
use crate::gibbs::{ChainRunner, STEP_NAMES};
use crate::irf::{compute_irf_set, morans_i, BandedIrf, IdentScheme, IrfSet};
use crate::model::{FavarParams, ModelDims};

#[derive(Parser)]
#[command(
    name = "favar",
    about = "Bayesian factor-augmented VAR with shrinkage priors: estimation, structural identification, and regional impulse responses",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Cap worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel plus a ground-truth sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the Gibbs sampler and write the chain container.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Validate and emit the run summary without sampling.
        #[arg(long)]
        dry_run: bool,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override chain length.
        #[arg(long)]
        n_draws: Option<usize>,
        /// Override burn-in length.
        #[arg(long)]
        n_burn: Option<usize>,
        /// Stop cleanly after this many iterations, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Compute impulse-response tables from a stored chain.
    Irf {
        #[command(flatten)]
        common: Common,
        /// Chain container (defaults to <output_dir>/chain.bin).
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Compare deviance information criteria across stored chains.
    Dic {
        #[command(flatten)]
        common: Common,
        /// Chain containers to compare.
        #[arg(required = true)]
        chains: Vec<PathBuf>,
    },
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => with_pool(&common, None, cmd_simulate),
        Command::Estimate {
            common,
            dry_run,
            resume,
            n_draws,
            n_burn,
            stop_after,
        } => {
            let extra = Overrides {
                n_draws,
                n_burn,
                ..Default::default()
            };
            with_pool(&common, Some(extra), |ctx| {
                cmd_estimate(ctx, dry_run, resume.as_deref(), stop_after)
            })
        }
        Command::Irf { common, chain } => {
            with_pool(&common, None, |ctx| cmd_irf(ctx, chain.as_deref()))
        }
        Command::Dic { common, chains } => with_pool(&common, None, |ctx| cmd_dic(ctx, &chains)),
    }
}

struct Ctx {
    loaded: LoadedConfig,
}

impl Ctx {
    fn config(&self) -> &crate::config::RunConfig {
        &self.loaded.config
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.loaded.base_dir.join(p)
        }
    }

    fn panel_path(&self) -> PathBuf {
        self.resolve_path(&self.config().data.panel)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.resolve_path(&self.config().output_dir);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn hash_comments(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", hash_hex(&self.loaded.config_hash)),
            format!("seed={}", self.config().seed),
        ]
    }
}

fn with_pool<F>(common: &Common, extra: Option<Overrides>, f: F) -> Result<()>
where
    F: FnOnce(&Ctx) -> Result<()> + Send,
{
    let mut overrides = extra.unwrap_or_default();
    overrides.seed = common.seed;
    overrides.output_dir = common.output_dir.clone();
    overrides.threads = common.threads;
    let loaded = load_config(&common.config, &overrides)?;
    let threads = loaded.config.threads;
    let ctx = Ctx { loaded };
    if threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| FavarError::Config(format!("thread pool: {e}")))?;
        pool.install(|| f(&ctx))
    } else {
        f(&ctx)
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// JSON mirror of the ground truth; matrices are row-major nested arrays.
#[derive(Serialize, Deserialize)]
pub struct TruthSidecar {
    pub config_hash: String,
    pub seed: u64,
    pub n_factors: usize,
    pub factor_loadings: Vec<Vec<f64>>,
    pub agg_loadings: Vec<Vec<f64>>,
    pub meas_var: Vec<f64>,
    pub var_coeffs: Vec<Vec<f64>>,
    pub proxy_coeffs: Option<Vec<f64>>,
    pub innov_cov: Vec<Vec<f64>>,
    pub true_impact: Vec<f64>,
    pub policy_index: usize,
    pub factors: Vec<Vec<f64>>,
    pub shocks: Vec<f64>,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

fn rows_mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

impl TruthSidecar {
    pub fn params(&self) -> FavarParams {
        FavarParams {
            factor_loadings: rows_mat(&self.factor_loadings),
            agg_loadings: rows_mat(&self.agg_loadings),
            meas_var: DVector::from_vec(self.meas_var.clone()),
            var_coeffs: rows_mat(&self.var_coeffs),
            proxy_coeffs: self.proxy_coeffs.as_ref().map(|z| DVector::from_vec(z.clone())),
            innov_cov: rows_mat(&self.innov_cov),
        }
    }
}

fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config();
    let synth = cfg.synthetic_config()?;
    let mut rng = crate::dist::master_rng(cfg.seed);
    let out = data::generate_synthetic(&synth, &mut rng)?;

    let dir = ctx.out_dir()?;
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for (j, name) in out.regional_names.iter().enumerate() {
        columns.push((name.clone(), out.panel.regional.column(j).iter().cloned().collect()));
    }
    for (j, name) in out.aggregate_names.iter().enumerate() {
        columns.push((name.clone(), out.panel.aggregates.column(j).iter().cloned().collect()));
    }
    if let Some(z) = &out.panel.proxy {
        columns.push(("PROXY".to_string(), z.iter().cloned().collect()));
    }
    let mut comments = ctx.hash_comments();
    comments.push("synthetic panel generated by `favar simulate`".to_string());
    let panel_path = dir.join("synthetic_panel.csv");
    write_panel(&panel_path, &out.panel.time_index, &columns, &comments)?;

    let sidecar = TruthSidecar {
        config_hash: hash_hex(&ctx.loaded.config_hash),
        seed: cfg.seed,
        n_factors: synth.n_factors,
        factor_loadings: mat_rows(&out.truth.factor_loadings),
        agg_loadings: mat_rows(&out.truth.agg_loadings),
        meas_var: out.truth.meas_var.iter().cloned().collect(),
        var_coeffs: mat_rows(&out.truth.var_coeffs),
        proxy_coeffs: out.truth.proxy_coeffs.as_ref().map(|z| z.iter().cloned().collect()),
        innov_cov: mat_rows(&out.truth.innov_cov),
        true_impact: out.true_impact.iter().cloned().collect(),
        policy_index: out.policy_index,
        factors: mat_rows(&out.factors),
        shocks: out.shocks.iter().cloned().collect(),
    };
    let truth_path = dir.join("synthetic_truth.json");
    std::fs::write(&truth_path, serde_json::to_string_pretty(&sidecar).unwrap())?;
    println!(
        "wrote {} ({} periods, {} regional + {} aggregate + proxy) and {}",
        panel_path.display(),
        out.panel.n_periods(),
        out.regional_names.len(),
        out.aggregate_names.len(),
        truth_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunSummary {
    dry_run: bool,
    config_hash: String,
    seed: u64,
    data_sha256: String,
    identification: Identification,
    dims: DimsSummary,
    chain: ChainSummary,
    hyperparams: HyperSummary,
    timing: Option<TimingSummary>,
}

#[derive(Serialize)]
struct DimsSummary {
    n_regions: usize,
    n_factors: usize,
    n_aggregates: usize,
    lag_order: usize,
    n_periods: usize,
    horizon: usize,
}

#[derive(Serialize)]
struct ChainSummary {
    n_draws: usize,
    n_burn: usize,
    thin: usize,
    store_factors: bool,
    n_stored: usize,
}

#[derive(Serialize)]
struct HyperSummary {
    vartheta_a: f64,
    vartheta_lambda: f64,
    c0: f64,
    c1: f64,
    d0: f64,
    d1: f64,
    e0: f64,
    e1: f64,
    nu: f64,
    sigma_bar_diag: f64,
}

#[derive(Serialize)]
struct TimingSummary {
    total_seconds: f64,
    step_seconds: Vec<(String, f64)>,
    iterations: usize,
}

fn load_model_inputs(ctx: &Ctx) -> Result<(data::LoadedPanel, ModelDims, [u8; 32])> {
    let cfg = ctx.config();
    let panel_path = ctx.panel_path();
    let specs = cfg.resolve_series(&panel_path)?;
    let loaded = load_panel(&panel_path, &specs)?;
    let dims = ModelDims::new(
        loaded.regional_names.len(),
        cfg.dims.s,
        loaded.aggregate_names.len(),
        cfg.dims.q,
        loaded.data.n_periods(),
        cfg.dims.h_max,
    )?;
    let data_sha = sha256_file(&panel_path)?;
    Ok((loaded, dims, data_sha))
}

fn cmd_estimate(
    ctx: &Ctx,
    dry_run: bool,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let cfg = ctx.config();
    let (loaded, dims, data_sha) = load_model_inputs(ctx)?;
    let hyper = cfg.hyperparams(dims.n_vars());
    let chain_config = cfg.chain_config();
    let h = &hyper;
    let summary_base = RunSummary {
        dry_run,
        config_hash: hash_hex(&ctx.loaded.config_hash),
        seed: cfg.seed,
        data_sha256: hash_hex(&data_sha),
        identification: cfg.identification,
        dims: DimsSummary {
            n_regions: dims.n_regions,
            n_factors: dims.n_factors,
            n_aggregates: dims.n_aggregates,
            lag_order: dims.lag_order,
            n_periods: dims.n_periods,
            horizon: dims.horizon,
        },
        chain: ChainSummary {
            n_draws: chain_config.n_draws,
            n_burn: chain_config.n_burn,
            thin: chain_config.thin,
            store_factors: chain_config.store_factors,
            n_stored: chain_config.n_stored(),
        },
        hyperparams: HyperSummary {
            vartheta_a: h.shape_local_var,
            vartheta_lambda: h.shape_local_loading,
            c0: h.global_shape_loading,
            c1: h.global_rate_loading,
            d0: h.global_shape_var,
            d1: h.global_rate_var,
            e0: h.meas_var_shape,
            e1: h.meas_var_scale,
            nu: h.innov_dof,
            sigma_bar_diag: h.innov_scale[(0, 0)],
        },
        timing: None,
    };

    let dir = ctx.out_dir()?;
    let summary_path = dir.join("run_summary.json");
    if dry_run {
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary_base).unwrap())?;
        println!("dry run: wrote {}", summary_path.display());
        return Ok(());
    }

    let meta = ChainMeta {
        dims,
        config_hash: ctx.loaded.config_hash,
        data_sha,
        with_proxy: loaded.data.proxy.is_some(),
        policy_index: loaded.policy_index,
        regional_names: loaded.regional_names.clone(),
        aggregate_names: loaded.aggregate_names.clone(),
    };

    let mut runner = match resume {
        Some(ckpt) => {
            let (ckpt_meta, runner) = chainio::resume_checkpoint(
                ckpt,
                loaded.data.clone(),
                hyper.clone(),
                &ctx.loaded.config_hash,
                &data_sha,
            )?;
            if ckpt_meta.dims != dims {
                return Err(FavarError::Config(
                    "checkpoint dimensions do not match the configuration".into(),
                ));
            }
            println!("resuming at iteration {}", runner.completed());
            runner
        }
        None => ChainRunner::new(loaded.data.clone(), dims, hyper.clone(), chain_config)?,
    };

    let started = Instant::now();
    let ckpt_path = dir.join("checkpoint.bin");
    let every = cfg.chain.checkpoint_every;
    let target = stop_after
        .map(|s| s.min(chain_config.n_draws))
        .unwrap_or(chain_config.n_draws);
    while runner.completed() < target {
        let stride = if every > 0 { every } else { target };
        runner.advance(stride.min(target - runner.completed()))?;
        if every > 0 && !runner.is_complete() {
            chainio::save_checkpoint(&ckpt_path, &meta, &runner)?;
        }
    }
    if !runner.is_complete() {
        chainio::save_checkpoint(&ckpt_path, &meta, &runner)?;
        println!(
            "stopped after {} of {} iterations; checkpoint at {}",
            runner.completed(),
            chain_config.n_draws,
            ckpt_path.display()
        );
        return Ok(());
    }
    let elapsed = started.elapsed().as_secs_f64();
    let output = runner.take_output();
    let chain_path = dir.join("chain.bin");
    chainio::save_chain(&chain_path, &meta, &output)?;

    let mut summary = summary_base;
    summary.timing = Some(TimingSummary {
        total_seconds: elapsed,
        step_seconds: STEP_NAMES
            .iter()
            .zip(output.diagnostics.step_nanos.iter())
            .map(|(n, ns)| (n.to_string(), *ns as f64 / 1e9))
            .collect(),
        iterations: output.diagnostics.n_iterations,
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())?;
    println!(
        "stored {} draws to {} in {elapsed:.1}s; summary at {}",
        output.draws.len(),
        chain_path.display(),
        summary_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// irf
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IrfSummary {
    config_hash: String,
    seed: u64,
    identification: Identification,
    horizon: usize,
    n_draws_used: usize,
    n_excluded: usize,
    acceptance_rate: Option<f64>,
    morans_i_cumulative: Option<f64>,
}

fn cmd_irf(ctx: &Ctx, chain_path: Option<&Path>) -> Result<()> {
    let cfg = ctx.config();
    let dir = ctx.out_dir()?;
    let path = chain_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("chain.bin"));
    let chain = chainio::load_chain(&path)?;
    let meta = &chain.meta;
    let mut dims = meta.dims;
    dims.horizon = cfg.dims.h_max;

    let policy_var = dims.n_factors + meta.policy_index;
    let scheme = match cfg.identification {
        Identification::Proxy => {
            if !meta.with_proxy {
                return Err(FavarError::Config(
                    "chain was estimated without a proxy; use sign identification".into(),
                ));
            }
            IdentScheme::Proxy
        }
        Identification::Sign => IdentScheme::Sign(
            cfg.resolve_sign_spec(&meta.aggregate_names, dims.n_factors)?,
        ),
    };
    let set = compute_irf_set(&chain.output.draws, &dims, policy_var, &scheme, cfg.seed)?;

    let comments = ctx.hash_comments();
    let mut macro_names: Vec<String> =
        (1..=dims.n_factors).map(|i| format!("FACTOR_{i}")).collect();
    macro_names.extend(meta.aggregate_names.iter().cloned());
    write_irf_table(&dir.join("irf_macro.csv"), &macro_names, &set.macro_irf, &comments)?;
    let factor_names: Vec<String> =
        (1..=dims.n_factors).map(|i| format!("FACTOR_{i}")).collect();
    write_irf_table(&dir.join("irf_factor.csv"), &factor_names, &set.factor_irf, &comments)?;
    write_irf_table(
        &dir.join("irf_regional.csv"),
        &meta.regional_names,
        &set.regional_irf,
        &comments,
    )?;
    write_cumulative_table(
        &dir.join("cumulative_regional.csv"),
        &meta.regional_names,
        &set.cumulative_regional,
        &comments,
    )?;

    let morans = match &cfg.spatial {
        Some(spatial) => {
            let weights = data::load_weights_csv(
                &ctx.resolve_path(&spatial.weights),
                meta.regional_names.len(),
            )?;
            Some(morans_i(&set.cumulative_regional, &weights, spatial.row_standardize)?)
        }
        None => None,
    };

    let summary = IrfSummary {
        config_hash: hash_hex(&ctx.loaded.config_hash),
        seed: cfg.seed,
        identification: cfg.identification,
        horizon: set.horizon,
        n_draws_used: set.n_draws_used,
        n_excluded: set.n_excluded,
        acceptance_rate: match cfg.identification {
            Identification::Sign => Some(set.n_draws_used as f64 / set.sign_tries.max(1) as f64),
            Identification::Proxy => None,
        },
        morans_i_cumulative: morans,
    };
    std::fs::write(
        dir.join("irf_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "impulse responses over {} horizons from {} draws ({} excluded) written to {}",
        set.horizon + 1,
        set.n_draws_used,
        set.n_excluded,
        dir.display()
    );
    Ok(())
}

/// Long-format table: series, horizon, q16, q50, q84, cumulative.
fn write_irf_table(
    path: &Path,
    names: &[String],
    irf: &BandedIrf,
    comments: &[String],
) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    out.push_str("series,horizon,q16,q50,q84,cumulative\n");
    let b = &irf.bands;
    for (j, name) in names.iter().enumerate() {
        for h in 0..b.q50.nrows() {
            writeln!(
                out,
                "{name},{h},{},{},{},{}",
                b.q16[(h, j)],
                b.q50[(h, j)],
                b.q84[(h, j)],
                irf.cum_q50[(h, j)]
            )
            .unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_cumulative_table(
    path: &Path,
    names: &[String],
    cumulative: &DVector<f64>,
    comments: &[String],
) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    out.push_str("series,cumulative\n");
    for (j, name) in names.iter().enumerate() {
        writeln!(out, "{name},{}", cumulative[j]).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dic
// ---------------------------------------------------------------------------

fn cmd_dic(ctx: &Ctx, chains: &[PathBuf]) -> Result<()> {
    let cfg = ctx.config();
    let panel_path = ctx.panel_path();
    let data_sha = sha256_file(&panel_path)?;

    #[derive(Serialize)]
    struct Row {
        chain: String,
        n_factors: usize,
        dic: f64,
        d_bar: f64,
        d_hat: f64,
        p_d: f64,
        n_draws: usize,
    }
    let mut rows = Vec::new();
    for path in chains {
        let chain = chainio::load_chain(path)?;
        if chain.meta.data_sha != data_sha {
            return Err(FavarError::Data(format!(
                "chain {} was estimated on different data (checksum mismatch)",
                path.display()
            )));
        }
        // Rebuild the exact panel the chain saw: specs resolve for its
        // factor count, which only affects dims, not the data columns.
        let specs = cfg.resolve_series(&panel_path)?;
        let loaded = load_panel(&panel_path, &specs)?;
        let result = compute_dic(&chain.output, &loaded.data, chain.meta.dims.lag_order)?;
        result.check_identity()?;
        rows.push(Row {
            chain: path.display().to_string(),
            n_factors: chain.meta.dims.n_factors,
            dic: result.dic,
            d_bar: result.d_bar,
            d_hat: result.d_hat,
            p_d: result.p_d,
            n_draws: result.n_draws_used,
        });
    }
    rows.sort_by(|a, b| a.dic.partial_cmp(&b.dic).unwrap());

    use std::fmt::Write as _;
    let mut out = String::new();
    for c in ctx.hash_comments() {
        writeln!(out, "# {c}").unwrap();
    }
    out.push_str("chain,n_factors,dic,d_bar,d_hat,p_d,n_draws\n");
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.chain, r.n_factors, r.dic, r.d_bar, r.d_hat, r.p_d, r.n_draws
        )
        .unwrap();
    }
    let dir = ctx.out_dir()?;
    let path = dir.join("dic_comparison.csv");
    std::fs::write(&path, &out)?;
    println!("{out}");
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared IRF helpers for the library surface
// ---------------------------------------------------------------------------

/// Re-exported for tests: computes an IrfSet straight from a chain file.
pub fn irf_from_chain(
    chain: &chainio::ChainFile,
    scheme: &IdentScheme,
    horizon: usize,
    seed: u64,
) -> Result<IrfSet> {
    let mut dims = chain.meta.dims;
    dims.horizon = horizon;
    let policy_var = dims.n_factors + chain.meta.policy_index;
    compute_irf_set(&chain.output.draws, &dims, policy_var, scheme, seed)
}
