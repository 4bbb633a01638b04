//! Versioned binary containers for chain output and resumable checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! chain file:      "FAVARCHN" | u32 version | meta | chain config |
//!                  diagnostics | draws | shrinkage | factor paths
//! checkpoint file: "FAVARCKP" | u32 version | meta | chain config |
//!                  diagnostics | completed | current state | rng |
//!                  draws | shrinkage | factor paths
//! ```
//!
//! Matrices are stored as (nrows, ncols, column-major f64 payload); vectors
//! as (len, payload); strings as (len, utf-8 bytes). The RNG serializes as
//! its 32-byte key, stream id, and word position, which reproduces the
//! stream exactly. Files are written to a temporary sibling and renamed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FavarError, Result};
use crate::gibbs::{ChainConfig, ChainOutput, ChainRunner, Diagnostics};
use crate::model::{FavarParams, Hyperparams, ModelDims, PanelData, ShrinkageState};

const CHAIN_MAGIC: &[u8; 8] = b"FAVARCHN";
const CKPT_MAGIC: &[u8; 8] = b"FAVARCKP";
const FORMAT_VERSION: u32 = 1;

/// Provenance and layout metadata stored alongside the draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMeta {
    pub dims: ModelDims,
    pub config_hash: [u8; 32],
    pub data_sha: [u8; 32],
    pub with_proxy: bool,
    /// Policy indicator position within the aggregates.
    pub policy_index: usize,
    pub regional_names: Vec<String>,
    pub aggregate_names: Vec<String>,
}

pub struct ChainFile {
    pub meta: ChainMeta,
    pub output: ChainOutput,
}

// ---------------------------------------------------------------------------
// Primitive encoding
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    fn names(&mut self, names: &[String]) {
        self.u64(names.len() as u64);
        for n in names {
            self.string(n);
        }
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for v in m.iter() {
            self.f64(*v);
        }
    }

    fn vector(&mut self, v: &DVector<f64>) {
        self.u64(v.len() as u64);
        for x in v.iter() {
            self.f64(*x);
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &self.buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8], what: &str) -> Result<Self> {
        if buf.len() < 12 || &buf[..8] != magic {
            return Err(FavarError::Data(format!("not a {what} file")));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FavarError::Data(format!(
                "unsupported {what} format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(Reader { buf, pos: 12 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FavarError::Data("truncated container".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FavarError::Data("invalid utf-8 in container".into()))
    }

    fn names(&mut self) -> Result<Vec<String>> {
        let n = self.usize()?;
        (0..n).map(|_| self.string()).collect()
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let mut m = DMatrix::zeros(rows, cols);
        for v in m.iter_mut() {
            *v = self.f64()?;
        }
        Ok(m)
    }

    fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.usize()?;
        let mut v = DVector::zeros(n);
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Composite encoders
// ---------------------------------------------------------------------------

fn write_meta(w: &mut Writer, meta: &ChainMeta) {
    let d = &meta.dims;
    for v in [
        d.n_regions,
        d.n_factors,
        d.n_aggregates,
        d.lag_order,
        d.n_periods,
        d.horizon,
    ] {
        w.u64(v as u64);
    }
    w.bytes(&meta.config_hash);
    w.bytes(&meta.data_sha);
    w.u8(meta.with_proxy as u8);
    w.u64(meta.policy_index as u64);
    w.names(&meta.regional_names);
    w.names(&meta.aggregate_names);
}

fn read_meta(r: &mut Reader) -> Result<ChainMeta> {
    let vals: Vec<usize> = (0..6).map(|_| r.usize()).collect::<Result<_>>()?;
    let dims = ModelDims::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])?;
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let mut data_sha = [0u8; 32];
    data_sha.copy_from_slice(r.take(32)?);
    let with_proxy = r.u8()? != 0;
    let policy_index = r.usize()?;
    let regional_names = r.names()?;
    let aggregate_names = r.names()?;
    Ok(ChainMeta {
        dims,
        config_hash,
        data_sha,
        with_proxy,
        policy_index,
        regional_names,
        aggregate_names,
    })
}

fn write_chain_config(w: &mut Writer, c: &ChainConfig) {
    w.u64(c.n_draws as u64);
    w.u64(c.n_burn as u64);
    w.u64(c.thin as u64);
    w.u64(c.seed);
    w.u8(c.store_factors as u8);
}

fn read_chain_config(r: &mut Reader) -> Result<ChainConfig> {
    Ok(ChainConfig {
        n_draws: r.usize()?,
        n_burn: r.usize()?,
        thin: r.usize()?,
        seed: r.u64()?,
        store_factors: r.u8()? != 0,
    })
}

fn write_diagnostics(w: &mut Writer, d: &Diagnostics) {
    for v in d.step_nanos {
        w.u64(v);
    }
    w.u64(d.n_iterations as u64);
}

fn read_diagnostics(r: &mut Reader) -> Result<Diagnostics> {
    let mut step_nanos = [0u64; 9];
    for v in &mut step_nanos {
        *v = r.u64()?;
    }
    Ok(Diagnostics {
        step_nanos,
        n_iterations: r.usize()?,
    })
}

fn write_params(w: &mut Writer, p: &FavarParams) {
    w.matrix(&p.factor_loadings);
    w.matrix(&p.agg_loadings);
    w.vector(&p.meas_var);
    w.matrix(&p.var_coeffs);
    w.u8(p.proxy_coeffs.is_some() as u8);
    if let Some(z) = &p.proxy_coeffs {
        w.vector(z);
    }
    w.matrix(&p.innov_cov);
}

fn read_params(r: &mut Reader) -> Result<FavarParams> {
    let factor_loadings = r.matrix()?;
    let agg_loadings = r.matrix()?;
    let meas_var = r.vector()?;
    let var_coeffs = r.matrix()?;
    let proxy_coeffs = if r.u8()? != 0 { Some(r.vector()?) } else { None };
    let innov_cov = r.matrix()?;
    Ok(FavarParams {
        factor_loadings,
        agg_loadings,
        meas_var,
        var_coeffs,
        proxy_coeffs,
        innov_cov,
    })
}

fn write_shrinkage(w: &mut Writer, s: &ShrinkageState) {
    w.vector(&s.var_local);
    w.f64(s.var_global);
    w.vector(&s.loading_local);
    w.f64(s.loading_global);
}

fn read_shrinkage(r: &mut Reader) -> Result<ShrinkageState> {
    Ok(ShrinkageState {
        var_local: r.vector()?,
        var_global: r.f64()?,
        loading_local: r.vector()?,
        loading_global: r.f64()?,
    })
}

fn write_stored(w: &mut Writer, out: &ChainOutput) {
    w.u64(out.draws.len() as u64);
    for d in &out.draws {
        write_params(w, d);
    }
    for s in &out.shrinkage_draws {
        write_shrinkage(w, s);
    }
    w.u8(out.factor_paths.is_some() as u8);
    if let Some(paths) = &out.factor_paths {
        w.u64(paths.len() as u64);
        for p in paths {
            w.matrix(p);
        }
    }
}

type StoredDraws = (Vec<FavarParams>, Vec<ShrinkageState>, Option<Vec<DMatrix<f64>>>);

fn read_stored(r: &mut Reader) -> Result<StoredDraws> {
    let n = r.usize()?;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        draws.push(read_params(r)?);
    }
    let shrinkage: Vec<ShrinkageState> = (0..n).map(|_| read_shrinkage(r)).collect::<Result<_>>()?;
    let paths = if r.u8()? != 0 {
        let k = r.usize()?;
        Some((0..k).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok((draws, shrinkage, paths))
}

// ---------------------------------------------------------------------------
// Chain container
// ---------------------------------------------------------------------------

pub fn save_chain(path: &Path, meta: &ChainMeta, output: &ChainOutput) -> Result<()> {
    let mut w = Writer::new(CHAIN_MAGIC);
    write_meta(&mut w, meta);
    write_chain_config(&mut w, &output.config);
    write_diagnostics(&mut w, &output.diagnostics);
    write_stored(&mut w, output);
    w.finish(path)
}

pub fn load_chain(path: &Path) -> Result<ChainFile> {
    let buf = std::fs::read(path)
        .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader::new(&buf, CHAIN_MAGIC, "chain")?;
    let meta = read_meta(&mut r)?;
    let config = read_chain_config(&mut r)?;
    let diagnostics = read_diagnostics(&mut r)?;
    let (draws, shrinkage_draws, factor_paths) = read_stored(&mut r)?;
    Ok(ChainFile {
        meta,
        output: ChainOutput {
            config,
            draws,
            shrinkage_draws,
            factor_paths,
            diagnostics,
        },
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_checkpoint(path: &Path, meta: &ChainMeta, runner: &ChainRunner) -> Result<()> {
    let mut w = Writer::new(CKPT_MAGIC);
    write_meta(&mut w, meta);
    write_chain_config(&mut w, &runner.config);
    write_diagnostics(&mut w, &runner.diagnostics);
    w.u64(runner.completed as u64);
    write_params(&mut w, &runner.params);
    write_shrinkage(&mut w, &runner.shrink);
    w.matrix(&runner.factors);
    w.bytes(&runner.rng.get_seed());
    w.u64(runner.rng.get_stream());
    w.u128(runner.rng.get_word_pos());
    let snapshot = ChainOutput {
        config: runner.config,
        draws: runner.draws.clone(),
        shrinkage_draws: runner.shrinkage_draws.clone(),
        factor_paths: runner.factor_paths.clone(),
        diagnostics: runner.diagnostics.clone(),
    };
    write_stored(&mut w, &snapshot);
    w.finish(path)
}

/// Rebuilds a runner from a checkpoint. The caller supplies the same panel,
/// dimensions, and hyperparameters; config and data hashes must match the
/// stored provenance.
pub fn resume_checkpoint(
    path: &Path,
    data: PanelData,
    hyper: Hyperparams,
    expect_config_hash: &[u8; 32],
    expect_data_sha: &[u8; 32],
) -> Result<(ChainMeta, ChainRunner)> {
    let buf = std::fs::read(path)
        .map_err(|e| FavarError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader::new(&buf, CKPT_MAGIC, "checkpoint")?;
    let meta = read_meta(&mut r)?;
    if &meta.config_hash != expect_config_hash {
        return Err(FavarError::Config(
            "checkpoint was produced by a different configuration".into(),
        ));
    }
    if &meta.data_sha != expect_data_sha {
        return Err(FavarError::Config(
            "checkpoint was produced from different data".into(),
        ));
    }
    let config = read_chain_config(&mut r)?;
    let diagnostics = read_diagnostics(&mut r)?;
    let completed = r.usize()?;
    let params = read_params(&mut r)?;
    let shrink = read_shrinkage(&mut r)?;
    let factors = r.matrix()?;
    let mut key = [0u8; 32];
    key.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let (draws, shrinkage_draws, factor_paths) = read_stored(&mut r)?;

    let mut runner = ChainRunner::new(data, meta.dims, hyper, config)?;
    runner.completed = completed;
    runner.params = params;
    runner.shrink = shrink;
    runner.factors = factors;
    runner.rng = rng;
    runner.draws = draws;
    runner.shrinkage_draws = shrinkage_draws;
    runner.factor_paths = factor_paths;
    runner.diagnostics = diagnostics;
    Ok((meta, runner))
}
