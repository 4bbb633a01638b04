//! Random-variate generators for the conditional distributions the Gibbs
//! sampler draws from: Gamma, inverse-Gamma, multivariate normal, inverted
//! Wishart, and the generalized inverse Gaussian.
//!
//! Every sampler is a deterministic function of (parameters, RNG state).
//! Parallel callers derive independent ChaCha substreams from the master
//! seed via [`substream`], so results do not depend on worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FavarError, Result};

/// Floor applied to the GIG `chi` parameter; `chi = a^2` underflows when a
/// coefficient is shrunk to numerical zero.
pub const GIG_CHI_FLOOR: f64 = 1e-30;

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn chacha_key(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// Stream id reserved for the sequential master stream.
const MAIN_STREAM: u64 = u64::MAX;

/// Master RNG for the sequential part of a chain.
pub fn master_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(chacha_key(seed));
    rng.set_stream(MAIN_STREAM);
    rng
}

/// Independent substream keyed by (step, iteration, index), used by
/// embarrassingly parallel sampler steps. Same key, distinct stream id.
pub fn substream(seed: u64, step: u64, iter: u64, idx: u64) -> ChaCha8Rng {
    assert!(step < 0xFF, "step id out of range");
    assert!(iter < (1 << 32), "iteration out of range");
    assert!(idx < (1 << 24), "substream index out of range");
    let stream = (step << 56) | (iter << 24) | idx;
    let mut rng = ChaCha8Rng::from_seed(chacha_key(seed));
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Gamma / inverse-Gamma
// ---------------------------------------------------------------------------

/// Gamma(shape, rate) draw; density x^(shape-1) exp(-rate x).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) {
        return Err(FavarError::Parameter(format!(
            "gamma requires positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| FavarError::Parameter(format!("gamma: {e}")))?;
    Ok(g.sample(rng))
}

/// Inverse-Gamma(shape, scale) draw; density x^(-shape-1) exp(-scale/x).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(FavarError::Parameter(format!(
            "inverse gamma requires positive shape and scale, got ({shape}, {scale})"
        )));
    }
    let g = sample_gamma(shape, 1.0, rng)?;
    Ok(scale / g)
}

// ---------------------------------------------------------------------------
// Multivariate normal
// ---------------------------------------------------------------------------

/// Pre-factorized covariance for repeated multivariate-normal draws.
pub struct MvnFactor {
    /// Lower factor with cov = factor * factor'.
    factor: DMatrix<f64>,
}

impl MvnFactor {
    /// Cholesky factorization; requires a positive-definite covariance.
    pub fn from_cholesky(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| FavarError::Parameter("covariance is not positive definite".into()))?;
        Ok(MvnFactor { factor: chol.l() })
    }

    /// Symmetric-eigendecomposition square root; accepts semi-definite
    /// covariances (eigenvalues clipped at zero). Rejects matrices with a
    /// meaningfully negative eigenvalue.
    pub fn from_psd(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let sym = (cov + cov.transpose()) * 0.5;
        let scale = sym.amax().max(1e-300);
        let eig = sym.symmetric_eigen();
        let mut factor = DMatrix::zeros(n, n);
        for j in 0..n {
            let lam = eig.eigenvalues[j];
            if lam < -1e-8 * scale {
                return Err(FavarError::Parameter(format!(
                    "covariance has negative eigenvalue {lam:.3e}"
                )));
            }
            let s = lam.max(0.0).sqrt();
            for i in 0..n {
                factor[(i, j)] = eig.eigenvectors[(i, j)] * s;
            }
        }
        Ok(MvnFactor { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        mean + &self.factor * z
    }
}

/// One multivariate-normal draw. Tries Cholesky first, falls back to the
/// semi-definite square root.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(FavarError::Parameter("mvn dimension mismatch".into()));
    }
    let factor = MvnFactor::from_cholesky(cov).or_else(|_| MvnFactor::from_psd(cov))?;
    Ok(factor.sample(mean, rng))
}

// ---------------------------------------------------------------------------
// Inverted Wishart
// ---------------------------------------------------------------------------

/// Inverted-Wishart draw with density |X|^-((dof+d+1)/2) exp(-tr(scale X^-1)/2),
/// so E[X] = scale / (dof - d - 1) when dof > d + 1.
///
/// Uses the Bartlett construction on the inverted scale; the returned matrix
/// is symmetric positive definite by construction.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    dof: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if scale.ncols() != d {
        return Err(FavarError::Parameter("scale matrix is not square".into()));
    }
    if !(dof > d as f64 - 1.0) {
        return Err(FavarError::Parameter(format!(
            "inverse wishart requires dof > dim - 1, got dof={dof}, dim={d}"
        )));
    }
    let chol_scale = scale
        .clone()
        .cholesky()
        .ok_or_else(|| FavarError::Parameter("scale matrix is not positive definite".into()))?;
    let scale_inv = chol_scale.inverse();
    let lv = ((&scale_inv + scale_inv.transpose()) * 0.5)
        .cholesky()
        .ok_or_else(|| FavarError::Numerical("inverted scale lost definiteness".into()))?
        .l();

    // Bartlett factor: chi-square diagonal, standard-normal lower triangle.
    let mut bartlett = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = 2.0 * sample_gamma(0.5 * (dof - i as f64), 1.0, rng)?;
        bartlett[(i, i)] = chi2.sqrt();
        for j in 0..i {
            bartlett[(i, j)] = rng.sample(StandardNormal);
        }
    }

    // W = (Lv B)(Lv B)' ~ Wishart(dof, scale^-1); invert the triangular factor.
    let m = lv * bartlett;
    let m_inv = m
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| FavarError::Numerical("singular Bartlett factor".into()))?;
    let draw = m_inv.transpose() * m_inv;
    Ok((&draw + draw.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// Generalized inverse Gaussian
// ---------------------------------------------------------------------------

/// Parameters of the GIG density
/// `f(x) ∝ x^(p-1) exp(-(chi/x + psi*x)/2)` on x > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub p: f64,
    pub chi: f64,
    pub psi: f64,
}

impl GigParams {
    pub fn new(p: f64, chi: f64, psi: f64) -> Result<Self> {
        if !p.is_finite() || !chi.is_finite() || !psi.is_finite() || chi < 0.0 || psi < 0.0 {
            return Err(FavarError::Parameter(format!(
                "invalid GIG parameters (p={p}, chi={chi}, psi={psi})"
            )));
        }
        if !(chi > 0.0 || p > 0.0) || !(psi > 0.0 || p < 0.0) {
            return Err(FavarError::Parameter(format!(
                "GIG parameters outside the valid region (p={p}, chi={chi}, psi={psi})"
            )));
        }
        Ok(GigParams { p, chi, psi })
    }
}

/// Draws from the generalized inverse Gaussian distribution.
///
/// Limiting cases are dispatched exactly: chi = 0 reduces to
/// Gamma(p, rate psi/2), psi = 0 to inverse-Gamma(-p, scale chi/2).
/// The general case samples the two-parameter standard form with one of
/// three schemes (ratio-of-uniforms with and without mode shift, and a
/// three-piece rejection hat for small omega), chosen for efficiency; each
/// scheme is exact on its own.
pub fn sample_gig<R: Rng + ?Sized>(params: &GigParams, rng: &mut R) -> Result<f64> {
    let GigParams { p, chi, psi } = *params;
    if chi == 0.0 {
        return sample_gamma(p, 0.5 * psi, rng);
    }
    if psi == 0.0 {
        return sample_inverse_gamma(-p, 0.5 * chi, rng);
    }
    let chi = chi.max(GIG_CHI_FLOOR);
    let alpha = (chi / psi).sqrt();
    let omega = (chi * psi).sqrt();
    let lam = p.abs();

    let y = if lam > 2.0 || omega > 3.0 {
        rou_mode_shift(lam, omega, rng)
    } else if lam >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_no_shift(lam, omega, rng)
    } else {
        hat_rejection(lam, omega, rng)
    };

    let x = if p < 0.0 { alpha / y } else { alpha * y };
    if !(x > 0.0) || !x.is_finite() {
        return Err(FavarError::Numerical(format!(
            "GIG draw degenerated (p={p}, chi={chi}, psi={psi})"
        )));
    }
    Ok(x)
}

/// Log of the unnormalized two-parameter density y^(lam-1) exp(-omega(y+1/y)/2).
fn gig_logf(lam: f64, omega: f64, y: f64) -> f64 {
    (lam - 1.0) * y.ln() - 0.5 * omega * (y + 1.0 / y)
}

/// Mode of the two-parameter density, computed without cancellation.
fn gig_mode(lam: f64, omega: f64) -> f64 {
    if lam >= 1.0 {
        (((lam - 1.0) * (lam - 1.0) + omega * omega).sqrt() + (lam - 1.0)) / omega
    } else {
        omega / (((1.0 - lam) * (1.0 - lam) + omega * omega).sqrt() + (1.0 - lam))
    }
}

/// Ratio-of-uniforms on the density normalized at its mode.
fn rou_no_shift<R: Rng + ?Sized>(lam: f64, omega: f64, rng: &mut R) -> f64 {
    let m = gig_mode(lam, omega);
    let lnfm = gig_logf(lam, omega, m);
    // x maximizing x^2 f(x).
    let xp = ((lam + 1.0) + ((lam + 1.0) * (lam + 1.0) + omega * omega).sqrt()) / omega;
    let umax = xp * (0.5 * (gig_logf(lam, omega, xp) - lnfm)).exp();
    loop {
        let u: f64 = umax * rng.random::<f64>();
        let v: f64 = rng.random::<f64>();
        if v <= 0.0 {
            continue;
        }
        let x = u / v;
        if 2.0 * v.ln() <= gig_logf(lam, omega, x) - lnfm {
            return x;
        }
    }
}

/// Ratio-of-uniforms with the region re-centered at the mode; preferred for
/// large lam or omega where the unshifted rectangle degenerates.
fn rou_mode_shift<R: Rng + ?Sized>(lam: f64, omega: f64, rng: &mut R) -> f64 {
    let m = gig_mode(lam, omega);
    let lnfm = gig_logf(lam, omega, m);

    // Stationary points of (x - m) sqrt(f(x)) solve
    // x^3 + a x^2 + b x + c = 0.
    let a = -(2.0 * (lam + 1.0) / omega + m);
    let b = 2.0 * (lam - 1.0) * m / omega - 1.0;
    let c = m;
    let pp = b - a * a / 3.0;
    let qq = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    if pp >= 0.0 {
        // Degenerate cubic; the unshifted region is still valid.
        return rou_no_shift(lam, omega, rng);
    }
    let arg = (-qq / (2.0 * (-pp * pp * pp / 27.0).sqrt())).clamp(-1.0, 1.0);
    let fi = arg.acos();
    let fak = 2.0 * (-pp / 3.0).sqrt();
    let mut roots = [0.0f64; 3];
    for (k, r) in roots.iter_mut().enumerate() {
        *r = fak * (fi / 3.0 + 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() - a / 3.0;
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let y_hi = roots[2];
    let y_lo = if roots[1] > 0.0 { roots[1] } else { roots[0] };
    if !(y_lo > 0.0 && y_lo < m && y_hi > m) {
        return rou_no_shift(lam, omega, rng);
    }

    let uplus = (y_hi - m) * (0.5 * (gig_logf(lam, omega, y_hi) - lnfm)).exp();
    let uminus = (y_lo - m) * (0.5 * (gig_logf(lam, omega, y_lo) - lnfm)).exp();
    loop {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v: f64 = rng.random::<f64>();
        if v <= 0.0 {
            continue;
        }
        let x = m + u / v;
        if x <= 0.0 {
            continue;
        }
        if 2.0 * v.ln() <= gig_logf(lam, omega, x) - lnfm {
            return x;
        }
    }
}

/// Rejection from a three-piece hat (constant, power tail, exponential tail)
/// for 0 <= lam < 1 and small omega, where the density concentrates near the
/// origin and ratio-of-uniforms rectangles become arbitrarily inefficient.
fn hat_rejection<R: Rng + ?Sized>(lam: f64, omega: f64, rng: &mut R) -> f64 {
    debug_assert!((0.0..1.0).contains(&lam));
    let m = gig_mode(lam, omega);
    let lnfm = gig_logf(lam, omega, m);
    let x0 = omega / (1.0 - lam);
    let two_over_omega = 2.0 / omega;

    // Piece 0: constant hat at the (normalized) mode height on (0, x0].
    let a0 = x0;

    // Pieces 1 and 2: x^(lam-1) hat on (x0, 2/omega], exponential beyond.
    // exp(-omega(x+1/x)/2) <= exp(-omega) everywhere justifies k1.
    let (k1, a1, ln_k2, a2, t2);
    if x0 >= two_over_omega {
        k1 = 0.0;
        a1 = 0.0;
        t2 = x0;
        ln_k2 = (lam - 1.0) * x0.ln() - lnfm;
        a2 = ln_k2.exp() * two_over_omega * (-0.5 * omega * x0).exp();
    } else {
        k1 = (-omega - lnfm).exp();
        a1 = if lam == 0.0 {
            k1 * (two_over_omega / x0).ln()
        } else {
            k1 / lam * (two_over_omega.powf(lam) - x0.powf(lam))
        };
        t2 = two_over_omega;
        ln_k2 = (lam - 1.0) * two_over_omega.ln() - lnfm;
        a2 = ln_k2.exp() * two_over_omega * (-1.0f64).exp();
    }
    let total = a0 + a1 + a2;
    debug_assert!(total.is_finite() && total > 0.0);

    loop {
        let mut v = total * rng.random::<f64>();
        let (x, ln_hat);
        if v <= a0 {
            x = x0 * (v / a0);
            ln_hat = 0.0;
        } else if v <= a0 + a1 {
            v -= a0;
            x = if lam == 0.0 {
                x0 * (v / k1).exp()
            } else {
                (x0.powf(lam) + v * lam / k1).powf(1.0 / lam)
            };
            ln_hat = -omega - lnfm + (lam - 1.0) * x.ln();
        } else {
            v -= a0 + a1;
            let tail = (-0.5 * omega * t2).exp() - v * 0.5 * omega / ln_k2.exp();
            if tail <= 0.0 {
                continue;
            }
            x = -two_over_omega * tail.ln();
            ln_hat = ln_k2 - 0.5 * omega * x;
        };
        if x <= 0.0 || !x.is_finite() {
            continue;
        }
        let u: f64 = rng.random();
        if u <= 0.0 {
            continue;
        }
        if u.ln() + ln_hat <= gig_logf(lam, omega, x) - lnfm {
            return x;
        }
    }
}
