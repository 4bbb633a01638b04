//! Structural identification of the monetary shock: external-instrument
//! proxy normalization and sign-restriction rotation search.
//!
//! Both routes return an impact vector normalized so the policy indicator
//! moves by -0.25 on impact, so downstream impulse-response code does not
//! care which scheme produced it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FavarError, Result};

/// Impact normalization target: a 25 basis-point decline in the policy rate.
pub const POLICY_IMPACT: f64 = -0.25;

/// Sign required of one variable's impact response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Positive,
    Negative,
}

/// One on-impact restriction on a VAR variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignRestriction {
    /// Index into the stacked variable vector (factors first, then aggregates).
    pub var_index: usize,
    pub direction: Direction,
}

/// Full restriction set plus the per-draw retry budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignRestrictionSpec {
    pub restrictions: Vec<SignRestriction>,
    pub max_tries: usize,
}

impl SignRestrictionSpec {
    pub fn new(restrictions: Vec<SignRestriction>, max_tries: usize, n_vars: usize) -> Result<Self> {
        if restrictions.is_empty() {
            return Err(FavarError::Config(
                "sign identification needs at least one restriction".into(),
            ));
        }
        if let Some(r) = restrictions.iter().find(|r| r.var_index >= n_vars) {
            return Err(FavarError::Config(format!(
                "sign restriction on variable {} but the system has only {} variables",
                r.var_index, n_vars
            )));
        }
        Ok(SignRestrictionSpec {
            restrictions,
            max_tries,
        })
    }

    /// Strict satisfaction of every restriction.
    pub fn satisfied_by(&self, impact: &DVector<f64>) -> bool {
        self.restrictions.iter().all(|r| {
            let v = impact[r.var_index];
            match r.direction {
                Direction::Positive => v > 0.0,
                Direction::Negative => v < 0.0,
            }
        })
    }
}

/// How an impact vector was identified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpactSource {
    Proxy,
    SignRestricted,
}

/// Normalized contemporaneous response of the VAR variables to the shock.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralImpact {
    pub impact: DVector<f64>,
    pub source: ImpactSource,
    pub normalization_scale: f64,
}

/// Normalizes the proxy-regression coefficients into a structural impact:
/// the shock is scaled so the policy indicator falls by 25 basis points.
///
/// A zero coefficient on the policy indicator makes the instrument
/// uninformative for this draw; the caller counts and excludes it.
pub fn proxy_impact(proxy_coeffs: &DVector<f64>, policy_index: usize) -> Result<StructuralImpact> {
    if policy_index >= proxy_coeffs.len() {
        return Err(FavarError::Config(format!(
            "policy index {} out of range for {} variables",
            policy_index,
            proxy_coeffs.len()
        )));
    }
    let pivot = proxy_coeffs[policy_index];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(FavarError::Numerical(
            "degenerate instrument: zero impact on the policy indicator".into(),
        ));
    }
    let scale = POLICY_IMPACT / pivot;
    let mut impact = proxy_coeffs * scale;
    impact[policy_index] = POLICY_IMPACT; // pin exactly
    Ok(StructuralImpact {
        impact,
        source: ImpactSource::Proxy,
        normalization_scale: scale,
    })
}

/// Haar-distributed orthogonal matrix: QR of a standard-normal matrix with
/// the sign of the R diagonal pushed into Q's columns.
pub fn draw_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(dim >= 1);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r_diag = qr.r().diagonal().clone_owned();
    let mut q = qr.q();
    for j in 0..dim {
        if r_diag[j] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Outcome of the rotation search for one posterior draw.
#[derive(Debug, Clone)]
pub enum SignSearch {
    Accepted {
        impact: StructuralImpact,
        tries: usize,
    },
    /// No candidate satisfied the restrictions within the retry budget.
    Rejected {
        tries: usize,
    },
}

/// Searches rotations of the Cholesky factor of the innovation covariance
/// for an impact column satisfying the restriction set.
///
/// Each rotation contributes every column and its negation as candidates,
/// tested in column order; the first match is kept and rescaled so the
/// policy indicator moves by -0.25.
pub fn sign_restricted_impact<R: Rng + ?Sized>(
    innov_cov: &DMatrix<f64>,
    spec: &SignRestrictionSpec,
    policy_index: usize,
    rng: &mut R,
) -> Result<SignSearch> {
    let dim = innov_cov.nrows();
    if policy_index >= dim {
        return Err(FavarError::Config(format!(
            "policy index {policy_index} out of range for {dim} variables"
        )));
    }
    let chol = innov_cov.clone().cholesky().ok_or_else(|| {
        FavarError::Numerical("innovation covariance is not positive definite".into())
    })?;
    let lower = chol.l();

    for tries in 1..=spec.max_tries {
        let rotation = draw_rotation(dim, rng);
        let candidates = &lower * rotation;
        for j in 0..dim {
            let col = candidates.column(j).clone_owned();
            for cand in [col.clone(), -col] {
                if !spec.satisfied_by(&cand) {
                    continue;
                }
                let pivot = cand[policy_index];
                if pivot == 0.0 {
                    continue;
                }
                let scale = POLICY_IMPACT / pivot;
                if scale <= 0.0 {
                    // Rescaling by a negative factor would flip signs and
                    // break the restrictions; this candidate is unusable.
                    continue;
                }
                let mut impact = cand * scale;
                impact[policy_index] = POLICY_IMPACT;
                return Ok(SignSearch::Accepted {
                    impact: StructuralImpact {
                        impact,
                        source: ImpactSource::SignRestricted,
                        normalization_scale: scale,
                    },
                    tries,
                });
            }
        }
    }
    Ok(SignSearch::Rejected {
        tries: spec.max_tries,
    })
}
