//! The synchronization criterion `τ·∫|f'''|₊ ≤ 4(1 + τ/M)·f'(0)` and the
//! synchronization-ratio curve over `β`.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SyncError};
use crate::interaction::{InteractionKernel, L1Method};

/// `M = 2π`, valid for every kernel.
pub const M_FULL_CIRCLE: f64 = TAU;
/// `M = π`, the semicircle bound.
pub const M_SEMICIRCLE: f64 = std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionReport {
    pub tau: f64,
    pub fp0: f64,
    pub integral_i: f64,
    #[serde(rename = "M")]
    pub m: f64,
    /// `τ·I`.
    pub lhs: f64,
    /// `4(1 + τ/M)·f'(0)`.
    pub rhs: f64,
    /// `rhs / lhs`; infinite when `lhs = 0`.
    pub ratio: f64,
    pub verdict: Verdict,
    /// `|I_region − I_quadrature|`.
    pub method_discrepancy: f64,
}

fn validate_m(m: f64) -> Result<()> {
    if m > 0.0 && m <= TAU + 1e-15 {
        Ok(())
    } else {
        Err(SyncError::InvalidInput(format!("M must lie in (0, 2π], got {m}")))
    }
}

/// Evaluates the criterion for `kernel` with semicircle bound `m`.
pub fn check_criterion(kernel: &InteractionKernel, m: f64) -> Result<CriterionReport> {
    validate_m(m)?;
    let fp0 = kernel.fp0();
    let tau = kernel.tau()?;
    let integral_i = kernel.l1_f3_plus(L1Method::RegionAntiderivative)?;
    let integral_q = kernel.l1_f3_plus(L1Method::Quadrature)?;
    let lhs = tau * integral_i;
    let rhs = 4.0 * (1.0 + tau / m) * fp0;
    let ratio = if lhs > 0.0 { rhs / lhs } else { f64::INFINITY };
    // Equality counts as holding.
    let verdict = if lhs <= rhs { Verdict::Holds } else { Verdict::Fails };
    Ok(CriterionReport { tau, fp0, integral_i, m, lhs, rhs, ratio, verdict, method_discrepancy: (integral_i - integral_q).abs() })
}

/// One row of a `β` sweep. Failed rows carry the error message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub report: std::result::Result<CriterionReport, String>,
}

/// Criterion reports for the self-attention kernel over `beta_grid`, in
/// grid order. Rows are evaluated in parallel.
pub fn ratio_sweep(beta_grid: &[f64], m: f64) -> Result<Vec<SweepRow>> {
    validate_m(m)?;
    Ok(beta_grid
        .par_iter()
        .map(|&beta| SweepRow {
            beta,
            report: check_criterion(&InteractionKernel::self_attention(beta), m).map_err(|e| e.to_string()),
        })
        .collect())
}

/// Synchronization ratio of the self-attention kernel at `beta`.
pub fn ratio_at(beta: f64, m: f64) -> Result<f64> {
    check_criterion(&InteractionKernel::self_attention(beta), m).map(|r| r.ratio)
}

/// Bisection for `ratio(β) = 1` inside `bracket`, to `1e-4` in `β`.
pub fn find_criterion_boundary(m: f64, bracket: (f64, f64)) -> Result<f64> {
    const TOL: f64 = 1e-4;
    let (mut lo, mut hi) = if bracket.0 <= bracket.1 { bracket } else { (bracket.1, bracket.0) };
    let g = |b: f64| ratio_at(b, m).map(|r| r - 1.0);
    let g_lo = g(lo)?;
    let g_hi = g(hi)?;
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if g_hi == 0.0 {
        return Ok(hi);
    }
    if (g_lo < 0.0) == (g_hi < 0.0) {
        return Err(SyncError::NoSignChange { lo, hi });
    }
    let lo_negative = g_lo < 0.0;
    while hi - lo > TOL {
        let mid = 0.5 * (lo + hi);
        let g_mid = g(mid)?;
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if (g_mid < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
