//! Scalar numerics shared by the kernel and experiment code: bracketed root
//! finding and adaptive Simpson quadrature.

use crate::error::{Result, SyncError};

/// Default absolute tolerance on the argument for bracketed root finding.
pub const ROOT_TOL: f64 = 1e-12;

/// Maximum number of interval subdivisions before adaptive Simpson gives up.
pub const MAX_SUBDIVISIONS: usize = 1_000_000;

/// Locates sign changes of `f` on a uniform grid of `points` samples over
/// `[lo, hi]`.
///
/// Returns one bracket per sign change. A sample that is exactly zero yields
/// a degenerate bracket `(x, x)`.
pub fn scan_brackets<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> Vec<(f64, f64)> {
    assert!(points >= 2, "need at least two grid points");
    let step = (hi - lo) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|k| if k + 1 == points { hi } else { lo + step * k as f64 }).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();

    let mut out = Vec::new();
    for k in 0..points {
        if vals[k] == 0.0 {
            out.push((xs[k], xs[k]));
            continue;
        }
        if k + 1 < points && vals[k + 1] != 0.0 && (vals[k] < 0.0) != (vals[k + 1] < 0.0) {
            out.push((xs[k], xs[k + 1]));
        }
    }
    out
}

/// Bracketed bisection refined by a final secant step.
///
/// `f(lo)` and `f(hi)` must have opposite signs (or one of them must vanish).
pub fn bisect_secant<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if !(fa.is_finite() && fb.is_finite()) || (fa < 0.0) == (fb < 0.0) {
        return Err(SyncError::NoSignChange { lo: a, hi: b });
    }

    // 200 halvings exhaust any finite double interval.
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
            fb = fm;
        }
    }

    // Secant through the final bracket, kept only if it stays inside.
    let s = b - fb * (b - a) / (fb - fa);
    if s.is_finite() && s >= a && s <= b {
        Ok(s)
    } else {
        Ok(0.5 * (a + b))
    }
}

/// All roots of `f` on `[lo, hi]` found by a grid scan followed by
/// [`bisect_secant`] on every bracket.
pub fn find_roots<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize, tol: f64) -> Result<Vec<f64>> {
    let mut roots = Vec::new();
    for (a, b) in scan_brackets(&f, lo, hi, points) {
        let r = if a == b { a } else { bisect_secant(&f, a, b, tol)? };
        if roots.last().is_none_or(|&last: &f64| r - last > tol) {
            roots.push(r);
        }
    }
    Ok(roots)
}

/// Adaptive Simpson quadrature with absolute tolerance `abs_tol`.
///
/// Uses the Richardson-corrected estimate on each accepted panel. Fails with
/// [`SyncError::QuadratureNonconvergence`] once more than `max_subdivisions`
/// panels have been split.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, max_subdivisions: usize) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return adaptive_simpson(f, b, a, abs_tol, max_subdivisions).map(|v| -v);
    }

    struct Panel {
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    }

    let simpson = |a: f64, b: f64, fa: f64, fm: f64, fb: f64| (b - a) / 6.0 * (fa + 4.0 * fm + fb);

    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let mut stack = vec![Panel { a, b, fa, fm, fb, whole: simpson(a, b, fa, fm, fb), tol: abs_tol, depth: 0 }];
    let mut total = 0.0;
    let mut splits = 0usize;

    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let delta = left + right - p.whole;

        // Depth 60 means a panel narrower than ~1e-18 of the range.
        if delta.abs() <= 15.0 * p.tol || p.depth >= 60 {
            total += left + right + delta / 15.0;
            continue;
        }
        splits += 1;
        if splits > max_subdivisions {
            return Err(SyncError::QuadratureNonconvergence(max_subdivisions));
        }
        let tol = 0.5 * p.tol;
        stack.push(Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left, tol, depth: p.depth + 1 });
        stack.push(Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right, tol, depth: p.depth + 1 });
    }
    Ok(total)
}
