//! Interaction kernels `f` on the circle together with their first three
//! derivatives, the stability angle `τ`, the positive region of `f'''` and
//! the integral `∫_{-π}^{π} |f'''|₊`.
//!
//! The self-attention kernel is used in the normalized form
//! `f_β(x) = sin(x)·e^{β(cos x − 1)}`, which differs from `sin(x)·e^{β cos x}`
//! only by the positive factor `e^β` and keeps large `β` finite.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::error::{Result, SyncError};
use crate::numerics::{adaptive_simpson, bisect_secant, scan_brackets, MAX_SUBDIVISIONS};

/// Grid size for sign scans of `f'''` (both in `cos x` and on the circle).
pub const REGION_GRID: usize = 4096;
/// Number of samples used to verify `f' < 0` on `(τ, π]`.
pub const TAU_CHECK_SAMPLES: usize = 1024;
/// Absolute tolerance of the adaptive Simpson route for `∫|f'''|₊`.
pub const L1_QUAD_TOL: f64 = 1e-10;

type ProfileFn = dyn Fn(f64) -> [f64; 4] + Send + Sync;

/// A scalar profile `h` for kernels of the form `f(x) = sin(x)·h(cos x)`.
///
/// The closure returns `[h(t), h'(t), h''(t), h'''(t)]`; three derivatives
/// are needed to build `f'''` by the chain rule.
#[derive(Clone)]
pub struct CosProfile {
    name: String,
    derivs: Arc<ProfileFn>,
}

impl CosProfile {
    pub fn new<F>(name: impl Into<String>, derivs: F) -> Self
    where
        F: Fn(f64) -> [f64; 4] + Send + Sync + 'static,
    {
        CosProfile { name: name.into(), derivs: Arc::new(derivs) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, t: f64) -> [f64; 4] {
        (self.derivs)(t)
    }
}

impl fmt::Debug for CosProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CosProfile").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug)]
pub enum KernelFamily {
    /// `sin(x)·e^{β(cos x − 1)}`.
    SelfAttention { beta: f64 },
    /// `sin(x)`.
    Kuramoto,
    /// `sin(x)·h(cos x)`.
    HCos(CosProfile),
    /// `g(x) = |a|·f(x) − |b|·f(−x)`.
    Asymmetric { a: f64, b: f64, base: Box<InteractionKernel> },
}

/// An immutable interaction function with analytic derivatives.
#[derive(Clone, Debug)]
pub struct InteractionKernel {
    family: KernelFamily,
    fp0: f64,
}

/// How `∫|f'''|₊` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Method {
    /// Sum of `f''(hi) − f''(lo)` over the positive intervals.
    RegionAntiderivative,
    /// Adaptive Simpson on `max(f''', 0)`, split at the region endpoints.
    Quadrature,
}

/// Coordinate convention for a list of [`AngleInterval`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleFrame {
    /// Endpoints in `[-π, π]`.
    Centered,
    /// Endpoints in `[0, 2π]`.
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngleInterval {
    pub lo: f64,
    pub hi: f64,
}

impl AngleInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Maximal open intervals on which `f''' > 0`, sorted and disjoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PositiveRegion {
    pub frame: AngleFrame,
    pub intervals: Vec<AngleInterval>,
}

impl PositiveRegion {
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(AngleInterval::width).sum()
    }

    /// Whether `x` (any representative mod 2π) lies inside an interval.
    pub fn contains(&self, x: f64) -> bool {
        let x = match self.frame {
            AngleFrame::Centered => wrap_centered(x),
            AngleFrame::Positive => wrap_angle(x),
        };
        self.intervals.iter().any(|iv| iv.lo < x && x < iv.hi)
    }

    /// Endpoints mapped into `(-π, π]`, sorted, without duplicates.
    pub fn breakpoints_centered(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.intervals.iter().flat_map(|iv| [iv.lo, iv.hi]).map(wrap_centered).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        pts
    }

    /// Number of connected arcs on the circle.
    fn arc_count(&self) -> usize {
        let n = self.intervals.len();
        if n == 0 {
            return 0;
        }
        let first = self.intervals[0];
        let last = self.intervals[n - 1];
        let wraps = match self.frame {
            AngleFrame::Centered => first.lo <= -PI && last.hi >= PI,
            AngleFrame::Positive => first.lo <= 0.0 && last.hi >= TAU,
        };
        if wraps && n > 1 {
            n - 1
        } else {
            n
        }
    }

    fn is_full_circle(&self) -> bool {
        (self.measure() - TAU).abs() < 1e-12
    }
}

/// Wraps an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle difference into `(-π, π]`.
#[inline]
pub fn wrap_centered(x: f64) -> f64 {
    let r = wrap_angle(x);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

impl InteractionKernel {
    fn from_family(family: KernelFamily) -> Self {
        let mut k = InteractionKernel { family, fp0: 0.0 };
        k.fp0 = k.eval(0.0, 1);
        k
    }

    pub fn self_attention(beta: f64) -> Self {
        Self::from_family(KernelFamily::SelfAttention { beta })
    }

    pub fn kuramoto() -> Self {
        Self::from_family(KernelFamily::Kuramoto)
    }

    pub fn hcos(profile: CosProfile) -> Self {
        Self::from_family(KernelFamily::HCos(profile))
    }

    /// Builds `g(x) = |a|·f(x) − |b|·f(−x)` from `base`.
    pub fn asymmetric_combine(base: &InteractionKernel, a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a * b < 0.0 || (a == 0.0 && b == 0.0) {
            return Err(SyncError::InvalidWeights { a, b });
        }
        Ok(Self::from_family(KernelFamily::Asymmetric { a, b, base: Box::new(base.clone()) }))
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    /// `f'(0)`, cached at construction.
    pub fn fp0(&self) -> f64 {
        self.fp0
    }

    /// `β` for the self-attention family (Kuramoto reports 0).
    pub fn beta(&self) -> Option<f64> {
        match self.family {
            KernelFamily::SelfAttention { beta } => Some(beta),
            KernelFamily::Kuramoto => Some(0.0),
            _ => None,
        }
    }

    /// Odd kernels satisfy `f(−x) = −f(x)`; every family except an
    /// asymmetric combination of a non-odd base.
    pub fn is_odd(&self) -> bool {
        match &self.family {
            KernelFamily::Asymmetric { base, .. } => base.is_odd(),
            _ => true,
        }
    }

    /// Kernels of the form `sin(x)·h(cos x)`, which give gradient dynamics.
    pub fn is_gradient(&self) -> bool {
        !matches!(self.family, KernelFamily::Asymmetric { .. })
    }

    /// `f`, `f'`, `f''` or `f'''` at `x` for `order` 0..=3.
    pub fn eval(&self, x: f64, order: usize) -> f64 {
        assert!(order <= 3, "derivative order must be 0..=3, got {order}");
        self.derivs(x)[order]
    }

    /// `[f, f', f'', f''']` at `x`.
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        match &self.family {
            KernelFamily::SelfAttention { beta } => {
                let beta = *beta;
                let (s, c) = x.sin_cos();
                let e = (beta * (c - 1.0)).exp();
                let s2 = s * s;
                [
                    s * e,
                    (c - beta * s2) * e,
                    (-s - 3.0 * beta * s * c + beta * beta * s2 * s) * e,
                    -(c + 3.0 * beta * c * c - 4.0 * beta * s2 - 6.0 * beta * beta * c * s2 + beta * beta * beta * s2 * s2) * e,
                ]
            }
            KernelFamily::Kuramoto => {
                let (s, c) = x.sin_cos();
                [s, c, -s, -c]
            }
            KernelFamily::HCos(profile) => {
                let (s, c) = x.sin_cos();
                let [h0, h1, h2, h3] = profile.eval(c);
                let s2 = s * s;
                [
                    s * h0,
                    c * h0 - s2 * h1,
                    -s * h0 - 3.0 * s * c * h1 + s2 * s * h2,
                    -c * h0 + (4.0 * s2 - 3.0 * c * c) * h1 + 6.0 * s2 * c * h2 - s2 * s2 * h3,
                ]
            }
            KernelFamily::Asymmetric { a, b, base } => {
                let (a, b) = (a.abs(), b.abs());
                let p = base.derivs(x);
                let m = base.derivs(-x);
                [a * p[0] - b * m[0], a * p[1] + b * m[1], a * p[2] - b * m[2], a * p[3] + b * m[3]]
            }
        }
    }

    /// `h(t)` for gradient kernels `f(x) = sin(x)·h(cos x)`.
    pub fn h_profile(&self, t: f64) -> Result<f64> {
        match &self.family {
            KernelFamily::SelfAttention { beta } => Ok((beta * (t - 1.0)).exp()),
            KernelFamily::Kuramoto => Ok(1.0),
            KernelFamily::HCos(p) => Ok(p.eval(t)[0]),
            KernelFamily::Asymmetric { .. } => {
                Err(SyncError::UnsupportedKernel("asymmetric kernels have no sin·h(cos) form".into()))
            }
        }
    }

    /// Antiderivative `φ` of `h` used by the energy.
    ///
    /// Self-attention uses `φ(t) = e^{β(t−1)}/β` (and `φ(t) = t` at `β = 0`);
    /// a general profile is integrated from 0 numerically.
    pub fn phi(&self, t: f64) -> Result<f64> {
        match &self.family {
            KernelFamily::SelfAttention { beta } if *beta != 0.0 => Ok((beta * (t - 1.0)).exp() / beta),
            KernelFamily::SelfAttention { .. } | KernelFamily::Kuramoto => Ok(t),
            KernelFamily::HCos(p) => adaptive_simpson(|s| p.eval(s)[0], 0.0, t, 1e-13, MAX_SUBDIVISIONS),
            KernelFamily::Asymmetric { .. } => Err(SyncError::UnsupportedKernel("asymmetric kernels have no energy".into())),
        }
    }

    /// A function of `z = cos x` whose sign equals the sign of `f'''(x)`.
    ///
    /// `f'''` is even for odd kernels, so it only depends on `cos x`.
    fn f3_sign_in_cos(&self) -> Result<Box<dyn Fn(f64) -> f64 + '_>> {
        match &self.family {
            KernelFamily::SelfAttention { beta } => {
                let beta = *beta;
                Ok(Box::new(move |z: f64| cos_polynomial(beta, z)))
            }
            KernelFamily::Kuramoto => Ok(Box::new(|z: f64| -z)),
            KernelFamily::HCos(p) => Ok(Box::new(move |z: f64| {
                let [h0, h1, h2, h3] = p.eval(z);
                let s2 = (1.0 - z * z).max(0.0);
                -z * h0 + (4.0 * s2 - 3.0 * z * z) * h1 + 6.0 * s2 * z * h2 - s2 * s2 * h3
            })),
            KernelFamily::Asymmetric { base, .. } if base.is_odd() => base.f3_sign_in_cos(),
            KernelFamily::Asymmetric { .. } => {
                Err(SyncError::RegionStructureUnknown("f''' of a non-odd kernel is not a function of cos x".into()))
            }
        }
    }

    /// Smallest `τ ∈ (0, π]` with `f' < 0` on `(τ, π]`.
    pub fn tau(&self) -> Result<f64> {
        if !(self.fp0 > 0.0) {
            return Err(SyncError::NoValidTau(format!("f'(0) = {} is not positive", self.fp0)));
        }
        match &self.family {
            KernelFamily::SelfAttention { beta } => Ok(self_attention_tau(*beta)),
            KernelFamily::Kuramoto => Ok(FRAC_PI_2),
            KernelFamily::Asymmetric { base, .. } if base.is_odd() => base.tau(),
            _ => self.tau_by_scan(),
        }
    }

    fn tau_by_scan(&self) -> Result<f64> {
        let fp = |x: f64| self.eval(x, 1);
        if !(fp(PI) < 0.0) {
            return Err(SyncError::NoValidTau(format!("f'(π) = {} is not negative", fp(PI))));
        }
        let m = TAU_CHECK_SAMPLES;
        let grid: Vec<f64> = (0..=m).map(|k| PI * k as f64 / m as f64).collect();
        let mut changes = Vec::new();
        for k in 0..m {
            let (a, b) = (fp(grid[k]), fp(grid[k + 1]));
            if (a >= 0.0) != (b >= 0.0) {
                changes.push(k);
            }
        }
        if changes.len() != 1 {
            return Err(SyncError::NoValidTau(format!(
                "f' changes sign {} times on (0, π]; expected exactly one",
                changes.len()
            )));
        }
        let k = changes[0];
        let tau = bisect_secant(fp, grid[k], grid[k + 1], 1e-13)?;
        for j in 1..=m {
            let x = tau + (PI - tau) * j as f64 / m as f64;
            if !(fp(x) < 0.0) {
                return Err(SyncError::NoValidTau(format!("f'({x}) >= 0 beyond τ = {tau}")));
            }
        }
        Ok(tau)
    }

    /// Maximal intervals on which `f''' > 0`.
    pub fn f3_positive_region(&self) -> Result<PositiveRegion> {
        let q = self.f3_sign_in_cos()?;
        let in_x = |x: f64| q(x.cos());

        // Roots in z = cos x, refined in x so endpoints are accurate in angle.
        let mut roots: Vec<f64> = Vec::new();
        for (za, zb) in scan_brackets(&q, -1.0, 1.0, REGION_GRID) {
            let (xa, xb) = (zb.clamp(-1.0, 1.0).acos(), za.clamp(-1.0, 1.0).acos());
            let r = if xa == xb { xa } else { bisect_secant(in_x, xa, xb, 1e-14)? };
            roots.push(r);
        }
        roots.sort_by(f64::total_cmp);

        // Measure-zero contacts at 0 or π do not split the region.
        let mut cuts = vec![0.0];
        cuts.extend(roots.into_iter().filter(|&r| r > 1e-12 && r < PI - 1e-12));
        cuts.push(PI);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-13);

        let mut upper: Vec<(f64, f64)> = Vec::new();
        for w in cuts.windows(2) {
            let (l, h) = (w[0], w[1]);
            if in_x(0.5 * (l + h)) > 0.0 {
                match upper.last_mut() {
                    Some(last) if last.1 == l => last.1 = h,
                    _ => upper.push((l, h)),
                }
            }
        }

        let touches_pi = upper.last().is_some_and(|p| p.1 == PI);
        let region = if touches_pi {
            let mut ivs: Vec<AngleInterval> = Vec::new();
            for &(l, h) in &upper {
                if h == PI {
                    ivs.push(AngleInterval { lo: l, hi: TAU - l });
                } else {
                    ivs.push(AngleInterval { lo: l, hi: h });
                    ivs.push(AngleInterval { lo: TAU - h, hi: TAU - l });
                }
            }
            ivs.sort_by(|a, b| a.lo.total_cmp(&b.lo));
            PositiveRegion { frame: AngleFrame::Positive, intervals: ivs }
        } else {
            let mut ivs: Vec<AngleInterval> = Vec::new();
            for &(l, h) in &upper {
                if l == 0.0 {
                    ivs.push(AngleInterval { lo: -h, hi: h });
                } else {
                    ivs.push(AngleInterval { lo: l, hi: h });
                    ivs.push(AngleInterval { lo: -h, hi: -l });
                }
            }
            ivs.sort_by(|a, b| a.lo.total_cmp(&b.lo));
            PositiveRegion { frame: AngleFrame::Centered, intervals: ivs }
        };

        self.check_region_structure(&region)?;
        Ok(region)
    }

    /// Cross-checks the number of region boundaries against sign changes of
    /// `f'''` on a uniform grid around the circle.
    fn check_region_structure(&self, region: &PositiveRegion) -> Result<()> {
        let vals: Vec<f64> = (0..REGION_GRID).map(|k| self.eval(TAU * k as f64 / REGION_GRID as f64, 3)).collect();
        let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let signs: Vec<bool> = vals.iter().filter(|v| v.abs() > 1e-12 * scale).map(|&v| v > 0.0).collect();
        let mut changes = 0;
        for k in 0..signs.len() {
            if signs[k] != signs[(k + 1) % signs.len()] {
                changes += 1;
            }
        }
        let expected = if region.is_full_circle() { 0 } else { 2 * region.arc_count() };
        if changes != expected {
            return Err(SyncError::RegionStructureUnknown(format!(
                "{changes} sign changes of f''' on the grid, but {expected} region boundaries"
            )));
        }
        Ok(())
    }

    /// `∫_{-π}^{π} |f'''(x)|₊ dx`.
    pub fn l1_f3_plus(&self, method: L1Method) -> Result<f64> {
        let region = self.f3_positive_region()?;
        match method {
            L1Method::RegionAntiderivative => {
                Ok(region.intervals.iter().map(|iv| self.eval(iv.hi, 2) - self.eval(iv.lo, 2)).sum())
            }
            L1Method::Quadrature => {
                let mut cuts = vec![-PI];
                cuts.extend(region.breakpoints_centered().into_iter().filter(|&x| x > -PI && x < PI));
                cuts.push(PI);
                let tol = L1_QUAD_TOL / (cuts.len() - 1) as f64;
                let mut total = 0.0;
                for w in cuts.windows(2) {
                    total += adaptive_simpson(|x| self.eval(x, 3).max(0.0), w[0], w[1], tol, MAX_SUBDIVISIONS)?;
                }
                Ok(total)
            }
        }
    }

    /// Canonical spec string (`sa:<beta>`, `kuramoto`, `asym:<a>:<b>:<inner>`).
    pub fn spec_string(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for InteractionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            KernelFamily::SelfAttention { beta } => write!(f, "sa:{beta}"),
            KernelFamily::Kuramoto => write!(f, "kuramoto"),
            KernelFamily::HCos(p) => write!(f, "hcos:{}", p.name()),
            KernelFamily::Asymmetric { a, b, base } => write!(f, "asym:{a}:{b}:{base}"),
        }
    }
}

/// `p(z)` with `f_β'''(x) = p(cos x)·e^{β(cos x − 1)}`.
pub fn cos_polynomial(beta: f64, z: f64) -> f64 {
    let w = 1.0 - z * z;
    -(z + 3.0 * beta * z * z - 4.0 * beta * w - 6.0 * beta * beta * z * w + beta * beta * beta * w * w)
}

/// Closed-form `τ(β) = arccos((√(1+4β²) − 1)/(2β))`, written in the
/// cancellation-free form `arccos(2β/(1 + √(1+4β²)))`.
pub fn self_attention_tau(beta: f64) -> f64 {
    if beta == 0.0 {
        return FRAC_PI_2;
    }
    let c = 2.0 * beta / (1.0 + (1.0 + 4.0 * beta * beta).sqrt());
    c.clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid kernel spec '{spec}': {reason}")]
pub struct ParseKernelError {
    pub spec: String,
    pub reason: String,
}

impl FromStr for InteractionKernel {
    type Err = ParseKernelError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = |reason: &str| ParseKernelError { spec: s.to_string(), reason: reason.to_string() };
        let num = |t: &str, what: &str| -> std::result::Result<f64, ParseKernelError> {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(&format!("{what} '{t}' is not a finite number")))
        };
        let s_trim = s.trim();
        if s_trim.eq_ignore_ascii_case("kuramoto") {
            return Ok(InteractionKernel::kuramoto());
        }
        if let Some(rest) = s_trim.strip_prefix("sa:") {
            return Ok(InteractionKernel::self_attention(num(rest, "beta")?));
        }
        if let Some(rest) = s_trim.strip_prefix("asym:") {
            let mut parts = rest.splitn(3, ':');
            let (Some(a), Some(b), Some(inner)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected asym:<a>:<b>:<inner-spec>"));
            };
            let base: InteractionKernel = inner.parse()?;
            return InteractionKernel::asymmetric_combine(&base, num(a, "a")?, num(b, "b")?).map_err(|e| err(&e.to_string()));
        }
        Err(err("expected sa:<beta>, kuramoto or asym:<a>:<b>:<inner-spec>"))
    }
}
