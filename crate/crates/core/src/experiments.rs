//! Packaged numerical experiments: Monte-Carlo synchronization runs, the
//! negative-β counterexample, meta-stability profiles and audits of the
//! inequalities used to verify the criterion for the self-attention kernel.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::criterion::{check_criterion, Verdict, M_FULL_CIRCLE, M_SEMICIRCLE};
use crate::dynamics::{
    circular_diameter, cluster_count, integrate, NormalizerSpec, ParticleState, SimConfig, Simulation, TerminalStatus, WeightSpec,
};
use crate::error::{Result, SyncError};
use crate::interaction::{wrap_centered, AngleFrame, InteractionKernel};
use crate::numerics::{bisect_secant, scan_brackets};

/// One table cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Bool(bool),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Cell::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

/// Tabular outcome of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub parameters: BTreeMap<String, Value>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub pass: Option<bool>,
    pub seed: u64,
}

impl ExperimentResult {
    fn new(name: &str, columns: &[&str], seed: u64) -> Self {
        ExperimentResult {
            name: name.to_string(),
            parameters: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            pass: None,
            seed,
        }
    }

    fn param(mut self, key: &str, value: Value) -> Self {
        self.parameters.insert(key.to_string(), value);
        self
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// All cells of the named column.
    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let k = self.column_index(name)?;
        Some(self.rows.iter().map(|r| &r[k]).collect())
    }
}

/// Random generator for trial `stream` of a seeded experiment.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Largest sample-to-sample energy decrease beyond `10·slack`; `≤ 0` means
/// the trajectory is monotone within tolerance. NaN energies are skipped.
pub fn energy_excess(energies: &[f64], slack: &[f64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for k in 1..energies.len() {
        let (e0, e1) = (energies[k - 1], energies[k]);
        if e0.is_nan() || e1.is_nan() {
            continue;
        }
        worst = worst.max(e0 - e1 - 10.0 * slack[k]);
    }
    worst
}

/// Monte-Carlo synchronization study for the self-attention kernel.
pub fn monte_carlo_sync(
    beta: f64,
    n: usize,
    trials: usize,
    normalizer: NormalizerSpec,
    config: &SimConfig,
) -> Result<ExperimentResult> {
    let kernel = InteractionKernel::self_attention(beta);
    monte_carlo_sync_with(&kernel, &WeightSpec::unit(n), trials, normalizer, config)
}

/// Monte-Carlo synchronization study for any kernel and weights.
///
/// Trial `k` starts from i.i.d. uniform angles drawn from stream `k` of the
/// seed. Pass means every trial synchronized.
pub fn monte_carlo_sync_with(
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    trials: usize,
    normalizer: NormalizerSpec,
    config: &SimConfig,
) -> Result<ExperimentResult> {
    if trials == 0 {
        return Err(SyncError::InvalidInput("trials must be at least 1".into()));
    }
    let n = weights.c.len();
    weights.validate(n)?;
    config.validate()?;
    let outcomes: Vec<Result<Vec<Cell>>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial as u64);
            let init = ParticleState::uniform(n, &mut rng)?;
            let tr = integrate(&init, kernel, weights, normalizer, config)?;
            Ok(vec![
                trial.into(),
                tr.terminal_status.as_str().into(),
                tr.final_diameter().into(),
                tr.final_time().into(),
                tr.steps.into(),
                energy_excess(&tr.energies, &tr.energy_slack).into(),
            ])
        })
        .collect();

    let mut res = ExperimentResult::new(
        "monte_carlo_sync",
        &["trial", "status", "final_diameter", "t_final", "steps", "energy_excess"],
        config.seed,
    )
    .param("kernel", json!(kernel.spec_string()))
    .param("n", json!(n))
    .param("trials", json!(trials))
    .param("normalizer", json!(normalizer))
    .param("config", json!(config))
    .param("unit_weights", json!(weights.is_unit()));
    for row in outcomes {
        res.rows.push(row?);
    }
    let synced = res.rows.iter().all(|r| r[1].as_str() == Some(TerminalStatus::Synchronized.as_str()));
    res.pass = Some(synced);
    Ok(res)
}

/// Left side of the cluster balance equation
/// `m·sin(2α)e^{β cos 2α} + (n − 2m)·sin(α)e^{β cos α}` with `m = ⌊n/3⌋`.
pub fn counterexample_balance(beta: f64, n: usize, alpha: f64) -> f64 {
    let m = (n / 3) as f64;
    let n0 = (n - 2 * (n / 3)) as f64;
    m * (2.0 * alpha).sin() * (beta * (2.0 * alpha).cos()).exp() + n0 * alpha.sin() * (beta * alpha.cos()).exp()
}

/// Angle `α` of the outer clusters; `2π/3` exactly when `3 | n`.
pub fn counterexample_alpha(beta: f64, n: usize) -> Result<f64> {
    if !(beta < -2.0 / 3.0) || n < 3 {
        return Err(SyncError::InvalidInput(format!("counterexample needs β < −2/3 and n ≥ 3, got β={beta}, n={n}")));
    }
    if n.is_multiple_of(3) {
        return Ok(TAU / 3.0);
    }
    // The balance is positive on (0, π/2], so roots lie in (π/2, π).
    let g = |a: f64| counterexample_balance(beta, n, a);
    let lo = FRAC_PI_2 + 1e-9;
    let hi = PI - 1e-9;
    let target = TAU / 3.0;
    let mut best: Option<f64> = None;
    for (a, b) in scan_brackets(g, lo, hi, 4096) {
        let r = if a == b { a } else { bisect_secant(g, a, b, 1e-15)? };
        if best.is_none_or(|r0| (r - target).abs() < (r0 - target).abs()) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| SyncError::RootNotBracketed(format!("balance equation has no root in (π/2, π) for β={beta}, n={n}")))
}

/// Three-cluster stationary configuration for `β < −2/3`: `n − 2⌊n/3⌋`
/// particles at 0 and `⌊n/3⌋` at each of `±α`.
pub fn build_counterexample(beta: f64, n: usize) -> Result<ParticleState> {
    let alpha = counterexample_alpha(beta, n)?;
    let m = n / 3;
    let mut angles = vec![0.0; n - 2 * m];
    angles.extend(std::iter::repeat_n(alpha, m));
    angles.extend(std::iter::repeat_n(TAU - alpha, m));
    ParticleState::new(angles)
}

/// Largest deviation of `y` from `x` after removing the best common rotation
/// (the circular mean of the differences).
pub fn distance_mod_rotation(x: &ParticleState, y: &ParticleState) -> f64 {
    let d: Vec<f64> = x.angles().iter().zip(y.angles()).map(|(a, b)| wrap_centered(b - a)).collect();
    let (s, c) = d.iter().fold((0.0, 0.0), |(s, c), v| (s + v.sin(), c + v.cos()));
    let shift = s.atan2(c);
    d.iter().map(|v| wrap_centered(v - shift).abs()).fold(0.0, f64::max)
}

/// Integrates perturbed copies of the counterexample and measures how far
/// each ends from the original configuration modulo rotation.
pub fn counterexample_persistence(
    beta: f64,
    n: usize,
    trials: usize,
    magnitude: f64,
    radius: f64,
    config: &SimConfig,
) -> Result<ExperimentResult> {
    let base = build_counterexample(beta, n)?;
    let kernel = InteractionKernel::self_attention(beta);
    let weights = WeightSpec::unit(n);
    let rows: Vec<Result<Vec<Cell>>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            use rand::Rng;
            let mut rng = trial_rng(config.seed, trial as u64);
            let perturbed: Vec<f64> = base.angles().iter().map(|a| a + rng.random_range(-magnitude..=magnitude)).collect();
            let init = ParticleState::new(perturbed)?;
            let tr = integrate(&init, &kernel, &weights, NormalizerSpec::None, config)?;
            let dist = distance_mod_rotation(&base, tr.final_state());
            Ok(vec![
                trial.into(),
                tr.terminal_status.as_str().into(),
                dist.into(),
                tr.final_time().into(),
                (dist <= radius).into(),
            ])
        })
        .collect();
    let mut res = ExperimentResult::new(
        "counterexample_persistence",
        &["trial", "status", "distance", "t_final", "recaptured"],
        config.seed,
    )
    .param("beta", json!(beta))
    .param("n", json!(n))
    .param("magnitude", json!(magnitude))
    .param("radius", json!(radius))
    .param("config", json!(config));
    for r in rows {
        res.rows.push(r?);
    }
    res.pass = Some(res.rows.iter().all(|r| r[4].as_bool() == Some(true)));
    Ok(res)
}

/// Default clustering threshold `π/(4√β)` for meta-stability profiles.
pub fn metastability_threshold(beta: f64) -> f64 {
    PI / (4.0 * beta.sqrt())
}

/// Cluster count, diameter and energy at `sample_times` for one uniform
/// initialization of the self-attention dynamics.
pub fn metastability_profile(
    beta: f64,
    n: usize,
    seed: u64,
    sample_times: &[f64],
    gap_threshold: Option<f64>,
    normalizer: NormalizerSpec,
    config: &SimConfig,
) -> Result<ExperimentResult> {
    if !(beta > 0.0) {
        return Err(SyncError::InvalidInput(format!("meta-stability profile needs β > 0, got {beta}")));
    }
    if sample_times.iter().any(|t| !(*t >= 0.0)) || sample_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SyncError::InvalidInput("sample times must be nonnegative and ascending".into()));
    }
    let threshold = gap_threshold.unwrap_or_else(|| metastability_threshold(beta));
    if !(threshold > 0.0) {
        return Err(SyncError::InvalidInput(format!("gap threshold must be positive, got {threshold}")));
    }
    let kernel = InteractionKernel::self_attention(beta);
    let mut rng = trial_rng(seed, 0);
    let init = ParticleState::uniform(n, &mut rng)?;
    let t_max = sample_times.last().copied().unwrap_or(0.0).max(config.t_max);
    let cfg = SimConfig { t_max, seed, ..config.clone() };
    let mut sim = Simulation::new(&init, &kernel, &WeightSpec::unit(n), normalizer, &cfg)?;

    let mut res = ExperimentResult::new("metastability_profile", &["t", "cluster_count", "diameter", "energy"], seed)
        .param("beta", json!(beta))
        .param("n", json!(n))
        .param("gap_threshold", json!(threshold))
        .param("normalizer", json!(normalizer))
        .param("sample_times", json!(sample_times))
        .param("config", json!(cfg));
    for &t in sample_times {
        sim.advance_to(t)?;
        let st = sim.state();
        res.rows.push(vec![t.into(), cluster_count(&st, threshold).into(), circular_diameter(&st).into(), sim.energy().into()]);
    }
    Ok(res)
}

/// Parameter ranges of the appendix inequalities for the self-attention kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AppendixRegime {
    /// `β ≥ 1`: `τ(f''(a) − f''(b)) < 2`.
    BetaAtLeastOne,
    /// `β ∈ [0.75, 1)`.
    BetaThreeQuarters,
    /// `β ∈ [0.5, 0.75)`.
    BetaHalf,
    /// `β ∈ (1/3, 0.5)`.
    BetaThird,
    /// `β ∈ (0, 1/3]`: `τ f''(a) > −2`.
    BetaSmall,
    /// `β ∈ [−0.16, 0)`: `τ f''(a) ≥ −2(1 + τ/π)`.
    BetaNegative,
}

impl AppendixRegime {
    pub const ALL: [AppendixRegime; 6] = [
        AppendixRegime::BetaAtLeastOne,
        AppendixRegime::BetaThreeQuarters,
        AppendixRegime::BetaHalf,
        AppendixRegime::BetaThird,
        AppendixRegime::BetaSmall,
        AppendixRegime::BetaNegative,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AppendixRegime::BetaAtLeastOne => "beta_ge_1",
            AppendixRegime::BetaThreeQuarters => "beta_0.75_1",
            AppendixRegime::BetaHalf => "beta_0.5_0.75",
            AppendixRegime::BetaThird => "beta_third_0.5",
            AppendixRegime::BetaSmall => "beta_0_third",
            AppendixRegime::BetaNegative => "beta_negative",
        }
    }

    /// `(lo, hi, lo_closed, hi_closed)`; the first regime is capped at 100.
    pub fn range(&self) -> (f64, f64, bool, bool) {
        match self {
            AppendixRegime::BetaAtLeastOne => (1.0, 100.0, true, true),
            AppendixRegime::BetaThreeQuarters => (0.75, 1.0, true, false),
            AppendixRegime::BetaHalf => (0.5, 0.75, true, false),
            AppendixRegime::BetaThird => (1.0 / 3.0, 0.5, false, false),
            AppendixRegime::BetaSmall => (0.0, 1.0 / 3.0, false, true),
            AppendixRegime::BetaNegative => (-0.16, 0.0, true, false),
        }
    }

    /// Semicircle bound used by the criterion in this regime.
    pub fn m(&self) -> f64 {
        match self {
            AppendixRegime::BetaNegative => M_SEMICIRCLE,
            _ => M_FULL_CIRCLE,
        }
    }

    pub fn contains(&self, beta: f64) -> bool {
        let (lo, hi, lc, hc) = self.range();
        (if lc { beta >= lo } else { beta > lo }) && (if hc { beta <= hi } else { beta < hi })
    }

    /// `points` values inside the regime; geometric for `β ≥ 1`.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let (lo, hi, lc, hc) = self.range();
        let p = points as f64;
        (0..points)
            .map(|k| {
                let k = k as f64;
                let t = match (lc, hc) {
                    (true, true) if points > 1 => k / (p - 1.0),
                    (true, true) => 0.0,
                    (false, true) => (k + 1.0) / p,
                    (true, false) => k / p,
                    (false, false) => (k + 1.0) / (p + 1.0),
                };
                if *self == AppendixRegime::BetaAtLeastOne {
                    lo * (hi / lo).powf(t)
                } else {
                    lo + (hi - lo) * t
                }
            })
            .collect()
    }
}

/// The default audit: 100 points in each regime.
pub fn default_appendix_grids() -> Vec<(AppendixRegime, Vec<f64>)> {
    AppendixRegime::ALL.iter().map(|r| (*r, r.grid(100))).collect()
}

/// Endpoints `(a, b)` of the positive region of `f'''` used by the audit.
fn audit_endpoints(kernel: &InteractionKernel, regime: AppendixRegime) -> Result<(f64, Option<f64>)> {
    let region = kernel.f3_positive_region()?;
    let unexpected = || SyncError::RegionStructureUnknown(format!("unexpected positive region for {kernel}: {region:?}"));
    match regime {
        AppendixRegime::BetaSmall | AppendixRegime::BetaNegative => {
            // A single arc (a, 2π − a) around π.
            match (region.frame, region.intervals.as_slice()) {
                (AngleFrame::Positive, [iv]) if (iv.lo + iv.hi - TAU).abs() < 1e-9 => Ok((iv.lo, None)),
                _ => Err(unexpected()),
            }
        }
        _ => {
            // (−a, −b) ∪ (b, a) with 0 < b < a < π.
            let pos: Vec<_> = region.intervals.iter().filter(|iv| iv.lo > 0.0).collect();
            match (region.frame, pos.as_slice()) {
                (AngleFrame::Centered, [iv]) if region.intervals.len() == 2 && iv.hi < PI => Ok((iv.hi, Some(iv.lo))),
                _ => Err(unexpected()),
            }
        }
    }
}

/// Evaluates the regime inequality at every grid point, alongside the
/// criterion verdict with the regime's `M`.
pub fn appendix_inequality_audit(grids: &[(AppendixRegime, Vec<f64>)]) -> Result<ExperimentResult> {
    for (regime, grid) in grids {
        if let Some(bad) = grid.iter().find(|b| !regime.contains(**b)) {
            return Err(SyncError::InvalidInput(format!("β={bad} lies outside regime {}", regime.name())));
        }
    }
    let jobs: Vec<(AppendixRegime, f64)> = grids.iter().flat_map(|(r, g)| g.iter().map(move |b| (*r, *b))).collect();
    let rows: Vec<Result<Vec<Cell>>> = jobs
        .par_iter()
        .map(|&(regime, beta)| {
            let kernel = InteractionKernel::self_attention(beta);
            let tau = kernel.tau()?;
            let (a, b) = audit_endpoints(&kernel, regime)?;
            let f2 = |x: f64| kernel.eval(x, 2);
            let (lhs, bound, holds) = match (regime, b) {
                (AppendixRegime::BetaSmall, _) => {
                    let lhs = tau * f2(a);
                    (lhs, -2.0, lhs > -2.0)
                }
                (AppendixRegime::BetaNegative, _) => {
                    let lhs = tau * f2(a);
                    let bound = -2.0 * (1.0 + tau / PI);
                    (lhs, bound, lhs >= bound)
                }
                (_, Some(b)) => {
                    let lhs = tau * (f2(a) - f2(b));
                    (lhs, 2.0, lhs < 2.0)
                }
                (_, None) => unreachable!("two-interval regimes always yield b"),
            };
            let verdict = check_criterion(&kernel, regime.m())?.verdict;
            Ok(vec![
                regime.name().into(),
                beta.into(),
                tau.into(),
                a.into(),
                b.unwrap_or(f64::NAN).into(),
                lhs.into(),
                bound.into(),
                holds.into(),
                (verdict == Verdict::Holds).into(),
            ])
        })
        .collect();
    let mut res = ExperimentResult::new(
        "appendix_inequality_audit",
        &["regime", "beta", "tau", "a", "b", "lhs", "bound", "holds", "criterion_holds"],
        0,
    )
    .param(
        "regimes",
        json!(grids.iter().map(|(r, g)| json!({"regime": r.name(), "points": g.len(), "M": r.m()})).collect::<Vec<_>>()),
    );
    for r in rows {
        res.rows.push(r?);
    }
    res.pass = Some(res.rows.iter().all(|r| r[7].as_bool() == Some(true)));
    Ok(res)
}

/// Monotonicity of `√β·τ` and the bound `τ < 1/√β` over a positive grid.
pub fn tau_property_audit(beta_grid: &[f64]) -> Result<ExperimentResult> {
    if let Some(bad) = beta_grid.iter().find(|b| !(**b > 0.0)) {
        return Err(SyncError::InvalidInput(format!("τ audit needs positive β, got {bad}")));
    }
    let mut res = ExperimentResult::new("tau_property_audit", &["beta", "sqrt_beta_tau", "inv_sqrt_beta_minus_tau"], 0)
        .param("points", json!(beta_grid.len()));
    let mut increasing = true;
    let mut positive = true;
    let mut prev: Option<(f64, f64)> = None;
    for &beta in beta_grid {
        let tau = InteractionKernel::self_attention(beta).tau()?;
        let scaled = beta.sqrt() * tau;
        let gap = 1.0 / beta.sqrt() - tau;
        if let Some((pb, ps)) = prev {
            if beta > pb && scaled <= ps {
                increasing = false;
            }
        }
        positive &= gap > 0.0;
        prev = Some((beta, scaled));
        res.rows.push(vec![beta.into(), scaled.into(), gap.into()]);
    }
    res.pass = Some(increasing && positive);
    Ok(res)
}

/// `n` geometrically spaced points on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect(),
    }
}
