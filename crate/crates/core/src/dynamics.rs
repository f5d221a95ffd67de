//! Particle dynamics on the circle.
//!
//! One vector field covers the four mean-field systems:
//!
//! ```text
//! v_i = −(w1_i / g_i(x)) · Σ_j c_j f(x_i − x_j)
//! ```
//!
//! with `c` the particle weights, `w1` optional row weights (rank-one
//! coupling `w1·cᵀ`) and `g_i` either 1 or the attention normalizer
//! `Σ_j e^{β(cos(x_i − x_j) − 1)}`.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Result, SyncError};
use crate::interaction::{wrap_angle, wrap_centered, InteractionKernel, KernelFamily};

/// Below this sup-norm of the field a non-synchronized state counts as stationary.
pub const STATIONARY_FIELD_TOL: f64 = 1e-13;
/// Adaptive steps smaller than this abort the integration.
pub const MIN_ADAPTIVE_DT: f64 = 1e-14;
/// Bound on `h·ρ` for the adaptive integrator, inside its real stability interval (about 3.3).
const STIFF_STEP_LIMIT: f64 = 2.5;

/// `n` angles, each kept in `[0, 2π)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParticleState {
    angles: Vec<f64>,
}

impl ParticleState {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(SyncError::InvalidInput("a state needs at least one particle".into()));
        }
        if let Some(bad) = angles.iter().find(|a| !a.is_finite()) {
            return Err(SyncError::InvalidInput(format!("non-finite angle {bad}")));
        }
        Ok(ParticleState { angles: angles.into_iter().map(wrap_angle).collect() })
    }

    /// `n` copies of the same angle.
    pub fn synchronized(n: usize, at: f64) -> Result<Self> {
        Self::new(vec![at; n])
    }

    /// Vertices of the regular `n`-gon starting at 0.
    pub fn ngon(n: usize) -> Result<Self> {
        Self::new((0..n).map(|k| TAU * k as f64 / n as f64).collect())
    }

    /// I.i.d. uniform angles on `[0, 2π)`.
    pub fn uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..n).map(|_| rng.random_range(0.0..TAU)).collect())
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn into_angles(self) -> Vec<f64> {
        self.angles
    }

    pub fn n(&self) -> usize {
        self.angles.len()
    }

    /// Every angle rotated by `delta`.
    pub fn rotated(&self, delta: f64) -> Self {
        ParticleState { angles: self.angles.iter().map(|a| wrap_angle(a + delta)).collect() }
    }
}

/// Particle weights `c` and optional row weights `w1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightSpec {
    pub c: Vec<f64>,
    pub w1: Option<Vec<f64>>,
}

impl WeightSpec {
    pub fn unit(n: usize) -> Self {
        WeightSpec { c: vec![1.0; n], w1: None }
    }

    pub fn new(c: Vec<f64>, w1: Option<Vec<f64>>) -> Result<Self> {
        let w = WeightSpec { c, w1 };
        w.validate(w.c.len())?;
        Ok(w)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let check = |name: &str, v: &[f64]| {
            if v.len() != n {
                return Err(SyncError::InvalidInput(format!("{name} has {} entries, expected {n}", v.len())));
            }
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(SyncError::InvalidInput(format!("{name} contains non-positive weight {bad}")));
            }
            Ok(())
        };
        check("c", &self.c)?;
        if let Some(w1) = &self.w1 {
            check("w1", w1)?;
        }
        Ok(())
    }

    pub fn is_unit(&self) -> bool {
        self.w1.is_none() && self.c.iter().all(|&c| c == 1.0)
    }
}

/// Velocity normalization `g_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerSpec {
    #[default]
    None,
    /// `g_i = Σ_j e^{β(cos(x_i − x_j) − 1)}`; self-attention kernels only.
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IntegratorKind {
    Rk4Fixed { dt: f64 },
    Rk45Adaptive { dt_init: f64, rtol: f64, atol: f64 },
}

impl Default for IntegratorKind {
    fn default() -> Self {
        IntegratorKind::Rk45Adaptive { dt_init: 1e-3, rtol: 1e-9, atol: 1e-11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub integrator: IntegratorKind,
    pub t_max: f64,
    pub sample_every: f64,
    pub sync_tol: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { integrator: IntegratorKind::default(), t_max: 1e4, sample_every: 1.0, sync_tol: 1e-6, seed: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SyncError::InvalidInput(msg));
        match self.integrator {
            IntegratorKind::Rk4Fixed { dt } if !(dt > 0.0) => return bad(format!("dt must be positive, got {dt}")),
            IntegratorKind::Rk45Adaptive { dt_init, rtol, atol }
                if !(dt_init > 0.0 && rtol >= 0.0 && atol >= 0.0 && rtol + atol > 0.0) =>
            {
                return bad(format!("invalid adaptive settings dt_init={dt_init}, rtol={rtol}, atol={atol}"))
            }
            _ => {}
        }
        if !(self.t_max > 0.0) || !(self.sample_every > 0.0) || !(self.sync_tol > 0.0) {
            return bad(format!(
                "t_max, sample_every and sync_tol must be positive (got {}, {}, {})",
                self.t_max, self.sample_every, self.sync_tol
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Synchronized,
    TMaxReached,
    StationaryNonsync,
}

impl TerminalStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalStatus::Synchronized => "synchronized",
            TerminalStatus::TMaxReached => "t_max_reached",
            TerminalStatus::StationaryNonsync => "stationary_nonsync",
        }
    }
}

/// Time-sampled solution.
///
/// `energy_slack[k]` accumulates the integrator's local error estimate of the
/// energy over the steps between samples `k − 1` and `k`. Energies are NaN
/// for kernels without a gradient structure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ParticleState>,
    pub energies: Vec<f64>,
    pub diameters: Vec<f64>,
    pub energy_slack: Vec<f64>,
    pub terminal_status: TerminalStatus,
    pub steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &ParticleState {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn final_diameter(&self) -> f64 {
        *self.diameters.last().expect("trajectory has at least one sample")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A kernel, weights and normalizer bound together for repeated evaluation.
#[derive(Clone, Debug)]
pub struct ParticleSystem<'a> {
    kernel: &'a InteractionKernel,
    weights: WeightSpec,
    normalizer: NormalizerSpec,
    /// `Some(β)` when the pair force is `sin·e^{β(cos−1)}` (Kuramoto: β = 0).
    exp_beta: Option<f64>,
}

impl<'a> ParticleSystem<'a> {
    pub fn new(kernel: &'a InteractionKernel, weights: &WeightSpec, normalizer: NormalizerSpec, n: usize) -> Result<Self> {
        weights.validate(n)?;
        let exp_beta = match kernel.family() {
            KernelFamily::SelfAttention { beta } => Some(*beta),
            KernelFamily::Kuramoto => Some(0.0),
            _ => None,
        };
        if normalizer == NormalizerSpec::Attention && exp_beta.is_none() {
            return Err(SyncError::UnsupportedKernel(format!(
                "attention normalization needs a self-attention kernel, got {kernel}"
            )));
        }
        Ok(ParticleSystem { kernel, weights: weights.clone(), normalizer, exp_beta })
    }

    pub fn kernel(&self) -> &InteractionKernel {
        self.kernel
    }

    pub fn weights(&self) -> &WeightSpec {
        &self.weights
    }

    pub fn normalizer(&self) -> NormalizerSpec {
        self.normalizer
    }

    /// Force sums `s_i = Σ_j c_j f(x_i − x_j)` and normalizers `g_i`.
    fn forces(&self, x: &[f64], s: &mut [f64], g: &mut [f64]) {
        let n = x.len();
        let c = &self.weights.c;
        s.fill(0.0);
        g.fill(1.0);
        match self.exp_beta {
            Some(beta) => {
                // Angle-addition form of sin(x_i − x_j) and cos(x_i − x_j).
                let (sn, cs): (Vec<f64>, Vec<f64>) = x.iter().map(|a| a.sin_cos()).unzip();
                let track_g = self.normalizer == NormalizerSpec::Attention;
                for i in 0..n {
                    let (si, ci) = (sn[i], cs[i]);
                    let mut acc = 0.0;
                    let mut gacc = 0.0;
                    for j in (i + 1)..n {
                        let sin_d = si * cs[j] - ci * sn[j];
                        let e = if beta == 0.0 { 1.0 } else { (beta * (ci * cs[j] + si * sn[j] - 1.0)).exp() };
                        let f = sin_d * e;
                        acc += c[j] * f;
                        s[j] -= c[i] * f;
                        if track_g {
                            gacc += e;
                            g[j] += e;
                        }
                    }
                    s[i] += acc;
                    g[i] += gacc;
                }
            }
            None if self.kernel.is_odd() => {
                for i in 0..n {
                    for j in (i + 1)..n {
                        let f = self.kernel.eval(wrap_centered(x[i] - x[j]), 0);
                        s[i] += c[j] * f;
                        s[j] -= c[i] * f;
                    }
                }
            }
            None => {
                for i in 0..n {
                    for j in 0..n {
                        s[i] += c[j] * self.kernel.eval(wrap_centered(x[i] - x[j]), 0);
                    }
                }
            }
        }
    }

    /// `s_i = Σ_j c_j f(x_i − x_j)`.
    pub fn force_sums(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; x.len()];
        let mut g = vec![1.0; x.len()];
        self.forces(x, &mut s, &mut g);
        s
    }

    /// Writes the velocity into `v` and the raw force sums into `s`.
    pub fn field_into(&self, x: &[f64], v: &mut [f64], s: &mut [f64]) {
        let mut g = vec![1.0; x.len()];
        self.forces(x, s, &mut g);
        let w1 = self.weights.w1.as_deref();
        for i in 0..x.len() {
            let row = w1.map_or(1.0, |w| w[i]);
            v[i] = -(row / g[i]) * s[i];
        }
    }

    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; x.len()];
        let mut s = vec![0.0; x.len()];
        self.field_into(x, &mut v, &mut s);
        v
    }

    /// `E_w = ½ Σ_{i,j} c_i c_j φ(cos(x_i − x_j))`.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        if !self.kernel.is_gradient() {
            return Err(SyncError::UnsupportedKernel(format!("{} has no energy", self.kernel)));
        }
        let c = &self.weights.c;
        let n = x.len();
        let mut diag = 0.0;
        let phi1 = self.kernel.phi(1.0)?;
        for &ci in c {
            diag += ci * ci * phi1;
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += c[i] * c[j] * self.kernel.phi((x[i] - x[j]).cos())?;
            }
        }
        Ok(0.5 * diag + off)
    }

    /// Analytic Jacobian `∂v_i/∂x_k`, including the normalizer terms.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let c = &self.weights.c;
        let mut s = vec![0.0; n];
        let mut g = vec![1.0; n];
        self.forces(x, &mut s, &mut g);

        // ds[i,k] = ∂s_i/∂x_k
        let mut ds = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for k in 0..n {
                if k == i {
                    continue;
                }
                let fp = self.kernel.eval(wrap_centered(x[i] - x[k]), 1);
                ds[(i, k)] = -c[k] * fp;
                diag += c[k] * fp;
            }
            ds[(i, i)] = diag;
        }

        let mut jac = DMatrix::<f64>::zeros(n, n);
        let w1 = self.weights.w1.as_deref();
        let beta = self.exp_beta.unwrap_or(0.0);
        for i in 0..n {
            let row = w1.map_or(1.0, |w| w[i]);
            match self.normalizer {
                NormalizerSpec::None => {
                    for k in 0..n {
                        jac[(i, k)] = -row * ds[(i, k)];
                    }
                }
                NormalizerSpec::Attention => {
                    // ∂g_i/∂x_k = β sin(x_i − x_k) e^{β(cos(x_i − x_k) − 1)}, k ≠ i.
                    let mut dg = vec![0.0; n];
                    let mut dg_ii = 0.0;
                    for k in 0..n {
                        if k == i {
                            continue;
                        }
                        let d = x[i] - x[k];
                        let term = beta * d.sin() * (beta * (d.cos() - 1.0)).exp();
                        dg[k] = term;
                        dg_ii -= term;
                    }
                    dg[i] = dg_ii;
                    for k in 0..n {
                        jac[(i, k)] = -row * (ds[(i, k)] / g[i] - s[i] * dg[k] / (g[i] * g[i]));
                    }
                }
            }
        }
        jac
    }

    /// Hessian of `E_w`: the graph Laplacian of edge weights `−c_i c_j f'(x_i − x_j)`.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if !self.kernel.is_gradient() {
            return Err(SyncError::UnsupportedKernel(format!("{} has no energy Hessian", self.kernel)));
        }
        let n = x.len();
        let c = &self.weights.c;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let w = c[i] * c[j] * self.kernel.eval(wrap_centered(x[i] - x[j]), 1);
                h[(i, j)] = w;
                h[(j, i)] = w;
                h[(i, i)] -= w;
                h[(j, j)] -= w;
            }
        }
        Ok(h)
    }
}

/// Velocity of every particle at `state`.
pub fn vector_field(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    normalizer: NormalizerSpec,
) -> Result<Vec<f64>> {
    Ok(ParticleSystem::new(kernel, weights, normalizer, state.n())?.field(state.angles()))
}

/// Weighted energy `E_w` at `state`.
pub fn energy(state: &ParticleState, kernel: &InteractionKernel, weights: &WeightSpec) -> Result<f64> {
    ParticleSystem::new(kernel, weights, NormalizerSpec::None, state.n())?.energy(state.angles())
}

/// Circular gaps between consecutive sorted angles, wraparound gap last.
pub fn circular_gaps(angles: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let mut gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.push(TAU - (sorted[n - 1] - sorted[0]));
    gaps
}

/// Length of the shortest arc containing every particle.
pub fn circular_diameter(state: &ParticleState) -> f64 {
    let gaps = circular_gaps(state.angles());
    let largest = gaps.iter().cloned().fold(0.0, f64::max);
    (TAU - largest).max(0.0)
}

/// Number of runs of circularly sorted angles separated by gaps of at
/// least `gap_threshold`.
pub fn cluster_count(state: &ParticleState, gap_threshold: f64) -> usize {
    let big = circular_gaps(state.angles()).iter().filter(|&&g| g >= gap_threshold).count();
    big.max(1)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

// Dormand–Prince 5(4) tableau. The field is autonomous, so the nodes are not needed.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// b − b*, fifth-order minus embedded fourth-order weights.
const DP_E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// A resumable integration of one initial condition.
pub struct Simulation<'a> {
    system: ParticleSystem<'a>,
    config: SimConfig,
    x: Vec<f64>,
    t: f64,
    h: f64,
    /// Field and force sums at `x` (first stage of the next step).
    v: Vec<f64>,
    s: Vec<f64>,
    energy: Option<f64>,
    slack: f64,
    steps: usize,
    status: Option<TerminalStatus>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        state: &ParticleState,
        kernel: &'a InteractionKernel,
        weights: &WeightSpec,
        normalizer: NormalizerSpec,
        config: &SimConfig,
    ) -> Result<Self> {
        config.validate()?;
        let system = ParticleSystem::new(kernel, weights, normalizer, state.n())?;
        let n = state.n();
        let x = state.angles().to_vec();
        let mut v = vec![0.0; n];
        let mut s = vec![0.0; n];
        system.field_into(&x, &mut v, &mut s);
        let energy = if kernel.is_gradient() { Some(system.energy(&x)?) } else { None };
        let h = match config.integrator {
            IntegratorKind::Rk4Fixed { dt } => dt,
            IntegratorKind::Rk45Adaptive { dt_init, .. } => dt_init,
        };
        let mut sim =
            Simulation { system, config: config.clone(), x, t: 0.0, h, v, s, energy, slack: 0.0, steps: 0, status: None };
        sim.status = sim.detect_terminal();
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn angles(&self) -> &[f64] {
        &self.x
    }

    pub fn state(&self) -> ParticleState {
        ParticleState { angles: self.x.clone() }
    }

    pub fn status(&self) -> Option<TerminalStatus> {
        self.status
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Current velocity.
    pub fn velocity(&self) -> &[f64] {
        &self.v
    }

    pub fn energy(&self) -> f64 {
        self.energy.unwrap_or(f64::NAN)
    }

    /// Accumulated energy error estimate since the last call.
    pub fn take_slack(&mut self) -> f64 {
        std::mem::take(&mut self.slack)
    }

    fn detect_terminal(&self) -> Option<TerminalStatus> {
        let diameter = circular_diameter(&ParticleState { angles: self.x.clone() });
        if diameter < self.config.sync_tol {
            Some(TerminalStatus::Synchronized)
        } else if sup_norm(&self.v) < STATIONARY_FIELD_TOL {
            Some(TerminalStatus::StationaryNonsync)
        } else {
            None
        }
    }

    /// Integrates up to `t_target` or until a terminal state is detected.
    pub fn advance_to(&mut self, t_target: f64) -> Result<Option<TerminalStatus>> {
        while self.status.is_none() && self.t < t_target {
            let remaining = t_target - self.t;
            match self.config.integrator {
                IntegratorKind::Rk4Fixed { dt } => {
                    // Snap to the target when within rounding of it.
                    let h = if remaining <= dt * (1.0 + 1e-12) { remaining } else { dt };
                    self.rk4_step(h)?;
                    self.t = if h == remaining { t_target } else { self.t + h };
                }
                IntegratorKind::Rk45Adaptive { rtol, atol, .. } => {
                    let h = self.h.min(remaining);
                    if self.dopri_step(h, rtol, atol)? {
                        self.t = if h == remaining { t_target } else { self.t + h };
                    }
                }
            }
            self.steps += 1;
            self.status = self.detect_terminal();
        }
        Ok(self.status)
    }

    fn rk4_step(&mut self, h: f64) -> Result<()> {
        let n = self.x.len();
        let sys = &self.system;
        let c = &sys.weights.c;
        let edot = |v: &[f64], s: &[f64]| -> f64 { (0..n).map(|i| -c[i] * s[i] * v[i]).sum() };

        let stage =
            |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| wrap_angle(xi + a * ki)).collect() };
        let mut ks = vec![self.v.clone()];
        let mut ss = vec![self.s.clone()];
        for (a, prev) in [(0.5 * h, 0usize), (0.5 * h, 1), (h, 2)] {
            let xs = stage(&self.x, &ks[prev], a);
            let mut v = vec![0.0; n];
            let mut s = vec![0.0; n];
            sys.field_into(&xs, &mut v, &mut s);
            ks.push(v);
            ss.push(s);
        }
        let x_new: Vec<f64> =
            (0..n).map(|i| wrap_angle(self.x[i] + h / 6.0 * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]))).collect();

        if let Some(e_old) = self.energy {
            let predicted =
                h / 6.0 * (edot(&ks[0], &ss[0]) + 2.0 * edot(&ks[1], &ss[1]) + 2.0 * edot(&ks[2], &ss[2]) + edot(&ks[3], &ss[3]));
            let e_new = sys.energy(&x_new)?;
            self.slack += (e_new - e_old - predicted).abs();
            self.energy = Some(e_new);
        }
        self.x = x_new;
        sys.field_into(&self.x, &mut self.v, &mut self.s);
        Ok(())
    }

    /// One Dormand–Prince attempt; returns whether the step was accepted.
    fn dopri_step(&mut self, h: f64, rtol: f64, atol: f64) -> Result<bool> {
        if h < MIN_ADAPTIVE_DT {
            return Err(SyncError::StepSizeUnderflow { t: self.t, dt: h });
        }
        let n = self.x.len();
        let sys = &self.system;
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(self.v.clone());
        let mut xs = vec![0.0; n];
        let mut s_last = vec![0.0; n];
        let mut y6 = Vec::new();
        for (stage, row) in DP_A.iter().enumerate().skip(1) {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += row[j] * kj[i];
                }
                xs[i] = wrap_angle(self.x[i] + h * acc);
            }
            if stage == 5 {
                y6 = xs.clone();
            }
            let mut v = vec![0.0; n];
            sys.field_into(&xs, &mut v, &mut s_last);
            k.push(v);
        }
        // Stage 7 is evaluated at the fifth-order solution (FSAL).
        let x_new = xs;

        // Angles have no natural origin, so π sets the scale for rtol.
        let scale = atol + rtol * std::f64::consts::PI;
        let mut err_sq = 0.0;
        let mut err_vec = vec![0.0; n];
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += DP_E[j] * kj[i];
            }
            e *= h;
            err_vec[i] = e;
            err_sq += (e / scale).powi(2);
        }
        let err = (err_sq / n as f64).sqrt();

        if err <= 1.0 {
            let c = &sys.weights.c;
            // ∇E · (y5 − y4) with ∇_i E = −c_i s_i.
            let de: f64 = (0..n).map(|i| c[i] * s_last[i] * err_vec[i]).sum();
            self.slack += de.abs();

            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            self.h = h * factor;
            // Stages 6 and 7 share c = 1, so their difference quotient
            // estimates the dominant eigenvalue. Keeping h·ρ inside the real
            // stability interval stops stiff modes from hovering at the
            // tolerance level near stationary points.
            let (mut dk, mut dy) = (0.0, 0.0);
            for i in 0..n {
                dk += (k[6][i] - k[5][i]).powi(2);
                dy += wrap_centered(x_new[i] - y6[i]).powi(2);
            }
            if dy > 0.0 && dk > 0.0 {
                self.h = self.h.min(STIFF_STEP_LIMIT / (dk / dy).sqrt());
            }

            self.x = x_new;
            self.v = k.pop().expect("seven stages");
            self.s = s_last;
            if self.energy.is_some() {
                self.energy = Some(sys.energy(&self.x)?);
            }
            Ok(true)
        } else {
            self.h = h * (0.9 * err.powf(-0.2)).max(0.2);
            if self.h < MIN_ADAPTIVE_DT {
                return Err(SyncError::StepSizeUnderflow { t: self.t, dt: self.h });
            }
            Ok(false)
        }
    }
}

/// Integrates from `state`, sampling every `config.sample_every` and
/// stopping at synchronization, at a non-synchronized stationary state or
/// at `config.t_max`.
pub fn integrate(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    normalizer: NormalizerSpec,
    config: &SimConfig,
) -> Result<Trajectory> {
    let mut sim = Simulation::new(state, kernel, weights, normalizer, config)?;
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        energies: Vec::new(),
        diameters: Vec::new(),
        energy_slack: Vec::new(),
        terminal_status: TerminalStatus::TMaxReached,
        steps: 0,
    };
    let record = |sim: &mut Simulation, traj: &mut Trajectory| {
        let st = sim.state();
        traj.times.push(sim.time());
        traj.diameters.push(circular_diameter(&st));
        traj.states.push(st);
        traj.energies.push(sim.energy());
        traj.energy_slack.push(sim.take_slack());
    };
    record(&mut sim, &mut traj);

    let mut k = 0u64;
    while sim.status().is_none() && sim.time() < config.t_max {
        k += 1;
        let target = (k as f64 * config.sample_every).min(config.t_max);
        sim.advance_to(target)?;
        record(&mut sim, &mut traj);
    }
    traj.terminal_status = sim.status().unwrap_or(TerminalStatus::TMaxReached);
    traj.steps = sim.steps();
    Ok(traj)
}
