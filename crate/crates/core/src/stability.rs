//! Classification of stationary points: cluster structure, cut margins,
//! the gap lemma, and the spectra of the Jacobian and energy Hessian.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::dynamics::{NormalizerSpec, ParticleState, ParticleSystem, WeightSpec};
use crate::error::{Result, SyncError};
use crate::interaction::{wrap_angle, wrap_centered, InteractionKernel};

/// Distinct particle positions with multiplicities and the gaps between them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterDecomposition {
    /// Cluster representatives, ascending in `[0, 2π)`.
    pub thetas: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub cluster_weights: Vec<f64>,
    /// `gaps[k]` runs from `thetas[k]` to the next representative; the last one wraps.
    pub gaps: Vec<f64>,
    pub tau_max: f64,
    /// Particle indices of each cluster.
    pub members: Vec<Vec<usize>>,
}

impl ClusterDecomposition {
    pub fn k(&self) -> usize {
        self.thetas.len()
    }
}

/// Tolerances for [`classify_stationary_point`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassifyTolerances {
    pub merge_tol: f64,
    pub instability_tol: f64,
    pub residual_tol: f64,
}

impl Default for ClassifyTolerances {
    fn default() -> Self {
        ClassifyTolerances { merge_tol: 1e-8, instability_tol: 1e-9, residual_tol: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Synchronized,
    LocallyUnstable,
    StableNonsynchronized,
    Inconclusive,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Synchronized => "synchronized",
            Classification::LocallyUnstable => "locally_unstable",
            Classification::StableNonsynchronized => "stable_nonsynchronized",
            Classification::Inconclusive => "inconclusive",
        }
    }
}

/// Minimum cut sums per cluster and subset size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CutMargins {
    /// `per_cluster[ℓ][k − 1]` is the smallest cut sum over size-`k` subsets of cluster `ℓ`.
    pub per_cluster: Vec<Vec<f64>>,
    /// Infinite when no subset is admissible (a single particle).
    pub minimum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComplexEig {
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationaryReport {
    pub residual: f64,
    pub decomposition: ClusterDecomposition,
    pub cut_margins: CutMargins,
    /// `None` when the kernel has no stability angle.
    pub gap_lemma_ok: Option<bool>,
    /// Sorted by decreasing real part.
    pub jacobian_eigs: Vec<ComplexEig>,
    /// Ascending; `None` for kernels without an energy.
    pub hessian_eigs: Option<Vec<f64>>,
    pub classification: Classification,
    pub tolerances: ClassifyTolerances,
}

/// `max_i |Σ_j c_j f(x_i − x_j)|`.
pub fn stationarity_residual(state: &ParticleState, kernel: &InteractionKernel, weights: &WeightSpec) -> Result<f64> {
    let sys = ParticleSystem::new(kernel, weights, NormalizerSpec::None, state.n())?;
    Ok(sys.force_sums(state.angles()).iter().fold(0.0, |m, s| m.max(s.abs())))
}

/// Clusters with unit weights.
pub fn decompose_clusters(state: &ParticleState, merge_tol: f64) -> ClusterDecomposition {
    decompose_weighted_clusters(state, &vec![1.0; state.n()], merge_tol)
}

/// Merges circular runs whose consecutive gaps are at most `merge_tol`.
pub fn decompose_weighted_clusters(state: &ParticleState, c: &[f64], merge_tol: f64) -> ClusterDecomposition {
    let x = state.angles();
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));

    // gap_after[p] is the gap from order[p] to the next particle on the circle.
    let gap_after: Vec<f64> =
        (0..n).map(|p| if p + 1 < n { x[order[p + 1]] - x[order[p]] } else { TAU - (x[order[n - 1]] - x[order[0]]) }).collect();
    let (widest, widest_gap) =
        gap_after.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (p, &g)| if g > best.1 { (p, g) } else { best });

    let mut members: Vec<Vec<usize>> = Vec::new();
    if widest_gap <= merge_tol {
        members.push(order.clone());
    } else {
        // Start right after the widest gap so no cluster straddles the walk's seam.
        let start = (widest + 1) % n;
        let mut current = Vec::new();
        for step in 0..n {
            let p = (start + step) % n;
            current.push(order[p]);
            if gap_after[p] > merge_tol {
                members.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            members.push(current);
        }
    }

    let mut clusters: Vec<(f64, Vec<usize>)> = members
        .into_iter()
        .map(|m| {
            let anchor = x[m[0]];
            let mean_offset = m.iter().map(|&i| wrap_centered(x[i] - anchor)).sum::<f64>() / m.len() as f64;
            (wrap_angle(anchor + mean_offset), m)
        })
        .collect();
    clusters.sort_by(|a, b| a.0.total_cmp(&b.0));

    let thetas: Vec<f64> = clusters.iter().map(|c| c.0).collect();
    let k = thetas.len();
    let gaps: Vec<f64> =
        (0..k).map(|j| if j + 1 < k { thetas[j + 1] - thetas[j] } else { TAU - (thetas[k - 1] - thetas[0]) }).collect();
    let tau_max = gaps.iter().cloned().fold(0.0, f64::max);
    ClusterDecomposition {
        multiplicities: clusters.iter().map(|c| c.1.len()).collect(),
        cluster_weights: clusters.iter().map(|cl| cl.1.iter().map(|&i| c[i]).sum()).collect(),
        thetas,
        gaps,
        tau_max,
        members: clusters.into_iter().map(|c| c.1).collect(),
    }
}

/// Exact minimum cut sums `Σ_{i∈S, j∉S} c_i c_j f'(x_i − x_j)` over subsets
/// `S` of a single cluster.
///
/// For a size-`k` subset with weight sum `s` the cut sum is
/// `s·(f'(0)(W − s) + B)`, with `W` the cluster weight and `B` the outside
/// pull. This is concave in `s`, so the extremes of `s` (the `k` smallest or
/// `k` largest weights) attain the minimum.
pub fn cut_stability_margins(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    merge_tol: f64,
) -> Result<CutMargins> {
    weights.validate(state.n())?;
    let c = &weights.c;
    let x = state.angles();
    let dec = decompose_weighted_clusters(state, c, merge_tol);
    let fp0 = kernel.fp0();
    let single = dec.k() == 1;

    let mut per_cluster = Vec::with_capacity(dec.k());
    let mut minimum = f64::INFINITY;
    for (l, members) in dec.members.iter().enumerate() {
        let theta = dec.thetas[l];
        let mut inside = vec![false; x.len()];
        for &i in members {
            inside[i] = true;
        }
        let outside_pull: f64 =
            (0..x.len()).filter(|&j| !inside[j]).map(|j| c[j] * kernel.eval(wrap_centered(theta - x[j]), 1)).sum();
        let total = dec.cluster_weights[l];
        let mut w: Vec<f64> = members.iter().map(|&i| c[i]).collect();
        w.sort_by(f64::total_cmp);
        let cut = |s: f64| s * (fp0 * (total - s) + outside_pull);

        let sizes = if single { w.len() - 1 } else { w.len() };
        let mut row = Vec::with_capacity(sizes);
        let (mut small, mut large) = (0.0, 0.0);
        for k in 1..=sizes {
            small += w[k - 1];
            large += w[w.len() - k];
            let m = cut(small).min(cut(large));
            minimum = minimum.min(m);
            row.push(m);
        }
        per_cluster.push(row);
    }
    Ok(CutMargins { per_cluster, minimum })
}

/// True iff at most one cluster gap exceeds the stability angle `τ`.
pub fn gap_lemma_check(state: &ParticleState, kernel: &InteractionKernel, merge_tol: f64) -> Result<bool> {
    let tau = kernel.tau()?;
    let dec = decompose_clusters(state, merge_tol);
    Ok(dec.gaps.iter().filter(|&&g| g > tau).count() <= 1)
}

/// Analytic Jacobian of the vector field.
pub fn jacobian(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    normalizer: NormalizerSpec,
) -> Result<DMatrix<f64>> {
    Ok(ParticleSystem::new(kernel, weights, normalizer, state.n())?.jacobian(state.angles()))
}

/// Energy Hessian (graph Laplacian of `−c_i c_j f'(x_i − x_j)`).
pub fn hessian(state: &ParticleState, kernel: &InteractionKernel, weights: &WeightSpec) -> Result<DMatrix<f64>> {
    ParticleSystem::new(kernel, weights, NormalizerSpec::None, state.n())?.hessian(state.angles())
}

/// Eigenvalues of the energy Hessian, ascending.
pub fn hessian_spectrum(state: &ParticleState, kernel: &InteractionKernel, weights: &WeightSpec) -> Result<Vec<f64>> {
    let h = hessian(state, kernel, weights)?;
    Ok(sorted_symmetric_eigenvalues(h))
}

fn sorted_symmetric_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let mut eigs: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().cloned().collect();
    eigs.sort_by(f64::total_cmp);
    eigs
}

/// Jacobian eigenvalues sorted by decreasing real part.
pub fn jacobian_spectrum(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    normalizer: NormalizerSpec,
) -> Result<Vec<ComplexEig>> {
    let j = jacobian(state, kernel, weights, normalizer)?;
    let symmetric = (&j - j.transpose()).amax() <= 1e-14 * j.amax().max(1.0);
    let mut eigs: Vec<ComplexEig> = if symmetric {
        sorted_symmetric_eigenvalues(j).into_iter().map(|re| ComplexEig { re, im: 0.0 }).collect()
    } else {
        j.complex_eigenvalues().iter().map(|z| ComplexEig { re: z.re, im: z.im }).collect()
    };
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re));
    Ok(eigs)
}

/// Full stability report for a stationary point.
pub fn classify_stationary_point(
    state: &ParticleState,
    kernel: &InteractionKernel,
    weights: &WeightSpec,
    normalizer: NormalizerSpec,
    tol: &ClassifyTolerances,
) -> Result<StationaryReport> {
    let residual = stationarity_residual(state, kernel, weights)?;
    if !(residual < tol.residual_tol) {
        return Err(SyncError::NotStationary { residual, tolerance: tol.residual_tol });
    }
    let decomposition = decompose_weighted_clusters(state, &weights.c, tol.merge_tol);
    let cut_margins = cut_stability_margins(state, kernel, weights, tol.merge_tol)?;
    let gap_lemma_ok = match kernel.tau() {
        Ok(tau) => Some(decomposition.gaps.iter().filter(|&&g| g > tau).count() <= 1),
        Err(_) => None,
    };
    let jacobian_eigs = jacobian_spectrum(state, kernel, weights, normalizer)?;
    let hessian_eigs = if kernel.is_gradient() { Some(hessian_spectrum(state, kernel, weights)?) } else { None };

    let classification = if decomposition.k() == 1 {
        Classification::Synchronized
    } else if jacobian_eigs[0].re > tol.instability_tol {
        Classification::LocallyUnstable
    } else {
        // Drop the translation mode (the eigenvalue nearest zero).
        let zero_mode = jacobian_eigs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.re.hypot(a.1.im).total_cmp(&b.1.re.hypot(b.1.im)))
            .map(|(i, _)| i)
            .expect("n ≥ 1");
        let rest_stable =
            jacobian_eigs.iter().enumerate().filter(|&(i, _)| i != zero_mode).all(|(_, z)| z.re < -tol.instability_tol);
        if rest_stable {
            Classification::StableNonsynchronized
        } else {
            Classification::Inconclusive
        }
    };

    Ok(StationaryReport {
        residual,
        decomposition,
        cut_margins,
        gap_lemma_ok,
        jacobian_eigs,
        hessian_eigs,
        classification,
        tolerances: *tol,
    })
}
