//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use torus_sync::dynamics::{energy, vector_field, NormalizerSpec, ParticleState, WeightSpec};
use torus_sync::InteractionKernel;

pub fn random_state(rng: &mut ChaCha20Rng, n: usize) -> ParticleState {
    ParticleState::new((0..n).map(|_| rng.random_range(0.0..TAU)).collect()).unwrap()
}

pub fn random_weights(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.3..3.0)).collect()
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix, ascending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (apk, aqk) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (u, v) = (*apk, *aqk);
                    *apk = c * u - s * v;
                    *aqk = s * u + c * v;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eigs.sort_by(f64::total_cmp);
    eigs
}

pub fn fd_jacobian(state: &ParticleState, k: &InteractionKernel, w: &WeightSpec, norm: NormalizerSpec) -> DMatrix<f64> {
    let x = state.angles();
    let n = x.len();
    let h = 1e-6;
    let mut j = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let vp = vector_field(&ParticleState::new(xp).unwrap(), k, w, norm).unwrap();
        let vm = vector_field(&ParticleState::new(xm).unwrap(), k, w, norm).unwrap();
        for r in 0..n {
            j[(r, c)] = (vp[r] - vm[r]) / (2.0 * h);
        }
    }
    j
}

/// Central-difference Hessian of E, Richardson-extrapolated over `h` and `h/2`.
pub fn fd_energy_hessian(state: &ParticleState, k: &InteractionKernel, w: &WeightSpec) -> DMatrix<f64> {
    let coarse = fd_energy_hessian_step(state, k, w, 2e-3);
    let fine = fd_energy_hessian_step(state, k, w, 1e-3);
    (fine * 4.0 - coarse) / 3.0
}

fn fd_energy_hessian_step(state: &ParticleState, k: &InteractionKernel, w: &WeightSpec, h: f64) -> DMatrix<f64> {
    let x = state.angles();
    let n = x.len();
    let e = |dx: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in dx {
            y[i] += d;
        }
        energy(&ParticleState::new(y).unwrap(), k, w).unwrap()
    };
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                (e(&[(i, h)]) - 2.0 * e(&[]) + e(&[(i, -h)])) / (h * h)
            } else {
                (e(&[(i, h), (j, h)]) - e(&[(i, h), (j, -h)]) - e(&[(i, -h), (j, h)]) + e(&[(i, -h), (j, -h)])) / (4.0 * h * h)
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}
