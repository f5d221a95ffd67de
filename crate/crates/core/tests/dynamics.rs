use std::f64::consts::{FRAC_PI_2, PI, TAU};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use torus_sync::dynamics::{
    circular_diameter, cluster_count, energy, integrate, vector_field, IntegratorKind, NormalizerSpec, ParticleState, SimConfig,
    TerminalStatus, WeightSpec,
};
use torus_sync::experiments::build_counterexample;
use torus_sync::interaction::wrap_centered;
use torus_sync::{InteractionKernel, SyncError};

fn sa(beta: f64) -> InteractionKernel {
    InteractionKernel::self_attention(beta)
}

fn rk4(dt: f64, t_max: f64) -> SimConfig {
    SimConfig { integrator: IntegratorKind::Rk4Fixed { dt }, t_max, sample_every: 1.0, ..SimConfig::default() }
}

fn random_angles(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..TAU)).collect()
}

fn random_weights(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.3..3.0)).collect()
}

fn max_angle_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| wrap_centered(x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn field_examples() {
    let k = InteractionKernel::kuramoto();
    let sync = ParticleState::synchronized(6, 2.5).unwrap();
    for norm in [NormalizerSpec::None, NormalizerSpec::Attention] {
        let v = vector_field(&sync, &k, &WeightSpec::unit(6), norm).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }
    let v = vector_field(&ParticleState::new(vec![0.0, PI]).unwrap(), &k, &WeightSpec::unit(2), NormalizerSpec::None).unwrap();
    assert!(v.iter().all(|x| x.abs() < 1e-15));
    let v =
        vector_field(&ParticleState::new(vec![0.0, FRAC_PI_2]).unwrap(), &k, &WeightSpec::unit(2), NormalizerSpec::None).unwrap();
    assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] + 1.0).abs() < 1e-15);
}

#[test]
fn field_matches_direct_sum() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let beta = 1.7;
    let x = random_angles(&mut rng, 7);
    let c = random_weights(&mut rng, 7);
    let w1 = random_weights(&mut rng, 7);
    let st = ParticleState::new(x.clone()).unwrap();
    let weights = WeightSpec::new(c.clone(), Some(w1.clone())).unwrap();
    let v = vector_field(&st, &sa(beta), &weights, NormalizerSpec::Attention).unwrap();
    for i in 0..7 {
        let mut force = 0.0;
        let mut g = 0.0;
        for j in 0..7 {
            let d = x[i] - x[j];
            force += c[j] * d.sin() * (beta * (d.cos() - 1.0)).exp();
            g += (beta * (d.cos() - 1.0)).exp();
        }
        assert!((v[i] + w1[i] * force / g).abs() < 1e-13);
    }
}

#[test]
fn energy_examples() {
    let w4 = WeightSpec::unit(4);
    let sync4 = ParticleState::synchronized(4, 0.3).unwrap();
    assert!((energy(&sync4, &InteractionKernel::kuramoto(), &w4).unwrap() - 8.0).abs() < 1e-12);
    let n = 7;
    let sync = ParticleState::synchronized(n, 1.0).unwrap();
    let e = energy(&sync, &sa(1.0), &WeightSpec::unit(n)).unwrap();
    assert!((e - (n * n) as f64 / 2.0).abs() < 1e-12);
    let asym = InteractionKernel::asymmetric_combine(&sa(1.0), 1.0, 2.0).unwrap();
    assert!(matches!(energy(&sync4, &asym, &w4), Err(SyncError::UnsupportedKernel(_))));
}

/// `dE/dt = Σ_i (c_i g_i / w1_i) v_i²` along the flow, checked by a central
/// difference of E in the direction of the field.
#[test]
fn energy_rate_matches_finite_difference() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for &beta in &[-0.5, 0.0, 2.0] {
        for normalized in [false, true] {
            for weighted in [false, true] {
                let n = 9;
                let x = random_angles(&mut rng, n);
                let (c, w1) = if weighted {
                    (random_weights(&mut rng, n), random_weights(&mut rng, n))
                } else {
                    (vec![1.0; n], vec![1.0; n])
                };
                let weights = WeightSpec::new(c.clone(), Some(w1.clone())).unwrap();
                let norm = if normalized { NormalizerSpec::Attention } else { NormalizerSpec::None };
                let k = sa(beta);
                let v = vector_field(&ParticleState::new(x.clone()).unwrap(), &k, &weights, norm).unwrap();
                let eps = 1e-5;
                let shifted = |s: f64| {
                    let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                    energy(&ParticleState::new(y).unwrap(), &k, &weights).unwrap()
                };
                let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let exact: f64 = (0..n)
                    .map(|i| {
                        let g = if normalized { (0..n).map(|j| (beta * ((x[i] - x[j]).cos() - 1.0)).exp()).sum() } else { 1.0 };
                        c[i] * g / w1[i] * v[i] * v[i]
                    })
                    .sum();
                assert!(exact >= 0.0);
                assert!((fd - exact).abs() < 1e-6 * exact.max(1.0), "β={beta} norm={normalized} w={weighted}: {fd} vs {exact}");
            }
        }
    }
}

#[test]
fn integrate_examples() {
    let k = InteractionKernel::kuramoto();
    let sync = ParticleState::synchronized(4, 1.0).unwrap();
    let tr = integrate(&sync, &k, &WeightSpec::unit(4), NormalizerSpec::None, &SimConfig::default()).unwrap();
    assert_eq!(tr.terminal_status, TerminalStatus::Synchronized);
    assert_eq!(tr.final_time(), 0.0);

    let st = ParticleState::new(vec![0.0, 0.1, 0.2]).unwrap();
    let cfg = SimConfig { t_max: 100.0, ..SimConfig::default() };
    let tr = integrate(&st, &k, &WeightSpec::unit(3), NormalizerSpec::None, &cfg).unwrap();
    assert_eq!(tr.terminal_status, TerminalStatus::Synchronized);
    assert!(tr.final_diameter() < 1e-6);
    assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(tr.times.len(), tr.states.len());
    assert_eq!(tr.times.len(), tr.energies.len());

    let ce = build_counterexample(-1.0, 9).unwrap();
    let tr = integrate(&ce, &sa(-1.0), &WeightSpec::unit(9), NormalizerSpec::None, &SimConfig::default()).unwrap();
    assert_eq!(tr.terminal_status, TerminalStatus::StationaryNonsync);
}

#[test]
fn integrate_records_samples_and_t_max() {
    let st = ParticleState::ngon(5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let angles: Vec<f64> = st.angles().iter().map(|a| a + rng.random_range(-0.01..0.01)).collect();
    let st = ParticleState::new(angles).unwrap();
    let cfg = SimConfig { t_max: 2.5, sample_every: 0.5, ..SimConfig::default() };
    let tr = integrate(&st, &InteractionKernel::kuramoto(), &WeightSpec::unit(5), NormalizerSpec::None, &cfg).unwrap();
    assert_eq!(tr.terminal_status, TerminalStatus::TMaxReached);
    let expect = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5];
    assert_eq!(tr.times.len(), expect.len());
    for (t, e) in tr.times.iter().zip(expect) {
        assert!((t - e).abs() < 1e-12);
    }
    assert!(tr.states.iter().all(|s| s.angles().iter().all(|a| (0.0..TAU).contains(a))));
}

#[test]
fn invalid_configurations_rejected() {
    let st = ParticleState::ngon(3).unwrap();
    let k = InteractionKernel::kuramoto();
    let w = WeightSpec::unit(3);
    for cfg in [rk4(0.0, 1.0), rk4(0.1, -1.0), SimConfig { sync_tol: 0.0, ..SimConfig::default() }] {
        assert!(matches!(integrate(&st, &k, &w, NormalizerSpec::None, &cfg), Err(SyncError::InvalidInput(_))));
    }
    assert!(WeightSpec::new(vec![1.0, -1.0, 1.0], None).is_err());
    assert!(WeightSpec::unit(2).validate(3).is_err());
    let asym = InteractionKernel::asymmetric_combine(&k, 1.0, 1.0).unwrap();
    assert!(matches!(vector_field(&st, &asym, &w, NormalizerSpec::Attention), Err(SyncError::UnsupportedKernel(_))));
    assert!(ParticleState::new(vec![]).is_err());
    assert!(ParticleState::new(vec![f64::NAN]).is_err());
}

#[test]
fn diameter_and_cluster_examples() {
    assert_eq!(circular_diameter(&ParticleState::synchronized(5, 3.0).unwrap()), 0.0);
    assert!((circular_diameter(&ParticleState::new(vec![0.0, PI]).unwrap()) - PI).abs() < 1e-15);
    assert!((circular_diameter(&ParticleState::new(vec![0.0, FRAC_PI_2, PI]).unwrap()) - PI).abs() < 1e-15);
    assert!((circular_diameter(&ParticleState::new(vec![6.2, 0.1]).unwrap()) - (0.1 + TAU - 6.2)).abs() < 1e-12);

    assert_eq!(cluster_count(&ParticleState::synchronized(5, 3.0).unwrap(), 0.1), 1);
    assert_eq!(cluster_count(&ParticleState::ngon(12).unwrap(), TAU / 12.0 * 0.9), 12);
    let two = ParticleState::new(vec![0.0, 0.005, 0.01, PI, PI + 0.005, PI + 0.01]).unwrap();
    assert_eq!(cluster_count(&two, 0.1), 2);
    // A run that straddles 0 is one cluster.
    let wrap = ParticleState::new(vec![TAU - 0.01, 0.0, 0.01, 2.0]).unwrap();
    assert_eq!(cluster_count(&wrap, 0.1), 2);
}

#[test]
fn seeded_uniform_states_reproduce() {
    let a = ParticleState::uniform(16, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
    let b = ParticleState::uniform(16, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
    let c = ParticleState::uniform(16, &mut ChaCha20Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn check_monotone(beta: f64, norm: NormalizerSpec, weights: &WeightSpec, init: &ParticleState, cfg: &SimConfig) {
    let tr = integrate(init, &sa(beta), weights, norm, cfg).unwrap();
    for k in 1..tr.energies.len() {
        let de = tr.energies[k] - tr.energies[k - 1];
        assert!(
            de >= -10.0 * tr.energy_slack[k],
            "β={beta} {norm:?}: ΔE={de:e} slack={:e} at t={}",
            tr.energy_slack[k],
            tr.times[k]
        );
    }
}

#[test]
fn energy_nondecreasing_along_trajectories() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let n = 16;
    for &beta in &[-0.5, 0.0, 2.0] {
        for run in 0..20 {
            let init = ParticleState::new(random_angles(&mut rng, n)).unwrap();
            let weights = if run % 2 == 0 {
                WeightSpec::unit(n)
            } else {
                WeightSpec::new(random_weights(&mut rng, n), Some(random_weights(&mut rng, n))).unwrap()
            };
            let norm = if run % 4 < 2 { NormalizerSpec::None } else { NormalizerSpec::Attention };
            let cfg = if run % 3 == 0 {
                SimConfig { t_max: 50.0, sample_every: 0.25, ..rk4(0.01, 50.0) }
            } else {
                SimConfig { t_max: 50.0, sample_every: 0.25, ..SimConfig::default() }
            };
            check_monotone(beta, norm, &weights, &init, &cfg);
        }
    }
}

#[test]
fn adaptive_and_fixed_step_agree() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for &(beta, norm) in &[(1.0, NormalizerSpec::None), (3.0, NormalizerSpec::Attention), (-0.3, NormalizerSpec::None)] {
        let init = ParticleState::new(random_angles(&mut rng, 8)).unwrap();
        let w = WeightSpec::unit(8);
        let fixed = rk4(1e-3, 10.0);
        let adaptive = SimConfig { t_max: 10.0, ..SimConfig::default() };
        let a = integrate(&init, &sa(beta), &w, norm, &fixed).unwrap();
        let b = integrate(&init, &sa(beta), &w, norm, &adaptive).unwrap();
        // Compare at the sample times both runs reached.
        let common = a.times.len().min(b.times.len());
        assert!(common >= 3, "β={beta}: only {common} common samples");
        let d = (0..common).map(|k| max_angle_diff(a.states[k].angles(), b.states[k].angles())).fold(0.0, f64::max);
        assert!(d < 1e-6, "β={beta}: {d:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_field_when_synchronized(beta in -2.0f64..50.0, n in 1usize..20, at in 0.0f64..TAU, normalized: bool) {
        let st = ParticleState::synchronized(n, at).unwrap();
        let norm = if normalized { NormalizerSpec::Attention } else { NormalizerSpec::None };
        let v = vector_field(&st, &sa(beta), &WeightSpec::unit(n), norm).unwrap();
        prop_assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn translation_equivariant(seed: u64, beta in -0.8f64..5.0, delta in -PI..PI, normalized: bool) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let init = ParticleState::new(random_angles(&mut rng, 6)).unwrap();
        let norm = if normalized { NormalizerSpec::Attention } else { NormalizerSpec::None };
        let cfg = rk4(0.01, 5.0);
        let w = WeightSpec::unit(6);
        let a = integrate(&init, &sa(beta), &w, norm, &cfg).unwrap();
        let b = integrate(&init.rotated(delta), &sa(beta), &w, norm, &cfg).unwrap();
        prop_assert_eq!(a.times.len(), b.times.len());
        for (sa_, sb) in a.states.iter().zip(&b.states) {
            let shifted = sa_.rotated(delta);
            prop_assert!(max_angle_diff(shifted.angles(), sb.angles()) < 1e-9);
        }
    }

    #[test]
    fn permutation_equivariant(seed: u64, beta in -0.8f64..5.0, normalized: bool) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 7;
        let x = random_angles(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let y: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
        let norm = if normalized { NormalizerSpec::Attention } else { NormalizerSpec::None };
        let cfg = rk4(0.01, 5.0);
        let w = WeightSpec::unit(n);
        let a = integrate(&ParticleState::new(x).unwrap(), &sa(beta), &w, norm, &cfg).unwrap();
        let b = integrate(&ParticleState::new(y).unwrap(), &sa(beta), &w, norm, &cfg).unwrap();
        let ax = a.final_state().angles();
        let bx = b.final_state().angles();
        for (k, &p) in perm.iter().enumerate() {
            prop_assert!(wrap_centered(bx[k] - ax[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn angles_stay_wrapped(seed: u64, beta in -1.0f64..10.0) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let init = ParticleState::new(random_angles(&mut rng, 5)).unwrap();
        let cfg = SimConfig { t_max: 20.0, ..SimConfig::default() };
        let tr = integrate(&init, &sa(beta), &WeightSpec::unit(5), NormalizerSpec::None, &cfg).unwrap();
        for s in &tr.states {
            prop_assert!(s.angles().iter().all(|a| (0.0..TAU).contains(a)));
        }
    }
}
