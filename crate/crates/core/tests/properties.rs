//! Property tests over the public API.

use std::cell::Cell;
use std::path::Path;

use gnstode::autodiff::{Tape, Tensor};
use gnstode::evaluation::{evaluate, rollout_with, EvalReport, ReportEcho};
use gnstode::io::{Checkpoint, DatasetFile};
use gnstode::model::{predict_step, ModelConfig, ModelParameters, NormStats};
use gnstode::ode::{integrate, OdeConfig, OdeMethod};
use gnstode::physics::{
    acceleration, leapfrog_step, sample_initial, simulate, trajectory_rng, ParticleState, SystemKind, SystemSpec,
};
use gnstode::training::TrainingConfig;
use gnstode::{Error, Exec};
use proptest::prelude::*;

fn system_strategy() -> impl Strategy<Value = SystemKind> {
    prop_oneof![Just(SystemKind::Gravity), Just(SystemKind::Coulomb)]
}

fn state(system: SystemKind, n: usize, seed: u64) -> ParticleState {
    sample_initial(n, &SystemSpec::new(system), &mut trajectory_rng(seed, 0)).unwrap()
}

fn small_params(system: SystemKind, seed: u64) -> (ModelParameters, ModelConfig) {
    let spec = SystemSpec::new(system);
    let traj = simulate(state(system, 6, seed), &spec, 8).unwrap();
    let norm = NormStats::from_trajectories(&[traj]).unwrap();
    let config = ModelConfig {
        hidden_width: 12,
        k_neighbors: 4,
        ..ModelConfig::new(system)
    };
    let params = ModelParameters::init(system.feature_dim(), 12, norm, &mut trajectory_rng(seed, 1));
    (params, config)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn acceleration_matches_all_pairs(system in system_strategy(), n in 2usize..=50, seed in any::<u64>()) {
        let spec = SystemSpec::new(system);
        let s = state(system, n, seed);
        let fast = acceleration(&s, &spec).unwrap();
        let eps2 = spec.softening * spec.softening;
        for (i, fi) in fast.iter().enumerate() {
            let mut a = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (xi, xj) = (s.position(i), s.position(j));
                let r = [xj[0] - xi[0], xj[1] - xi[1]];
                let d2 = r[0] * r[0] + r[1] * r[1] + eps2;
                let inv = 1.0 / (d2 * d2.sqrt());
                let c = match system {
                    SystemKind::Gravity => spec.constant * s.mass(j) * inv,
                    SystemKind::Coulomb => -spec.constant * s.charge(i).unwrap() * s.charge(j).unwrap() * inv / s.mass(i),
                };
                a[0] += c * r[0];
                a[1] += c * r[1];
            }
            prop_assert!((a[0] - fi[0]).abs() <= 1e-12 && (a[1] - fi[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gravity_momentum_conserved_per_step(n in 2usize..30, seed in any::<u64>()) {
        let spec = SystemSpec::new(SystemKind::Gravity);
        let mut s = state(SystemKind::Gravity, n, seed);
        for _ in 0..20 {
            let next = leapfrog_step(&s, &spec).unwrap();
            let (p0, p1) = (s.momentum(), next.momentum());
            prop_assert!((p1[0] - p0[0]).hypot(p1[1] - p0[1]) < 1e-9);
            s = next;
        }
    }

    #[test]
    fn static_features_constant_along_trajectory(system in system_strategy(), n in 2usize..12, seed in any::<u64>()) {
        let traj = simulate(state(system, n, seed), &SystemSpec::new(system), 15).unwrap();
        for s in traj.states() {
            prop_assert!(s.same_static(traj.first()));
        }
    }

    #[test]
    fn predictions_permute_with_particles(system in system_strategy(), n in 2usize..=10, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (params, config) = small_params(system, seed);
        let s = state(system, n, seed ^ 0x5a5a);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut trajectory_rng(perm_seed, 3));
        let features: Vec<f64> = perm.iter().flat_map(|&i| s.particle(i).to_vec()).collect();
        let ps = ParticleState::new(system, n, features).unwrap();
        let out = predict_step(&s, &params, &config).unwrap();
        let out_p = predict_step(&ps, &params, &config).unwrap();
        for (row, &i) in perm.iter().enumerate() {
            for (u, v) in out_p.particle(row).iter().zip(out.particle(i)) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predictions_keep_static_features(system in system_strategy(), n in 2usize..10, seed in any::<u64>()) {
        let (params, config) = small_params(system, seed);
        let s = state(system, n, seed);
        let out = predict_step(&s, &params, &config).unwrap();
        prop_assert!(out.same_static(&s));
    }

    #[test]
    fn integrate_is_linear_for_linear_fields(
        a in -2.0f64..2.0,
        y0 in prop::collection::vec(-5.0f64..5.0, 3),
        y1 in prop::collection::vec(-5.0f64..5.0, 3),
        c in -3.0f64..3.0,
        rk4 in any::<bool>(),
        steps in 1usize..8,
    ) {
        let cfg = OdeConfig { method: if rk4 { OdeMethod::Rk4 } else { OdeMethod::Euler }, steps };
        let solve = |y: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::row(y));
            let out = integrate(&mut tape, |t, y, _| t.scale(y, a), v, 0.0, 1.0, &cfg).unwrap();
            tape.value(out).data().to_vec()
        };
        let combo: Vec<f64> = y0.iter().zip(&y1).map(|(p, q)| p + c * q).collect();
        let (s0, s1, sc) = (solve(&y0), solve(&y1), solve(&combo));
        for k in 0..3 {
            let lin = s0[k] + c * s1[k];
            prop_assert!((sc[k] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn rollout_calls_step_once_per_transition(t_len in 2usize..30, seed in any::<u64>()) {
        let s = state(SystemKind::Gravity, 4, seed);
        let calls = Cell::new(0usize);
        let r = rollout_with(&s, t_len, |x| {
            calls.set(calls.get() + 1);
            Ok(x.clone())
        })
        .unwrap();
        prop_assert_eq!(calls.get(), t_len - 1);
        prop_assert_eq!(r.states.len(), t_len);
    }

    #[test]
    fn dataset_bytes_round_trip(system in system_strategy(), n in 2usize..6, t_len in 2usize..6, count in 1usize..4, seed in any::<u64>()) {
        let spec = SystemSpec::new(system);
        let trajs = (0..count)
            .map(|k| simulate(state(system, n, seed.wrapping_add(k as u64)), &spec, t_len).unwrap())
            .collect();
        let file = DatasetFile::new(&spec, trajs).unwrap();
        let bytes = file.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 60 + 8 * count * t_len * n * system.feature_dim());
        let back = DatasetFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, file);
    }

    #[test]
    fn checkpoint_bytes_round_trip(system in system_strategy(), seed in any::<u64>()) {
        let (params, config) = small_params(system, seed);
        let ckpt = Checkpoint::new(system, config, TrainingConfig::default(), params, None).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(&back.params, &ckpt.params);
    }

    #[test]
    fn corrupted_magic_is_rejected(byte in 0usize..8, flip in 1u8..=255) {
        let spec = SystemSpec::new(SystemKind::Gravity);
        let traj = simulate(state(SystemKind::Gravity, 3, 1), &spec, 3).unwrap();
        let mut bytes = DatasetFile::new(&spec, vec![traj]).unwrap().to_bytes().unwrap();
        bytes[byte] ^= flip;
        let is_format_error = matches!(
            DatasetFile::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        );
        prop_assert!(is_format_error);
    }
}

#[test]
fn report_aggregates_match_rows() {
    let system = SystemKind::Gravity;
    let spec = SystemSpec::new(system);
    let (params, config) = small_params(system, 9);
    let test: Vec<_> = (0..3)
        .map(|k| simulate(state(system, 6, 40 + k), &spec, 8).unwrap())
        .collect();
    let echo = ReportEcho {
        system: "gravity".into(),
        n: 6,
        intensity: spec.intensity,
        dt_effective: spec.dt,
        stride: 1,
        ablate_spatial: false,
        ablate_temporal: false,
    };
    let r = evaluate(&test, &params, &config, &spec, echo, Exec::Sequential).unwrap();
    let (rmse, energy) = EvalReport::recompute(&r.trajectories);
    assert_eq!(r.rmse, rmse);
    assert_eq!(r.energy_error, energy);
    assert_eq!(r.num_trajectories, 3);
}
