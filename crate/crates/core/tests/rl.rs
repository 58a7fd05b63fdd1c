use std::sync::Arc;

use gridtwin_core::env::{GridModel, ResetMode};
use gridtwin_core::grid::NetworkSpec;
use gridtwin_core::rl::{
    clipped_objective, collect_rollout, compute_gae, evaluate_on_oracle, pearson, ppo_update, train_on, GridVecEnv,
    OracleDynamics, Policy, PpoConfig, PpoOptimizer, RolloutBuffer, VecEnv, VecStep,
};
use gridtwin_core::Result;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn buffer_from(rewards: &[f64], values: &[f64], dones: &[bool], last: f64) -> RolloutBuffer {
    // Fill through a real rollout, then overwrite the quantities under test.
    let mut b = RolloutBuffer::new(1, rewards.len(), 1, 1);
    let mut env = ConstEnv { n: 1, target: 0.0 };
    let policy = Policy::new(&[(0.0, 1.0)], vec![-1.0], vec![1.0], 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect_rollout(&mut env, &policy, &mut b, 0.99, &mut rng).unwrap();
    b.rewards.copy_from_slice(rewards);
    b.values.copy_from_slice(values);
    b.dones.copy_from_slice(dones);
    b.last_values = vec![last];
    b
}

#[test]
fn gae_undiscounted_single_episode_is_reward_to_go_minus_value() {
    let r = [1.0, 2.0, 3.0, 4.0];
    let v = [0.5, -1.0, 2.0, 0.25];
    let b = buffer_from(&r, &v, &[false, false, false, true], 99.0);
    let (adv, ret) = compute_gae(&b, 1.0, 1.0);
    let expect = [10.0 - 0.5, 9.0 + 1.0, 7.0 - 2.0, 4.0 - 0.25];
    for t in 0..4 {
        assert!((adv[t] - expect[t]).abs() < 1e-12, "t {t}: {} vs {}", adv[t], expect[t]);
        assert!((ret[t] - (expect[t] + v[t])).abs() < 1e-12);
    }
}

#[test]
fn gae_lambda_zero_is_one_step_td() {
    let r = [1.0, -2.0, 0.5];
    let v = [0.3, 0.7, -0.1];
    let b = buffer_from(&r, &v, &[false, false, false], 2.0);
    let g = 0.9;
    let (adv, _) = compute_gae(&b, g, 0.0);
    let expect = [1.0 + g * 0.7 - 0.3, -2.0 + g * -0.1 - 0.7, 0.5 + g * 2.0 + 0.1];
    for t in 0..3 {
        assert!((adv[t] - expect[t]).abs() < 1e-12);
    }
}

#[test]
fn gae_does_not_leak_across_episode_boundary() {
    let r = [1.0, 1.0, 1.0];
    let v = [0.0, 0.0, 0.0];
    let b = buffer_from(&r, &v, &[false, true, false], 5.0);
    let (adv, _) = compute_gae(&b, 1.0, 1.0);
    assert!((adv[0] - 2.0).abs() < 1e-12);
    assert!((adv[1] - 1.0).abs() < 1e-12);
    assert!((adv[2] - 6.0).abs() < 1e-12);
}

#[test]
fn clipped_objective_cases() {
    // Ratio one: plain -A with full gradient.
    assert_eq!(clipped_objective(1.0, 2.0, 0.2), (-2.0, -2.0));
    // Positive advantage above the clip: flat.
    let (l, g) = clipped_objective(1.5, 1.0, 0.2);
    assert!((l + 1.2).abs() < 1e-12 && g == 0.0);
    // Negative advantage below the clip: flat.
    let (l, g) = clipped_objective(0.5, -1.0, 0.2);
    assert!((l - 0.8).abs() < 1e-12 && g == 0.0);
    // Negative advantage above the clip keeps the pessimistic unclipped term.
    let (l, g) = clipped_objective(1.5, -1.0, 0.2);
    assert!((l - 1.5).abs() < 1e-12 && g == 1.0);
}

#[test]
fn pearson_known_values() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert!(pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, -1.0, 1.0]).abs() < 1e-12);
}

/// Stateless continuous bandit: reward `-(a - target)^2`, episode length one.
struct ConstEnv {
    n: usize,
    target: f64,
}

impl VecEnv for ConstEnv {
    fn n_envs(&self) -> usize {
        self.n
    }

    fn obs(&self) -> Array2<f64> {
        Array2::from_elem((self.n, 1), 0.5)
    }

    fn step(&mut self, actions: ArrayView2<f64>) -> Result<VecStep> {
        Ok(VecStep {
            rewards: actions.column(0).iter().map(|a| -(a - self.target).powi(2)).collect(),
            dones: vec![true; self.n],
            truncated: vec![false; self.n],
            final_obs: vec![None; self.n],
            energy_loss: vec![0.0; self.n],
        })
    }
}

#[test]
fn ppo_improves_a_bandit() {
    let mut env = ConstEnv { n: 16, target: 0.6 };
    let mut policy = Policy::new(&[(0.0, 1.0)], vec![-1.0], vec![1.0], 3).unwrap();
    let cfg = PpoConfig {
        n_envs: 16,
        buffer_size: 16,
        lr: 3e-3,
        ..Default::default()
    };
    let mut opt = PpoOptimizer::new(&policy, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buf = RolloutBuffer::new(16, 16, 1, 1);
    let obs = Array2::from_elem((1, 1), 0.5);
    let err0 = (policy.act_deterministic(obs.view()).unwrap()[(0, 0)] - 0.6).abs();
    for _ in 0..20 {
        collect_rollout(&mut env, &policy, &mut buf, cfg.gamma, &mut rng).unwrap();
        assert_eq!(buf.len(), buf.capacity());
        ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut rng).unwrap();
    }
    let err1 = (policy.act_deterministic(obs.view()).unwrap()[(0, 0)] - 0.6).abs();
    assert!(err1 < 0.5 * err0, "mean action error {err0} -> {err1}");
}

#[test]
fn first_minibatch_starts_at_ratio_one() {
    let mut env = ConstEnv { n: 8, target: 0.0 };
    let mut policy = Policy::new(&[(0.0, 1.0)], vec![-1.0], vec![1.0], 0).unwrap();
    let cfg = PpoConfig {
        n_envs: 8,
        buffer_size: 8,
        epochs: 1,
        minibatch: 64,
        ..Default::default()
    };
    let mut opt = PpoOptimizer::new(&policy, 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut buf = RolloutBuffer::new(8, 8, 1, 1);
    collect_rollout(&mut env, &policy, &mut buf, cfg.gamma, &mut rng).unwrap();
    let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut rng).unwrap();
    assert_eq!(stats.clip_fraction, 0.0);
    assert!(stats.approx_kl.abs() < 1e-12);
    // Normalized advantages average to zero, so the ratio-one objective is zero.
    assert!(stats.policy_loss.abs() < 1e-12);
}

#[test]
fn actions_stay_inside_bounds() {
    let spec = NetworkSpec::default_anm6();
    let policy = Policy::for_grid(&spec, 0).unwrap();
    let (lo, hi) = spec.action_bounds();
    let raw = Array2::from_shape_fn((3, 6), |(i, _)| [-50.0, 0.0, 50.0][i]);
    let a = policy.squash(raw.view());
    for r in a.rows() {
        for j in 0..6 {
            assert!(r[j] >= lo[j] && r[j] <= hi[j]);
        }
    }
}

#[test]
fn buffer_holds_n_envs_times_buffer_size() {
    let spec = Arc::new(NetworkSpec::default_anm6());
    let mut env = GridVecEnv::new(
        spec.clone(),
        OracleDynamics::new(spec.clone()),
        3,
        288,
        ResetMode::UniformRandom,
        0,
    );
    let policy = Policy::for_grid(&spec, 0).unwrap();
    let mut buf = RolloutBuffer::new(3, 7, spec.state_dim(), spec.action_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect_rollout(&mut env, &policy, &mut buf, 0.99, &mut rng).unwrap();
    assert_eq!(buf.len(), 21);
    assert!(buf.is_full());
}

#[test]
fn short_oracle_training_is_deterministic() {
    let spec = Arc::new(NetworkSpec::default_anm6());
    let cfg = PpoConfig {
        n_envs: 2,
        buffer_size: 8,
        horizon: 16,
        eval_horizon: 16,
        max_updates: 2,
        epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut env = GridVecEnv::new(
            spec.clone(),
            OracleDynamics::new(spec.clone()),
            2,
            16,
            ResetMode::UniformRandom,
            9,
        );
        train_on(spec.clone(), &mut env, &cfg).unwrap()
    };
    let (p1, r1) = run();
    let (p2, r2) = run();
    assert_eq!(p1, p2);
    let e1: Vec<f64> = r1.updates.iter().map(|u| u.eval_reward).collect();
    let e2: Vec<f64> = r2.updates.iter().map(|u| u.eval_reward).collect();
    assert_eq!(e1, e2);
    let (ret, _) = evaluate_on_oracle(&GridModel::new(spec.clone()), &p1, 16).unwrap();
    assert_eq!(ret, r1.best_eval);
}

#[test]
fn policy_round_trips_through_a_file() {
    let spec = NetworkSpec::default_anm6();
    let mut p = Policy::for_grid(&spec, 4).unwrap();
    p.log_std = vec![-0.5, 0.1, 0.0, 1.5, -2.0, 0.25];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    p.save(&path).unwrap();
    assert_eq!(Policy::load(&path).unwrap(), p);
}
