use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rover_suspension::approx::Mlp;
use rover_suspension::env::{Observation, ACT_DIM, OBS_DIM};
use rover_suspension::rl::{
    squash, Agent, Algo, Batch, DeterministicAgent, ReplayPool, RlConfig, SacAgent, Transition,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_cfg() -> RlConfig {
    RlConfig { hidden: vec![16, 16], ..RlConfig::default() }
}

fn sac(seed: u64) -> SacAgent {
    SacAgent::new(small_cfg(), &mut rng(seed)).unwrap()
}

fn normals(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(r))
}

fn transition(i: usize, done: bool) -> Transition {
    let f = i as f64;
    Transition {
        obs: [0.1 * f, -0.2, 0.5 + 0.01 * f, 0.3],
        action: [0.2, -0.4, 0.6 - 0.05 * f, 0.0],
        reward: if done { 100.0 } else { 0.0 },
        next_obs: [0.1 * f + 0.05, -0.1, 0.48, 0.3],
        done,
    }
}

fn batch(n: usize) -> Batch {
    let ts: Vec<Transition> = (0..n).map(|i| transition(i, i % 4 == 3)).collect();
    Batch::from_transitions(&ts)
}

fn q(net: &Mlp, obs: &[f64], act: &[f64]) -> f64 {
    let x: Vec<f64> = obs.iter().chain(act).copied().collect();
    net.forward(&x).unwrap()[0]
}

/// Density of `a = tanh(u)`, `u ~ N(mu, sigma)`, by change of variables.
fn squashed_density(a: f64, mu: f64, sigma: f64) -> f64 {
    let u = a.atanh();
    let z = (u - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) / (1.0 - a * a)
}

#[test]
fn squashed_density_integrates_to_one() {
    for (mu, sigma) in [(0.0, 1.0), (0.8, 0.3), (-1.5, 0.6)] {
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n).map(|k| squashed_density(-1.0 + (k as f64 + 0.5) * h, mu, sigma) * h).sum();
        assert!((total - 1.0).abs() < 1e-4, "mu {mu} sigma {sigma}: {total}");
    }
}

#[test]
fn log_prob_matches_change_of_variables() {
    for (mu, log_std, e) in [(0.0, 0.0, 0.3), (0.8, -1.2, -1.1), (-1.5, -0.5, 2.0), (2.0, 0.5, 1.0)] {
        let raw = Array2::from_shape_fn((1, 2 * ACT_DIM), |(_, j)| if j < ACT_DIM { mu } else { log_std });
        let eps = Array2::from_elem((1, ACT_DIM), e);
        let s = squash(raw.view(), eps.view());
        let a = s.action[(0, 0)];
        let want = ACT_DIM as f64 * squashed_density(a, mu, f64::exp(log_std)).ln();
        assert!((s.log_prob[0] - want).abs() < 1e-8, "{} vs {want}", s.log_prob[0]);
    }
}

#[test]
fn log_prob_stays_finite_in_the_tails() {
    let raw = Array2::from_shape_fn((1, 2 * ACT_DIM), |(_, j)| if j < ACT_DIM { 30.0 } else { 2.0 });
    let eps = Array2::from_elem((1, ACT_DIM), 3.0);
    let s = squash(raw.view(), eps.view());
    assert!(s.log_prob[0].is_finite());
    assert!(s.action.iter().all(|a| a.abs() <= 1.0));
}

#[test]
fn log_std_is_clamped() {
    let raw = Array2::from_shape_fn((1, 2 * ACT_DIM), |(_, j)| if j < ACT_DIM { 0.0 } else { 50.0 });
    let s = squash(raw.view(), Array2::zeros((1, ACT_DIM)).view());
    assert!(s.log_std.iter().all(|&v| v == 2.0));
}

#[test]
fn soft_value_is_the_noise_average_of_min_q_minus_alpha_log_pi() {
    let agent = sac(4);
    let obs = Observation::new(3.0, 0.0, 0.7, 0.3);
    let row = Array2::from_shape_vec((1, OBS_DIM), obs.0.to_vec()).unwrap();
    let alpha = agent.alpha();
    let mut r = rng(9);
    let n = 4000;
    let (mut direct, mut via_api) = (0.0, 0.0);
    for _ in 0..n {
        let eps = normals(&mut r, 1, ACT_DIM);
        let s = agent.sample_with_noise(row.view(), eps.view());
        let a: Vec<f64> = s.action.row(0).to_vec();
        let qmin = q(&agent.q1, &obs.0, &a).min(q(&agent.q2, &obs.0, &a));
        direct += qmin - alpha * s.log_prob[0];
        via_api += agent.soft_value_with_noise(row.view(), eps.view(), alpha)[0];
    }
    assert!((direct - via_api).abs() / (n as f64) < 1e-12);
    // Monte Carlo estimate through the sampling entry point agrees in mean.
    let mut r = rng(10);
    let mc: f64 = (0..n).map(|_| agent.soft_value(&obs, &mut r)).sum::<f64>() / n as f64;
    let mean = direct / n as f64;
    assert!((mc - mean).abs() < 0.1 * (1.0 + mean.abs()), "{mc} vs {mean}");
}

#[test]
fn sac_targets_by_hand() {
    let agent = sac(5);
    let b = batch(8);
    let eps = normals(&mut rng(1), 8, ACT_DIM);
    let targets = agent.critic_targets(&b, eps.view());
    let next = agent.sample_with_noise(b.next_obs.view(), eps.view());
    for i in 0..8 {
        let a: Vec<f64> = next.action.row(i).to_vec();
        let s: Vec<f64> = b.next_obs.row(i).to_vec();
        let soft = q(&agent.q1_target, &s, &a).min(q(&agent.q2_target, &s, &a)) - agent.alpha() * next.log_prob[i];
        let want = if b.done[i] == 1.0 { b.rew[i] } else { b.rew[i] + agent.cfg.gamma * soft };
        assert!((targets[i] - want).abs() < 1e-12, "row {i}");
    }
    assert_eq!(targets[3], 100.0);
}

#[test]
fn td3_and_ddpg_targets_by_hand() {
    let cfg = RlConfig { policy_noise: 0.0, ..small_cfg() };
    let b = batch(8);
    let zero = Array2::zeros((8, ACT_DIM));
    for algo in [Algo::Td3, Algo::Ddpg] {
        let agent = DeterministicAgent::new(algo, cfg.clone(), &mut rng(6)).unwrap();
        let targets = agent.critic_targets(&b, zero.view());
        let next = agent.actor_target.predict(b.next_obs.view()).mapv(f64::tanh);
        for i in 0..8 {
            let a: Vec<f64> = next.row(i).to_vec();
            let s: Vec<f64> = b.next_obs.row(i).to_vec();
            let (q1, q2) = (q(&agent.q1_target, &s, &a), q(&agent.q2_target, &s, &a));
            let boot = if algo == Algo::Td3 { q1.min(q2) } else { q1 };
            let want = b.rew[i] + (1.0 - b.done[i]) * agent.cfg.gamma * boot;
            assert!((targets[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn td3_smoothing_noise_is_clipped() {
    let cfg = RlConfig { policy_noise: 0.2, noise_clip: 0.5, ..small_cfg() };
    let agent = DeterministicAgent::new(Algo::Td3, cfg, &mut rng(2)).unwrap();
    let b = batch(4);
    // Noise of 100 sigma saturates at the clip, so 100 and 1000 give the same target.
    let big = Array2::from_elem((4, ACT_DIM), 100.0);
    let bigger = Array2::from_elem((4, ACT_DIM), 1000.0);
    assert_eq!(agent.critic_targets(&b, big.view()), agent.critic_targets(&b, bigger.view()));
}

#[test]
fn gradient_steps_reduce_their_losses() {
    let mut agent = sac(7);
    let b = batch(32);
    let eps = normals(&mut rng(3), 32, ACT_DIM);
    let before = agent.critic_eval(&b, eps.view());
    let targets = before.targets.clone();
    agent.critic_update(&b, eps.view()).unwrap();
    let after = agent.critic_eval(&b, eps.view());
    assert_eq!(after.targets, targets, "critic step must not move the targets");
    assert!(after.loss1 < before.loss1 && after.loss2 < before.loss2);

    let obs_eps = normals(&mut rng(4), 32, ACT_DIM);
    let (l0, _, _) = agent.policy_loss_and_grad(b.obs.view(), obs_eps.view());
    agent.policy_update(b.obs.view(), obs_eps.view()).unwrap();
    let (l1, _, _) = agent.policy_loss_and_grad(b.obs.view(), obs_eps.view());
    assert!(l1 < l0, "{l1} >= {l0}");
}

#[test]
fn temperature_gradient_sign() {
    let low_entropy = ndarray::arr1(&[5.0, 6.0, 4.0]);
    let high_entropy = ndarray::arr1(&[-9.0, -8.0, -10.0]);
    let (_, g) = SacAgent::temperature_loss_and_grad(0.0, &low_entropy, -4.0);
    assert!(g < 0.0, "entropy below target must raise alpha");
    let (_, g) = SacAgent::temperature_loss_and_grad(0.0, &high_entropy, -4.0);
    assert!(g > 0.0, "entropy above target must lower alpha");
}

fn narrow_policy(agent: &mut SacAgent, log_std: f64) {
    let last = agent.policy.biases.len() - 1;
    agent.policy.weights[last].fill(0.0);
    for j in 0..ACT_DIM {
        agent.policy.biases[last][j] = 0.0;
        agent.policy.biases[last][ACT_DIM + j] = log_std;
    }
}

#[test]
fn alpha_moves_monotonically_toward_the_target_entropy() {
    let obs = batch(16).obs;
    let eps = normals(&mut rng(8), 16, ACT_DIM);
    for (log_std, rising) in [(-3.0, true), (0.0, false)] {
        let mut agent = sac(1);
        narrow_policy(&mut agent, log_std);
        let mut prev = agent.alpha();
        for _ in 0..50 {
            agent.temperature_update(obs.view(), eps.view()).unwrap();
            let a = agent.alpha();
            assert!(if rising { a > prev } else { a < prev }, "log_std {log_std}: {prev} -> {a}");
            prev = a;
        }
    }
}

#[test]
fn fixed_alpha_stays_put() {
    let mut agent = SacAgent::new(RlConfig { auto_alpha: false, init_alpha: 0.2, ..small_cfg() }, &mut rng(0)).unwrap();
    let obs = batch(8).obs;
    let eps = normals(&mut rng(1), 8, ACT_DIM);
    agent.temperature_update(obs.view(), eps.view()).unwrap();
    assert!((agent.alpha() - 0.2).abs() < 1e-15);
}

#[test]
fn polyak_history_is_geometric() {
    let mut agent = sac(3);
    let theta = agent.q1.flat();
    agent.q1_target.set_flat(&theta.iter().map(|v| v + 1.0).collect::<Vec<_>>()).unwrap();
    let offset = agent.q1_target.flat();
    let tau = agent.cfg.tau;
    let k = 40;
    for _ in 0..k {
        agent.polyak_update();
    }
    let decay = (1.0 - tau).powi(k);
    for ((now, t), o) in agent.q1_target.flat().iter().zip(&theta).zip(&offset) {
        let want = decay * o + (1.0 - decay) * t;
        assert!((now - want).abs() < 1e-12);
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let mut pool = ReplayPool::new(10);
    for i in 0..10 {
        pool.push(transition(i, false));
    }
    let mut counts = [0usize; 10];
    let mut r = rng(12);
    for i in pool.sample_indices(100_000, &mut r) {
        counts[i] += 1;
    }
    // chi-square with 9 dof; 27.9 is the 0.999 quantile
    let chi: f64 = counts.iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
    assert!(chi < 27.9, "chi-square {chi}, counts {counts:?}");
}

#[test]
fn replay_overwrites_oldest_first() {
    let mut pool = ReplayPool::new(3);
    for i in 0..5 {
        pool.push(transition(i, false));
    }
    assert_eq!(pool.len(), 3);
    let firsts: Vec<f64> = (0..3).map(|i| pool.get(i).obs[0]).collect();
    assert_eq!(firsts, vec![0.1 * 3.0, 0.1 * 4.0, 0.1 * 2.0]);
}

#[test]
fn checkpoint_round_trip_keeps_actions() {
    let obs = Observation::new(-4.0, 0.0, 0.6, 0.28);
    for algo in [Algo::Sac, Algo::Ddpg, Algo::Td3] {
        let agent = Agent::new(algo, small_cfg(), &mut rng(2)).unwrap();
        let mut bytes = Vec::new();
        agent.write_to(&mut bytes).unwrap();
        let back = Agent::read_from(&mut bytes.as_slice(), small_cfg()).unwrap();
        assert_eq!(back, agent);
        assert_eq!(back.eval_action(&obs), agent.eval_action(&obs));
        let wrong = RlConfig { hidden: vec![8], ..small_cfg() };
        assert!(Agent::read_from(&mut bytes.as_slice(), wrong).is_err());
    }
}

#[test]
fn unknown_algorithms_are_rejected() {
    assert!(Algo::parse("ppo").is_err());
    assert_eq!(Algo::parse("td3").unwrap(), Algo::Td3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_actions_are_in_bounds(p in -50.0f64..50.0, d in -50.0f64..50.0, h in 0.0f64..1.0, seed in 0u64..20) {
        let obs = Observation::new(p, 0.0, d, h);
        for algo in [Algo::Sac, Algo::Td3] {
            let agent = Agent::new(algo, small_cfg(), &mut rng(seed)).unwrap();
            prop_assert!(agent.eval_action(&obs).0.iter().all(|a| a.abs() <= 1.0));
            let x = agent.explore_action(&obs, &mut rng(seed));
            prop_assert!(x.0.iter().all(|a| a.abs() <= 1.0));
        }
    }

    #[test]
    fn squash_actions_are_in_bounds(mu in -20.0f64..20.0, ls in -30.0f64..5.0, e in -5.0f64..5.0) {
        let raw = Array2::from_shape_fn((2, 2 * ACT_DIM), |(_, j)| if j < ACT_DIM { mu } else { ls });
        let eps = Array2::from_elem((2, ACT_DIM), e);
        let s = squash(raw.view(), eps.view());
        prop_assert!(s.action.iter().all(|a| a.abs() <= 1.0));
        prop_assert!(s.log_prob.iter().all(|v| !v.is_nan()));
    }
}
