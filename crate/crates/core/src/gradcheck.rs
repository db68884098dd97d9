//! Finite-difference audit of every analytic gradient used in training.

use crate::approx::{Mlp, MlpGrads};
use crate::env::{ACT_DIM, OBS_DIM};
use crate::rl::{Algo, Batch, DeterministicAgent, RlConfig, SacAgent, Transition};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central-difference perturbation.
pub const FD_STEP: f64 = 1e-5;
/// Critic losses are O(1e4) with the terminal rewards of ±100, so a 1e-5
/// step loses the small gradient components to cancellation.
pub const CRITIC_FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SCALAR_TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so components that are zero
/// analytically compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub params: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(CheckResult::passed)
    }

    pub fn failing(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` over the flat
/// parameters of `net`.
fn compare_net<F: FnMut(&Mlp) -> f64>(
    net: &Mlp,
    analytic: &MlpGrads,
    mut loss: F,
    step: f64,
    perturb: bool,
) -> (f64, usize) {
    let mut grads = analytic.flat();
    if perturb {
        grads[0] += 1e-2 * (1.0 + grads[0].abs());
    }
    let base = net.flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        probe.set_flat(&p).expect("same shape");
        let up = loss(&probe);
        p[i] = base[i] - step;
        probe.set_flat(&p).expect("same shape");
        let down = loss(&probe);
        worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * step)));
    }
    (worst, base.len())
}

fn random_batch<R: Rng>(rng: &mut R, n: usize) -> Batch {
    let ts: Vec<Transition> = (0..n)
        .map(|i| Transition {
            obs: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
            action: std::array::from_fn(|_| rng.random_range(-0.9..0.9)),
            reward: [0.0, 100.0, -50.0, -100.0][i % 4],
            next_obs: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
            done: i % 3 == 1,
        })
        .collect();
    Batch::from_transitions(&ts)
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Random architectures under a random linear loss `Σ R ∘ f(x)`.
fn check_mlp(rng: &mut ChaCha8Rng, perturb: bool) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for _ in 0..20 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=10));
        }
        sizes.push(rng.random_range(1..=4));
        let net = Mlp::new(&sizes, 1.0, rng).expect("valid sizes");
        let x = Array2::from_shape_fn((3, sizes[0]), |_| rng.random_range(-2.0..2.0));
        let dir = Array2::from_shape_fn((3, *sizes.last().unwrap()), |_| rng.random_range(-1.0..1.0));
        let (_, tape) = net.forward_batch(x.view());
        let (g, _) = net.backward(&tape, dir.view());
        let (w, n) = compare_net(&net, &g, |m| (m.predict(x.view()) * &dir).sum(), FD_STEP, perturb);
        worst = worst.max(w);
        total += n;
    }
    CheckResult { name: "approx: random networks, linear loss".into(), max_rel_err: worst, tolerance: TOLERANCE, params: total }
}

fn small_cfg() -> RlConfig {
    RlConfig { hidden: vec![8, 8], init_alpha: 0.3, ..RlConfig::default() }
}

/// SAC agent whose policy head has non-trivial outputs (the default tiny
/// final-layer init makes every gradient nearly vanish).
fn sac_fixture(rng: &mut ChaCha8Rng) -> SacAgent {
    let mut agent = SacAgent::new(small_cfg(), rng).expect("valid config");
    agent.policy = Mlp::new(&agent.policy.sizes(), 0.5, rng).expect("valid sizes");
    agent.q1_target = Mlp::new(&agent.q1.sizes(), 1.0, rng).expect("valid sizes");
    agent.q2_target = Mlp::new(&agent.q2.sizes(), 1.0, rng).expect("valid sizes");
    agent
}

fn check_critic(rng: &mut ChaCha8Rng, perturb: bool) -> CheckResult {
    let agent = sac_fixture(rng);
    let batch = random_batch(rng, 6);
    let next_eps = gaussian(rng, 6, ACT_DIM);
    let ev = agent.critic_eval(&batch, next_eps.view());
    let (w1, n1) = compare_net(
        &agent.q1,
        &ev.grads1,
        |m| {
            let a = SacAgent { q1: m.clone(), ..agent.clone() };
            a.critic_eval(&batch, next_eps.view()).loss1
        },
        CRITIC_FD_STEP,
        perturb,
    );
    let (w2, n2) = compare_net(
        &agent.q2,
        &ev.grads2,
        |m| {
            let a = SacAgent { q2: m.clone(), ..agent.clone() };
            a.critic_eval(&batch, next_eps.view()).loss2
        },
        CRITIC_FD_STEP,
        perturb,
    );
    CheckResult { name: "sac critic: soft Bellman residual".into(), max_rel_err: w1.max(w2), tolerance: TOLERANCE, params: n1 + n2 }
}

fn check_policy(rng: &mut ChaCha8Rng, perturb: bool) -> CheckResult {
    let agent = sac_fixture(rng);
    let obs = Array2::from_shape_fn((6, OBS_DIM), |_| rng.random_range(-1.5..1.5));
    let eps = gaussian(rng, 6, ACT_DIM);
    let (_, g, _) = agent.policy_loss_and_grad(obs.view(), eps.view());
    let (w, n) = compare_net(
        &agent.policy,
        &g,
        |m| {
            let a = SacAgent { policy: m.clone(), ..agent.clone() };
            a.policy_loss_and_grad(obs.view(), eps.view()).0
        },
        FD_STEP,
        perturb,
    );
    CheckResult { name: "sac policy: reparameterized objective".into(), max_rel_err: w, tolerance: TOLERANCE, params: n }
}

fn check_temperature(rng: &mut ChaCha8Rng, perturb: bool) -> CheckResult {
    let agent = sac_fixture(rng);
    let obs = Array2::from_shape_fn((6, OBS_DIM), |_| rng.random_range(-1.5..1.5));
    let eps = gaussian(rng, 6, ACT_DIM);
    let log_prob = agent.sample_with_noise(obs.view(), eps.view()).log_prob;
    let h = agent.cfg.target_entropy;
    let mut worst: f64 = 0.0;
    for la in [-2.0, -0.5, 0.0, 0.7] {
        let (_, mut g) = SacAgent::temperature_loss_and_grad(la, &log_prob, h);
        if perturb {
            g += 1e-2 * (1.0 + g.abs());
        }
        let up = SacAgent::temperature_loss_and_grad(la + FD_STEP, &log_prob, h).0;
        let down = SacAgent::temperature_loss_and_grad(la - FD_STEP, &log_prob, h).0;
        worst = worst.max(rel_err(g, (up - down) / (2.0 * FD_STEP)));
    }
    CheckResult { name: "sac temperature: dual objective in log alpha".into(), max_rel_err: worst, tolerance: SCALAR_TOLERANCE, params: 1 }
}

fn check_deterministic_actor(rng: &mut ChaCha8Rng, perturb: bool) -> CheckResult {
    let mut agent = DeterministicAgent::new(Algo::Td3, small_cfg(), rng).expect("valid config");
    agent.actor = Mlp::new(&agent.actor.sizes(), 0.5, rng).expect("valid sizes");
    let obs = Array2::from_shape_fn((6, OBS_DIM), |_| rng.random_range(-1.5..1.5));
    let (_, g) = agent.actor_loss_and_grad(obs.view());
    let (w, n) = compare_net(
        &agent.actor,
        &g,
        |m| {
            let mut a = agent.clone();
            a.actor = m.clone();
            a.actor_loss_and_grad(obs.view()).0
        },
        FD_STEP,
        perturb,
    );
    CheckResult { name: "ddpg/td3 actor: deterministic policy gradient".into(), max_rel_err: w, tolerance: TOLERANCE, params: n }
}

/// Runs every check. `perturb` corrupts each analytic gradient slightly so
/// the suite's sensitivity can be demonstrated.
pub fn run(seed: u64, perturb: bool) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GradcheckReport {
        checks: vec![
            check_mlp(&mut rng, perturb),
            check_critic(&mut rng, perturb),
            check_policy(&mut rng, perturb),
            check_temperature(&mut rng, perturb),
            check_deterministic_actor(&mut rng, perturb),
        ],
    }
}
