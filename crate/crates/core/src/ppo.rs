//! PPO pretraining of the policy network.
//!
//! Rollouts use a Gaussian around the policy output with a linearly decaying standard
//! deviation. Advantages are discounted returns minus a learned value baseline, normalized per
//! iteration. The clipped surrogate is optimized with Adam together with the Lipschitz hinge
//! on the policy.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::lipschitz::network_lipschitz_grad;
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub iterations: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub clip: f64,
    pub gamma: f64,
    pub std_start: f64,
    pub std_end: f64,
    /// Iteration at which the exploration std reaches `std_end`.
    pub decay_iterations: usize,
    pub lr: f64,
    pub policy_epochs: usize,
    pub first_policy_epochs: usize,
    pub value_epochs: usize,
    pub first_value_epochs: usize,
    pub minibatch: usize,
    pub lipschitz_lambda: f64,
    pub rho_theta: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            episodes: 30,
            horizon: 200,
            clip: 0.2,
            gamma: 0.99,
            std_start: 0.5,
            std_end: 0.05,
            decay_iterations: 50,
            lr: 0.0005,
            policy_epochs: 10,
            first_policy_epochs: 30,
            value_epochs: 5,
            first_value_epochs: 10,
            minibatch: 256,
            lipschitz_lambda: 0.001,
            rho_theta: 4.0,
        }
    }
}

/// Exploration std at 1-based PPO `iteration`.
pub fn exploration_std(cfg: &PpoConfig, iteration: usize) -> f64 {
    let last = cfg.decay_iterations.max(2);
    let it = iteration.clamp(1, last);
    cfg.std_start + (cfg.std_end - cfg.std_start) * (it - 1) as f64 / (last - 1) as f64
}

/// Subtracts the mean and divides by the standard deviation (guarded by `1e-8`).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Discounted returns of one episode, computed backwards.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone)]
pub struct PpoOutcome<S: Scalar> {
    pub policy: Mlp<S>,
    pub value: Mlp<S>,
    /// Mean undiscounted episode reward of each iteration's exploratory rollouts.
    pub mean_rewards: Vec<f64>,
}

struct Rollout<S: Scalar> {
    states: Array2<S>,
    actions: Array2<S>,
    means: Array2<S>,
    returns: Vec<f64>,
    mean_reward: f64,
}

fn collect<S: Scalar, R: Rng + ?Sized>(
    policy: &Mlp<S>,
    sys: &SystemModel<S>,
    cfg: &PpoConfig,
    std: f64,
    rng: &mut R,
) -> Result<Rollout<S>> {
    let (e, h, n, m) = (cfg.episodes, cfg.horizon, sys.state_dim(), sys.action_dim());
    let mut states = Array2::zeros((e * h, n));
    let mut actions = Array2::zeros((e * h, m));
    let mut means = Array2::zeros((e * h, m));
    let mut rewards = vec![vec![0.0; h]; e];
    let mut cur = Array2::zeros((e, n));
    for mut row in cur.outer_iter_mut() {
        let x = sys.sample_state(rng);
        for (d, v) in x.into_iter().enumerate() {
            row[d] = v;
        }
    }
    let mut w = vec![S::zero(); sys.noise_dim()];
    let mut next = vec![S::zero(); n];
    #[allow(clippy::needless_range_loop)]
    for t in 0..h {
        let mu = policy.forward_batch(cur.view())?;
        for ep in 0..e {
            let k = ep * h + t;
            let x = cur.row(ep).to_vec();
            let a: Vec<S> = mu
                .row(ep)
                .iter()
                .map(|&mu| mu + S::lit(std * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            sys.noise().sample_into(rng, &mut w);
            sys.step_into(&x, &a, &w, &mut next);
            let r = sys.reward(&next).as_f64();
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("reward at {next:?}")));
            }
            rewards[ep][t] = r;
            states.row_mut(k).assign(&cur.row(ep));
            actions.row_mut(k).assign(&Array1::from(a));
            means.row_mut(k).assign(&mu.row(ep));
            for (d, &v) in next.iter().enumerate() {
                cur[(ep, d)] = v;
            }
        }
    }
    let mut returns = Vec::with_capacity(e * h);
    let mut total = 0.0;
    for r in &rewards {
        total += r.iter().sum::<f64>();
        returns.extend(discounted_returns(r, cfg.gamma));
    }
    Ok(Rollout {
        states,
        actions,
        means,
        returns,
        mean_reward: total / e.max(1) as f64,
    })
}

/// Gradient of the clipped surrogate (to be minimized) with respect to the policy mean.
///
/// Returns the per-row upstream `∂(−min(rA, clip(r)A))/∂μ` for one minibatch.
fn surrogate_upstream<S: Scalar>(
    mu_new: &Array2<S>,
    mu_old: &Array2<S>,
    actions: &Array2<S>,
    adv: &[f64],
    std: f64,
    clip: f64,
) -> Array2<S> {
    let var = std * std;
    let b = mu_new.nrows();
    let mut up = Array2::zeros(mu_new.dim());
    for r in 0..b {
        let mut log_ratio = 0.0;
        for j in 0..mu_new.ncols() {
            let a = actions[(r, j)].as_f64();
            let dn = a - mu_new[(r, j)].as_f64();
            let dold = a - mu_old[(r, j)].as_f64();
            log_ratio += (dold * dold - dn * dn) / (2.0 * var);
        }
        let ratio = log_ratio.min(50.0).exp();
        let a = adv[r];
        let unclipped = (a >= 0.0 && ratio < 1.0 + clip) || (a < 0.0 && ratio > 1.0 - clip);
        if !unclipped {
            continue;
        }
        for j in 0..mu_new.ncols() {
            let dn = actions[(r, j)].as_f64() - mu_new[(r, j)].as_f64();
            up[(r, j)] = S::lit(-ratio * a * dn / var / b as f64);
        }
    }
    up
}

/// Mean undiscounted episode reward of the deterministic policy.
pub fn evaluate_policy<S: Scalar, R: Rng + ?Sized>(
    policy: &dyn Policy<S>,
    sys: &SystemModel<S>,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut w = vec![S::zero(); sys.noise_dim()];
    let mut next = vec![S::zero(); sys.state_dim()];
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut x = sys.sample_state(rng);
        for _ in 0..horizon {
            let u = policy.act(&x)?;
            sys.noise().sample_into(rng, &mut w);
            sys.step_into(&x, &u, &w, &mut next);
            total += sys.reward(&next).as_f64();
            x.copy_from_slice(&next);
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Pretrains a policy (and its value baseline) with clipped-surrogate PPO.
pub fn ppo_pretrain<S: Scalar, R: Rng + ?Sized>(
    sys: &SystemModel<S>,
    cfg: &PpoConfig,
    hidden: &[usize],
    rng: &mut R,
) -> Result<PpoOutcome<S>> {
    let n = sys.state_dim();
    let mut dims = vec![n];
    dims.extend(hidden);
    let mut pdims = dims.clone();
    pdims.push(sys.action_dim());
    dims.push(1);
    let mut policy = Mlp::random(&pdims, Activation::Relu, Activation::Identity, rng);
    let mut value = Mlp::random(&dims, Activation::Relu, Activation::Identity, rng);
    let lr = S::lit(cfg.lr);
    let mut pi_opt = Adam::new(&policy, lr);
    let mut v_opt = Adam::new(&value, lr);
    let mut mean_rewards = Vec::with_capacity(cfg.iterations);

    for it in 1..=cfg.iterations {
        let std = exploration_std(cfg, it);
        let roll = collect(&policy, sys, cfg, std, rng)?;
        mean_rewards.push(roll.mean_reward);
        let total = roll.returns.len();
        if total == 0 {
            continue;
        }
        let baseline = value.forward_batch(roll.states.view())?;
        let mut adv: Vec<f64> = roll
            .returns
            .iter()
            .zip(baseline.column(0))
            .map(|(g, v)| g - v.as_f64())
            .collect();
        normalize_advantages(&mut adv);

        let mut order: Vec<usize> = (0..total).collect();
        let bs = cfg.minibatch.max(1).min(total);
        let policy_epochs = if it == 1 {
            cfg.first_policy_epochs
        } else {
            cfg.policy_epochs
        };
        for _ in 0..policy_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(bs) {
                let xs = roll.states.select(Axis(0), chunk);
                let acts = roll.actions.select(Axis(0), chunk);
                let old = roll.means.select(Axis(0), chunk);
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let cache = policy.forward_cached(xs.view())?;
                let up = surrogate_upstream(cache.output(), &old, &acts, &a, std, cfg.clip);
                let (mut g, _) = policy.backward_batch(&cache, up.view())?;
                add_lipschitz_hinge(&policy, &mut g, cfg)?;
                pi_opt.step(&mut policy, &g)?;
            }
        }

        let value_epochs = if it == 1 {
            cfg.first_value_epochs
        } else {
            cfg.value_epochs
        };
        for _ in 0..value_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(bs) {
                let xs = roll.states.select(Axis(0), chunk);
                let cache = value.forward_cached(xs.view())?;
                let scale = 2.0 / chunk.len() as f64;
                let up = Array2::from_shape_fn((chunk.len(), 1), |(r, _)| {
                    S::lit(scale * (cache.output()[(r, 0)].as_f64() - roll.returns[chunk[r]]))
                });
                let (g, _) = value.backward_batch(&cache, up.view())?;
                v_opt.step(&mut value, &g)?;
            }
        }
        log::debug!(
            "PPO iteration {it}: std={std:.4} mean episode reward {:.3}",
            roll.mean_reward
        );
    }
    Ok(PpoOutcome {
        policy,
        value,
        mean_rewards,
    })
}

fn add_lipschitz_hinge<S: Scalar>(policy: &Mlp<S>, g: &mut Gradients<S>, cfg: &PpoConfig) -> Result<()> {
    let (l, dl) = network_lipschitz_grad(policy)?;
    if l > S::lit(cfg.rho_theta) {
        g.add_scaled(&dl, S::lit(cfg.lipschitz_lambda));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn std_schedule_endpoints() {
        let c = PpoConfig::default();
        assert_eq!(exploration_std(&c, 1), 0.5);
        assert_relative_eq!(exploration_std(&c, 50), 0.05, epsilon = 1e-15);
        assert_relative_eq!(exploration_std(&c, 25), 0.5 - 0.45 * 24.0 / 49.0, epsilon = 1e-15);
        assert_relative_eq!(exploration_std(&c, 80), 0.05, epsilon = 1e-15);
        let mut prev = f64::INFINITY;
        for it in 1..=50 {
            let s = exploration_std(&c, it);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn constant_advantages_normalize_to_zero() {
        let mut a = vec![3.0; 10];
        normalize_advantages(&mut a);
        assert!(a.iter().all(|&v| v == 0.0));
        let mut b = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut b);
        assert_relative_eq!(b.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        let var: f64 = b.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_relative_eq!(var, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn returns_are_discounted_backwards() {
        let g = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, vec![1.5, 1.0, 2.0]);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mu_old = Array2::from_shape_vec((3, 1), vec![0.1, -0.2, 0.3]).unwrap();
        let acts = Array2::from_shape_vec((3, 1), vec![0.2, -0.5, 0.1]).unwrap();
        let mu_new = Array2::from_shape_vec((3, 1), vec![0.12, -0.21, 0.29]).unwrap();
        let adv = [1.0, -0.5, 2.0];
        let (std, clip) = (0.3, 0.2);
        let objective = |mu: &Array2<f64>| -> f64 {
            let mut s = 0.0;
            for r in 0..3 {
                let a = acts[(r, 0)];
                let a: f64 = a;
                let lr = ((a - mu_old[(r, 0)]).powi(2) - (a - mu[(r, 0)]).powi(2)) / (2.0 * std * std);
                let ratio = lr.exp();
                s += -(ratio * adv[r]).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv[r]);
            }
            s / 3.0
        };
        let up = surrogate_upstream(&mu_new, &mu_old, &acts, &adv, std, clip);
        for r in 0..3 {
            let h = 1e-7;
            let mut p = mu_new.clone();
            p[(r, 0)] += h;
            let mut q = mu_new.clone();
            q[(r, 0)] -= h;
            let num = (objective(&p) - objective(&q)) / (2.0 * h);
            assert_relative_eq!(up[(r, 0)], num, epsilon = 1e-6);
        }
    }

    #[test]
    fn short_pretraining_runs() {
        let sys = SystemModel::<f64>::lds2d();
        let cfg = PpoConfig {
            iterations: 2,
            episodes: 3,
            horizon: 20,
            first_policy_epochs: 2,
            policy_epochs: 1,
            first_value_epochs: 1,
            value_epochs: 1,
            ..PpoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ppo_pretrain(&sys, &cfg, &[16], &mut rng).unwrap();
        assert_eq!(out.mean_rewards.len(), 2);
        assert!(out.policy.is_finite() && out.value.is_finite());
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let again = ppo_pretrain(&sys, &cfg, &[16], &mut rng2).unwrap();
        assert_eq!(again.policy, out.policy);
    }
}
