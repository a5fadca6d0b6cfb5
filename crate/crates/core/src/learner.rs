//! Joint training of the policy and the supermartingale candidate, and the learner-verifier
//! loop around it.
//!
//! The training objective is
//!
//! ```text
//! L = L_cond2 + L_cond3 + L_<M + λ(hinge(L(π) − ρ_θ) + hinge(L(V) − ρ_ν)) + α·max{ρ′ − L(V), 0}
//! ```
//!
//! where `L(·)` is the product of per-layer induced L1 norms. The constants `L_V·Δ` and
//! `K·τ` that enter the hinges are treated as fixed numbers during each step.

use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certificate::{config_hash, Certificate, CertifiedPolicy, NoiseConfig};
use crate::grid::{Grid, DEFAULT_CELL_BUDGET};
use crate::lipschitz::{compose_k, max_step_size, network_lipschitz, network_lipschitz_grad, LipschitzReport};
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::noise::{BoundMode, NoisePartition};
use crate::policy::Policy;
use crate::ppo::{ppo_pretrain, PpoConfig};
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::verifier::{verify, VerifyConfig, VerifyOutcome, VerifyStatus};
use crate::{Error, Result};

/// Loss value above which an iteration is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub rho_theta: f64,
    pub rho_nu: f64,
    pub rho_prime: f64,
    pub delta_train: f64,
    #[serde(rename = "N_cond2")]
    pub n_cond2: usize,
    #[serde(rename = "N_cond3")]
    pub n_cond3: usize,
    #[serde(rename = "N_3")]
    pub n_3: usize,
    #[serde(rename = "N_4")]
    pub n_4: usize,
    pub eps_train: f64,
    pub freeze_policy_iters: usize,
    #[serde(rename = "use_Lprime_cond2")]
    pub use_lprime_cond2: bool,
    pub batch_size: usize,
    pub epochs_per_iter: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            lambda: 0.001,
            alpha: 10.0,
            rho_theta: 4.0,
            rho_nu: 8.0,
            rho_prime: 0.01,
            delta_train: 0.1,
            n_cond2: 16,
            n_cond3: 256,
            n_3: 256,
            n_4: 512,
            eps_train: 0.1,
            freeze_policy_iters: 3,
            use_lprime_cond2: false,
            batch_size: 256,
            epochs_per_iter: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("rho_theta", self.rho_theta),
            ("rho_nu", self.rho_nu),
            ("rho_prime", self.rho_prime),
            ("delta_train", self.delta_train),
            ("eps_train", self.eps_train),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("N_cond2", self.n_cond2),
            ("N_cond3", self.n_cond3),
            ("N_3", self.n_3),
            ("N_4", self.n_4),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Where a training point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BufferPoint<S: Scalar> {
    pub x: Vec<S>,
    pub source: Provenance,
}

/// The training set `B`: seed points plus verifier counterexamples, at most one per grid cell.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CounterexampleBuffer<S: Scalar> {
    points: Vec<BufferPoint<S>>,
}

impl<S: Scalar> CounterexampleBuffer<S> {
    pub fn new() -> Self {
        Self { points: Vec::new() }
    }

    /// Seed points, one kept per cell of `grid`.
    pub fn from_seed(points: Vec<Vec<S>>, grid: &Grid<S>) -> Self {
        let pts = points
            .into_iter()
            .map(|x| BufferPoint {
                x,
                source: Provenance::Seed,
            })
            .collect();
        Self {
            points: dedup_by_cell(pts, grid),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[BufferPoint<S>] {
        &self.points
    }

    pub fn count(&self, source: Provenance) -> usize {
        self.points.iter().filter(|p| p.source == source).count()
    }

    /// Points as rows of a matrix.
    pub fn to_array(&self) -> Array2<S> {
        let n = self.points.first().map_or(0, |p| p.x.len());
        let mut out = Array2::zeros((self.points.len(), n));
        for (r, p) in self.points.iter().enumerate() {
            for (d, &v) in p.x.iter().enumerate() {
                out[(r, d)] = v;
            }
        }
        out
    }

    /// Refills an empty buffer with `seed`; returns whether it did.
    pub fn reseed_if_empty(&mut self, seed: Vec<Vec<S>>, grid: &Grid<S>) -> bool {
        if !self.is_empty() {
            return false;
        }
        warn!("training buffer is empty after the update; reseeding from the coarse subgrid");
        *self = Self::from_seed(seed, grid);
        true
    }
}

/// Keeps the first point of each cell (retained points sort before new counterexamples) and
/// orders the result by cell index.
fn dedup_by_cell<S: Scalar>(points: Vec<BufferPoint<S>>, grid: &Grid<S>) -> Vec<BufferPoint<S>> {
    let mut keyed: Vec<(usize, usize, BufferPoint<S>)> = points
        .into_iter()
        .enumerate()
        .map(|(i, p)| (grid.cell_of(&p.x), i, p))
        .collect();
    keyed.sort_by_key(|(cell, i, _)| (*cell, *i));
    keyed.dedup_by_key(|(cell, _, _)| *cell);
    keyed.into_iter().map(|(_, _, p)| p).collect()
}

/// `B ← (B \ {x ∈ B | V(x) < M}) ∪ X̃_ce`, deduplicated by cell of `grid`.
pub fn update_buffer<S: Scalar>(
    buffer: &CounterexampleBuffer<S>,
    counterexamples: &[Vec<S>],
    v: &Mlp<S>,
    m: S,
    grid: &Grid<S>,
) -> Result<CounterexampleBuffer<S>> {
    let mut kept = Vec::with_capacity(buffer.len() + counterexamples.len());
    if !buffer.is_empty() {
        let values = v.forward_batch(buffer.to_array().view())?;
        for (p, val) in buffer.points.iter().zip(values.column(0)) {
            if !(*val < m) {
                kept.push(p.clone());
            }
        }
    }
    for x in counterexamples {
        if !grid.bounds().contains(x) {
            return Err(Error::InvalidConfig(format!(
                "counterexample {x:?} lies outside the state space"
            )));
        }
        kept.push(BufferPoint {
            x: x.clone(),
            source: Provenance::Verifier,
        });
    }
    Ok(CounterexampleBuffer {
        points: dedup_by_cell(kept, grid),
    })
}

/// A loss value with its gradients.
#[derive(Debug, Clone)]
pub struct LossTerm<S: Scalar> {
    pub value: S,
    /// `None` when the policy is not being trained.
    pub grad_pi: Option<Gradients<S>>,
    pub grad_v: Gradients<S>,
}

fn rows_of<S: Scalar>(rows: &[Vec<S>], dim: usize) -> Array2<S> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (r, x) in rows.iter().enumerate() {
        for (d, &v) in x.iter().enumerate() {
            out[(r, d)] = v;
        }
    }
    out
}

/// Condition-2 loss with freshly drawn noise: `N` samples per row of `xs`.
#[allow(clippy::too_many_arguments)]
pub fn loss_cond2<S: Scalar, R: Rng + ?Sized>(
    policy: &dyn Policy<S>,
    train_policy: bool,
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    xs: ArrayView2<'_, S>,
    margin: S,
    n_samples: usize,
    rng: &mut R,
) -> Result<LossTerm<S>> {
    let p = sys.noise_dim();
    let mut noise = Array2::zeros((xs.nrows() * n_samples, p));
    let mut w = vec![S::zero(); p];
    for mut row in noise.outer_iter_mut() {
        sys.noise().sample_into(rng, &mut w);
        for (d, &v) in w.iter().enumerate() {
            row[d] = v;
        }
    }
    loss_cond2_with_noise(policy, train_policy, v, sys, xs, noise.view(), n_samples, margin)
}

/// Condition-2 loss for given noise samples; row `r·N + i` of `noise` belongs to row `r` of `xs`.
///
/// `(1/|B|) Σ_x max{ (1/N) Σ_i V(f(x, π(x), ω_i)) − V(x) + margin, 0 }`
#[allow(clippy::too_many_arguments)]
pub fn loss_cond2_with_noise<S: Scalar>(
    policy: &dyn Policy<S>,
    train_policy: bool,
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    xs: ArrayView2<'_, S>,
    noise: ArrayView2<'_, S>,
    n_samples: usize,
    margin: S,
) -> Result<LossTerm<S>> {
    let b = xs.nrows();
    if b == 0 || n_samples == 0 {
        return Err(Error::InvalidConfig(
            "condition-2 loss needs a nonempty batch and samples".into(),
        ));
    }
    if noise.nrows() != b * n_samples {
        return Err(Error::dims("loss_cond2 (noise rows)", b * n_samples, noise.nrows()));
    }
    let n = sys.state_dim();
    let net = if train_policy {
        Some(
            policy
                .as_network()
                .ok_or_else(|| Error::Contract("only a network policy can be trained".into()))?,
        )
    } else {
        None
    };
    let pi_cache = match net {
        Some(net) => Some(net.forward_cached(xs)?),
        None => None,
    };
    let us = match &pi_cache {
        Some(c) => c.output().clone(),
        None => policy.act_batch(xs)?,
    };

    let xs_rows: Vec<Vec<S>> = xs.outer_iter().map(|r| r.to_vec()).collect();
    let us_rows: Vec<Vec<S>> = us.outer_iter().map(|r| r.to_vec()).collect();
    let noise_rows: Vec<Vec<S>> = noise.outer_iter().map(|r| r.to_vec()).collect();
    let mut next = Array2::zeros((b * n_samples, n));
    let mut buf = vec![S::zero(); n];
    for r in 0..b {
        for i in 0..n_samples {
            let k = r * n_samples + i;
            sys.step_into(&xs_rows[r], &us_rows[r], &noise_rows[k], &mut buf);
            for (d, &val) in buf.iter().enumerate() {
                next[(k, d)] = val;
            }
        }
    }

    let v_next = v.forward_cached(next.view())?;
    let v_x = v.forward_cached(xs)?;
    let inv_n = S::one() / S::lit(n_samples as f64);
    let inv_b = S::one() / S::lit(b as f64);
    let mut up_next = Array2::zeros((b * n_samples, 1));
    let mut up_x = Array2::zeros((b, 1));
    let mut value = S::zero();
    for r in 0..b {
        let mean = (0..n_samples)
            .map(|i| v_next.output()[(r * n_samples + i, 0)])
            .fold(S::zero(), |a, c| a + c)
            * inv_n;
        let t = mean - v_x.output()[(r, 0)] + margin;
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("condition-2 loss at {:?}", xs_rows[r])));
        }
        if t > S::zero() {
            value += t;
            for i in 0..n_samples {
                up_next[(r * n_samples + i, 0)] = inv_n * inv_b;
            }
            up_x[(r, 0)] = -inv_b;
        }
    }
    value *= inv_b;

    let (mut grad_v, d_next) = v.backward_batch(&v_next, up_next.view())?;
    let (g_x, _) = v.backward_batch(&v_x, up_x.view())?;
    grad_v.add_assign(&g_x);

    let grad_pi = match (net, &pi_cache) {
        (Some(net), Some(cache)) => {
            let mut du = Array2::zeros((b, sys.action_dim()));
            for r in 0..b {
                for i in 0..n_samples {
                    let k = r * n_samples + i;
                    if up_next[(k, 0)] == S::zero() {
                        continue;
                    }
                    let g = sys.action_vjp(&xs_rows[r], &us_rows[r], &noise_rows[k], &d_next.row(k).to_vec());
                    for (j, gj) in g.into_iter().enumerate() {
                        du[(r, j)] += gj;
                    }
                }
            }
            Some(net.backward_batch(cache, du.view())?.0)
        }
        _ => None,
    };
    Ok(LossTerm { value, grad_pi, grad_v })
}

/// Condition-3 loss on `n_samples` uniform points of `𝒳 \ 𝒳_s`.
pub fn loss_cond3<S: Scalar, R: Rng + ?Sized>(
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    threshold: S,
    n_samples: usize,
    rng: &mut R,
) -> Result<LossTerm<S>> {
    let mut pts = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        pts.push(
            sys.sample_complement(rng)
                .ok_or_else(|| Error::InvalidConfig("the complement of the stabilizing set is empty".into()))?,
        );
    }
    loss_cond3_at(v, rows_of(&pts, sys.state_dim()).view(), threshold)
}

/// `max{threshold − min_i V(x_i), 0}`.
pub fn loss_cond3_at<S: Scalar>(v: &Mlp<S>, pts: ArrayView2<'_, S>, threshold: S) -> Result<LossTerm<S>> {
    if pts.nrows() == 0 {
        return Err(Error::InvalidConfig(
            "condition-3 loss needs at least one sample".into(),
        ));
    }
    let cache = v.forward_cached(pts)?;
    let (arg, min) = argmin(cache.output().column(0).iter().copied());
    let value = (threshold - min).max(S::zero());
    let mut up = Array2::zeros((pts.nrows(), 1));
    if value > S::zero() {
        up[(arg, 0)] = -S::one();
    }
    let (grad_v, _) = v.backward_batch(&cache, up.view())?;
    Ok(LossTerm {
        value,
        grad_pi: None,
        grad_v,
    })
}

/// `max{max_D V − M, 0} + max{min_X V − min_D V, 0}`.
pub fn loss_lt_m_at<S: Scalar>(
    v: &Mlp<S>,
    d_pts: ArrayView2<'_, S>,
    x_pts: ArrayView2<'_, S>,
    m: S,
) -> Result<LossTerm<S>> {
    if d_pts.nrows() == 0 || x_pts.nrows() == 0 {
        return Err(Error::InvalidConfig(
            "global-minimum loss needs samples in both sets".into(),
        ));
    }
    let cd = v.forward_cached(d_pts)?;
    let cx = v.forward_cached(x_pts)?;
    let (arg_max_d, max_d) = argmax(cd.output().column(0).iter().copied());
    let (arg_min_d, min_d) = argmin(cd.output().column(0).iter().copied());
    let (arg_min_x, min_x) = argmin(cx.output().column(0).iter().copied());
    let h1 = (max_d - m).max(S::zero());
    let h2 = (min_x - min_d).max(S::zero());
    let mut up_d = Array2::zeros((d_pts.nrows(), 1));
    let mut up_x = Array2::zeros((x_pts.nrows(), 1));
    if h1 > S::zero() {
        up_d[(arg_max_d, 0)] += S::one();
    }
    if h2 > S::zero() {
        up_x[(arg_min_x, 0)] += S::one();
        up_d[(arg_min_d, 0)] -= S::one();
    }
    let (mut grad_v, _) = v.backward_batch(&cd, up_d.view())?;
    grad_v.add_assign(&v.backward_batch(&cx, up_x.view())?.0);
    Ok(LossTerm {
        value: h1 + h2,
        grad_pi: None,
        grad_v,
    })
}

/// `λ(hinge(L(π) − ρ_θ) + hinge(L(V) − ρ_ν)) + α·max{ρ′ − L(V), 0}`.
///
/// Pass `pi = None` to drop the policy term (fixed or non-network policy).
pub fn loss_lipschitz<S: Scalar>(pi: Option<&Mlp<S>>, v: &Mlp<S>, cfg: &TrainConfig) -> Result<LossTerm<S>> {
    let lambda = S::lit(cfg.lambda);
    let alpha = S::lit(cfg.alpha);
    let (l_v, dl_v) = network_lipschitz_grad(v)?;
    let mut value = S::zero();
    let mut grad_v = Gradients::zeros_like(v);
    let over_v = l_v - S::lit(cfg.rho_nu);
    if over_v > S::zero() {
        value += lambda * over_v;
        grad_v.add_scaled(&dl_v, lambda);
    }
    let under_v = S::lit(cfg.rho_prime) - l_v;
    if under_v > S::zero() {
        value += alpha * under_v;
        grad_v.add_scaled(&dl_v, -alpha);
    }
    let grad_pi = match pi {
        Some(pi) => {
            let (l_pi, dl_pi) = network_lipschitz_grad(pi)?;
            let mut g = Gradients::zeros_like(pi);
            let over = l_pi - S::lit(cfg.rho_theta);
            if over > S::zero() {
                value += lambda * over;
                g.add_scaled(&dl_pi, lambda);
            }
            Some(g)
        }
        None => None,
    };
    Ok(LossTerm { value, grad_pi, grad_v })
}

fn argmin<S: Scalar>(it: impl Iterator<Item = S>) -> (usize, S) {
    it.enumerate().fold(
        (0, S::infinity()),
        |best, (i, v)| if v < best.1 { (i, v) } else { best },
    )
}

fn argmax<S: Scalar>(it: impl Iterator<Item = S>) -> (usize, S) {
    it.enumerate().fold(
        (0, S::neg_infinity()),
        |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        },
    )
}

/// Constants entering the hinges. The gradient treats all of them as fixed.
#[derive(Debug, Clone, Copy)]
pub struct TrainConstants<S: Scalar> {
    pub m: S,
    pub l_f: S,
    /// Step-size bound `Δ_θ` from the most recent computation.
    pub delta_theta: S,
    pub tau: S,
    /// `L_V` of the value network, refreshed before every step.
    pub l_v: S,
    /// `L_π` of the policy, refreshed before every step.
    pub l_pi: S,
}

impl<S: Scalar> TrainConstants<S> {
    /// Reads `L_V` and `L_π` off the current networks.
    pub fn at(sys: &SystemModel<S>, policy: &dyn Policy<S>, v: &Mlp<S>, m: S, delta_theta: S, tau: S) -> Result<Self> {
        let l_pi = policy
            .lipschitz()
            .ok_or_else(|| Error::InvalidConfig("policy has no Lipschitz constant".into()))?;
        Ok(Self {
            m,
            l_f: sys.lipschitz(),
            delta_theta,
            tau,
            l_v: network_lipschitz(v)?,
            l_pi,
        })
    }

    /// Same constants with `L_V` and `L_π` read off the given networks.
    pub fn refreshed(&self, policy: &dyn Policy<S>, v: &Mlp<S>) -> Result<Self> {
        Ok(Self {
            l_v: network_lipschitz(v)?,
            l_pi: policy.lipschitz().unwrap_or(self.l_pi),
            ..*self
        })
    }
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossBreakdown<S: Scalar> {
    pub cond2: S,
    pub cond3: S,
    pub lt_m: S,
    pub lipschitz: S,
    pub total: S,
}

/// Points that the previous `V` placed below `M`, or the target set before any training.
#[derive(Debug, Clone, PartialEq)]
pub enum LowSet<S: Scalar> {
    Target,
    Points(Vec<Vec<S>>),
}

impl<S: Scalar> LowSet<S> {
    fn sample<R: Rng + ?Sized>(&self, sys: &SystemModel<S>, n: usize, rng: &mut R) -> Array2<S> {
        let pts: Vec<Vec<S>> = match self {
            LowSet::Target => (0..n).map(|_| sys.sample_target(rng)).collect(),
            LowSet::Points(p) => (0..n).map(|_| p[rng.gen_range(0..p.len())].clone()).collect(),
        };
        rows_of(&pts, sys.state_dim())
    }
}

/// Every loss term and its gradients at one batch.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn total_loss<S: Scalar, R: Rng + ?Sized>(
    policy: &dyn Policy<S>,
    train_policy: bool,
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    batch: ArrayView2<'_, S>,
    consts: &TrainConstants<S>,
    cfg: &TrainConfig,
    low: &LowSet<S>,
    rng: &mut R,
) -> Result<(LossBreakdown<S>, Option<Gradients<S>>, Gradients<S>)> {
    let margin = if cfg.use_lprime_cond2 {
        compose_k(consts.l_v, consts.l_f, consts.l_pi) * consts.tau
    } else {
        S::lit(cfg.eps_train)
    };
    let threshold = consts.m + consts.l_v * consts.delta_theta + S::lit(cfg.delta_train);

    let c2 = loss_cond2(policy, train_policy, v, sys, batch, margin, cfg.n_cond2, rng)?;
    let c3 = loss_cond3(v, sys, threshold, cfg.n_cond3, rng)?;
    let d_pts = low.sample(sys, cfg.n_3, rng);
    let x_pts: Vec<Vec<S>> = (0..cfg.n_4).map(|_| sys.sample_state(rng)).collect();
    let lt = loss_lt_m_at(v, d_pts.view(), rows_of(&x_pts, sys.state_dim()).view(), consts.m)?;
    let pi_net = if train_policy { policy.as_network() } else { None };
    let lip = loss_lipschitz(pi_net, v, cfg)?;
    let lip_value = if pi_net.is_none() {
        // The policy term still counts towards the reported value.
        match policy.as_network() {
            Some(net) => lip.value + hinge_pi(net, cfg)?,
            None => lip.value,
        }
    } else {
        lip.value
    };

    let mut grad_v = c2.grad_v;
    grad_v.add_assign(&c3.grad_v);
    grad_v.add_assign(&lt.grad_v);
    grad_v.add_assign(&lip.grad_v);
    let grad_pi = match (c2.grad_pi, lip.grad_pi) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        (a, b) => a.or(b),
    };
    let breakdown = LossBreakdown {
        cond2: c2.value,
        cond3: c3.value,
        lt_m: lt.value,
        lipschitz: lip_value,
        total: c2.value + c3.value + lt.value + lip_value,
    };
    Ok((breakdown, grad_pi, grad_v))
}

fn hinge_pi<S: Scalar>(net: &Mlp<S>, cfg: &TrainConfig) -> Result<S> {
    let l = network_lipschitz(net)?;
    Ok(S::lit(cfg.lambda) * (l - S::lit(cfg.rho_theta)).max(S::zero()))
}

/// The policy seen by the learner.
pub enum PolicyArg<'a, S: Scalar> {
    /// A network policy; trained unless frozen.
    Net(&'a mut Mlp<S>),
    /// A policy that is never updated.
    Fixed(&'a dyn Policy<S>),
}

impl<S: Scalar> PolicyArg<'_, S> {
    fn as_policy(&self) -> &dyn Policy<S> {
        match self {
            PolicyArg::Net(n) => &**n,
            PolicyArg::Fixed(p) => *p,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainReport<S: Scalar> {
    pub steps: usize,
    pub policy_trained: bool,
    /// Loss of the first minibatch.
    pub first: LossBreakdown<S>,
    /// Mean loss over the last epoch.
    pub last_epoch_mean: S,
}

/// Optimizer state and randomness carried across learner iterations.
#[derive(Debug, Clone)]
pub struct Learner<S: Scalar> {
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    pi_opt: Option<Adam<S>>,
    v_opt: Adam<S>,
    low: LowSet<S>,
}

impl<S: Scalar> Learner<S> {
    pub fn new(config: TrainConfig, pi: Option<&Mlp<S>>, v: &Mlp<S>) -> Result<Self> {
        config.validate()?;
        let lr = S::lit(config.lr);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pi_opt: pi.map(|p| Adam::new(p, lr)),
            v_opt: Adam::new(v, lr),
            low: LowSet::Target,
            config,
        })
    }

    pub fn low_set(&self) -> &LowSet<S> {
        &self.low
    }

    /// Keeps the candidates on which `v` is below `M` as the next `D_<M`.
    pub fn update_low_set(&mut self, v: &Mlp<S>, candidates: &[Vec<S>], m: S) -> Result<()> {
        if candidates.is_empty() {
            return Ok(());
        }
        let dim = candidates[0].len();
        let values = v.forward_batch(rows_of(candidates, dim).view())?;
        let low: Vec<Vec<S>> = candidates
            .iter()
            .zip(values.column(0))
            .filter(|(_, &val)| val < m)
            .map(|(x, _)| x.clone())
            .collect();
        self.low = if low.is_empty() {
            LowSet::Target
        } else {
            LowSet::Points(low)
        };
        Ok(())
    }

    /// Total loss on the whole buffer with a dedicated noise stream, for monitoring.
    pub fn evaluate(
        &self,
        policy: &dyn Policy<S>,
        v: &Mlp<S>,
        sys: &SystemModel<S>,
        buffer: &CounterexampleBuffer<S>,
        consts: &TrainConstants<S>,
        seed: u64,
    ) -> Result<LossBreakdown<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = buffer.to_array();
        Ok(total_loss(
            policy,
            false,
            v,
            sys,
            xs.view(),
            consts,
            &self.config,
            &self.low,
            &mut rng,
        )?
        .0)
    }

    /// `epochs_per_iter` passes of minibatch descent over the buffer.
    ///
    /// The policy is left untouched while `iter_index < freeze_policy_iters`. If the loss
    /// exceeds [`DIVERGENCE_LIMIT`] both networks are restored and an error is returned.
    pub fn train_iteration(
        &mut self,
        mut pi: PolicyArg<'_, S>,
        v: &mut Mlp<S>,
        sys: &SystemModel<S>,
        buffer: &CounterexampleBuffer<S>,
        consts: &TrainConstants<S>,
        iter_index: usize,
    ) -> Result<TrainReport<S>> {
        if buffer.is_empty() {
            return Err(Error::InvalidConfig("training buffer is empty".into()));
        }
        let train_policy =
            matches!(pi, PolicyArg::Net(_)) && self.pi_opt.is_some() && iter_index >= self.config.freeze_policy_iters;
        let v_snapshot = v.clone();
        let pi_snapshot = match &pi {
            PolicyArg::Net(n) => Some((**n).clone()),
            PolicyArg::Fixed(_) => None,
        };
        let data = buffer.to_array();
        let n = data.nrows();
        let bs = self.config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut steps = 0;
        let mut first = None;
        let mut last_epoch_mean = S::zero();
        let limit = S::lit(DIVERGENCE_LIMIT);
        for _ in 0..self.config.epochs_per_iter {
            order.shuffle(&mut self.rng);
            let mut sum = S::zero();
            let mut batches = 0usize;
            for chunk in order.chunks(bs) {
                let batch = data.select(ndarray::Axis(0), chunk);
                let result = consts.refreshed(pi.as_policy(), v).and_then(|c| {
                    total_loss(
                        pi.as_policy(),
                        train_policy,
                        v,
                        sys,
                        batch.view(),
                        &c,
                        &self.config,
                        &self.low,
                        &mut self.rng,
                    )
                });
                let (loss, g_pi, g_v) = match result {
                    Ok(r) if r.0.total.is_finite() && r.0.total <= limit => r,
                    Ok(r) => {
                        restore(&mut pi, v, pi_snapshot, v_snapshot);
                        return Err(Error::Divergence(format!("loss {} after {steps} steps", r.0.total)));
                    }
                    Err(e) => {
                        restore(&mut pi, v, pi_snapshot, v_snapshot);
                        return Err(e);
                    }
                };
                first.get_or_insert(loss);
                sum += loss.total;
                batches += 1;
                if let Err(e) = self.v_opt.step(v, &g_v) {
                    restore(&mut pi, v, pi_snapshot, v_snapshot);
                    return Err(e);
                }
                if train_policy {
                    if let (PolicyArg::Net(net), Some(opt), Some(g)) = (&mut pi, self.pi_opt.as_mut(), g_pi.as_ref()) {
                        if let Err(e) = opt.step(net, g) {
                            restore(&mut pi, v, pi_snapshot, v_snapshot);
                            return Err(e);
                        }
                    }
                }
                steps += 1;
            }
            last_epoch_mean = sum / S::lit(batches.max(1) as f64);
        }
        let first = first.unwrap_or(LossBreakdown {
            cond2: S::zero(),
            cond3: S::zero(),
            lt_m: S::zero(),
            lipschitz: S::zero(),
            total: S::zero(),
        });
        Ok(TrainReport {
            steps,
            policy_trained: train_policy,
            first,
            last_epoch_mean,
        })
    }
}

fn restore<S: Scalar>(pi: &mut PolicyArg<'_, S>, v: &mut Mlp<S>, pi_snapshot: Option<Mlp<S>>, v_snapshot: Mlp<S>) {
    *v = v_snapshot;
    if let (PolicyArg::Net(net), Some(snap)) = (pi, pi_snapshot) {
        **net = snap;
    }
}

/// Everything that determines a synthesis or verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub train: TrainConfig,
    pub ppo: PpoConfig,
    /// Initial mesh of the verification grid.
    pub tau: f64,
    #[serde(rename = "M")]
    pub m: f64,
    /// Noise cells per dimension for the expectation bound.
    pub noise_cells_per_dim: usize,
    /// Noise cells per dimension for the step-size bound.
    pub step_cells_per_dim: usize,
    pub bound_mode: BoundMode,
    pub local_refinement: bool,
    pub cell_budget: u64,
    pub max_iterations: usize,
    pub timeout_secs: f64,
    /// Target number of seed points per dimension in the initial buffer.
    pub seed_points_per_dim: usize,
    /// Hidden layer widths of both networks.
    pub hidden: Vec<usize>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ppo: PpoConfig::default(),
            tau: 0.0007,
            m: 1.0,
            noise_cells_per_dim: 16,
            step_cells_per_dim: 4,
            bound_mode: BoundMode::MassWeighted,
            local_refinement: true,
            cell_budget: DEFAULT_CELL_BUDGET as u64,
            max_iterations: 100,
            timeout_secs: 4.0 * 3600.0,
            seed_points_per_dim: 100,
            hidden: vec![128, 128],
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if !(self.m > 0.0) || !self.m.is_finite() {
            return Err(Error::InvalidConfig(format!("M must be positive, got {}", self.m)));
        }
        if self.noise_cells_per_dim == 0 || self.step_cells_per_dim == 0 || self.seed_points_per_dim == 0 {
            return Err(Error::InvalidConfig(
                "partition and seed sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            m: self.m,
            bound_mode: self.bound_mode,
            local_refinement: self.local_refinement,
            cell_budget: self.cell_budget as u128,
        }
    }

    pub fn noise_config(&self, sys: &SystemModel<impl Scalar>) -> NoiseConfig {
        NoiseConfig {
            spec: sys.noise().clone(),
            cells_per_dim: self.noise_cells_per_dim,
            mode: self.bound_mode,
            step_cells_per_dim: self.step_cells_per_dim,
        }
    }

    fn network_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(output);
        dims
    }

    /// A freshly initialized candidate `V` with a softplus output.
    pub fn init_value_net<S: Scalar, R: Rng + ?Sized>(&self, state_dim: usize, rng: &mut R) -> Mlp<S> {
        Mlp::random(
            &self.network_dims(state_dim, 1),
            Activation::Relu,
            Activation::Softplus,
            rng,
        )
    }

    /// A freshly initialized policy with an identity output.
    pub fn init_policy_net<S: Scalar, R: Rng + ?Sized>(
        &self,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Mlp<S> {
        Mlp::random(
            &self.network_dims(state_dim, action_dim),
            Activation::Relu,
            Activation::Identity,
            rng,
        )
    }
}

/// Seed points: centers of a subgrid with about `per_dim` cells along the longest axis.
pub fn seed_points<S: Scalar>(grid: &Grid<S>, per_dim: usize) -> Vec<Vec<S>> {
    let widest = grid.counts().iter().copied().max().unwrap_or(1);
    grid.seed_training_set(widest.div_ceil(per_dim.max(1)))
}

/// Why a loop ended without a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Timeout,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IterationReport<S: Scalar> {
    /// 1-based loop iteration.
    pub iteration: usize,
    pub tau: S,
    pub train: Option<TrainReport<S>>,
    pub train_error: Option<String>,
    pub lipschitz: LipschitzReport<S>,
    pub status: VerifyStatus,
    pub counterexamples: usize,
    pub hard_violations: usize,
    pub buffer_len: usize,
    pub epsilon: Option<S>,
    pub delta: Option<S>,
    pub elapsed_secs: f64,
}

/// Learner state written after every iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<S: Scalar> {
    pub iteration: usize,
    pub policy: Option<Mlp<S>>,
    #[serde(rename = "V")]
    pub v: Mlp<S>,
    pub buffer: CounterexampleBuffer<S>,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome<S: Scalar> {
    pub certificate: Option<Certificate<S>>,
    pub stop: Option<StopReason>,
    pub reports: Vec<IterationReport<S>>,
    pub policy: CertifiedPolicy<S>,
    pub v: Mlp<S>,
    pub buffer: CounterexampleBuffer<S>,
    pub last_outcome: Option<VerifyOutcome<S>>,
    pub final_tau: S,
}

impl<S: Scalar> SynthesisOutcome<S> {
    pub fn is_certified(&self) -> bool {
        self.certificate.is_some()
    }
}

/// Called after every loop iteration.
pub type Observer<'a, S> = dyn FnMut(&IterationReport<S>, &Checkpoint<S>) + 'a;

/// The full learner-verifier procedure: PPO pretraining, then alternating training and
/// verification until a certificate is found, the iteration limit is hit, or time runs out.
pub fn synthesize<S: Scalar>(
    sys: &SystemModel<S>,
    cfg: &SynthesisConfig,
    observer: &mut Observer<'_, S>,
) -> Result<SynthesisOutcome<S>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let pretrained = ppo_pretrain(sys, &cfg.ppo, &cfg.hidden, &mut rng)?;
    info!(
        "pretraining done: {} PPO iterations, last mean episode reward {:.3}",
        pretrained.mean_rewards.len(),
        pretrained.mean_rewards.last().copied().unwrap_or(f64::NAN)
    );
    let v = cfg.init_value_net(sys.state_dim(), &mut rng);
    run_loop(sys, cfg, Slot::Owned(pretrained.policy), v, false, start, observer)
}

/// Verification of a given policy: only `V` is trained.
///
/// With `initial_v`, the pair is verified once before any training, so a valid certificate
/// pair is confirmed immediately.
pub fn verify_fixed_policy<S: Scalar>(
    policy: &dyn Policy<S>,
    certified: CertifiedPolicy<S>,
    sys: &SystemModel<S>,
    cfg: &SynthesisConfig,
    initial_v: Option<Mlp<S>>,
    observer: &mut Observer<'_, S>,
) -> Result<SynthesisOutcome<S>> {
    cfg.validate()?;
    if policy.lipschitz().is_none() {
        return Err(Error::InvalidConfig(
            "a policy that is not a network must come with its Lipschitz constant".into(),
        ));
    }
    if policy.state_dim() != sys.state_dim() || policy.action_dim() != sys.action_dim() {
        return Err(Error::dims(
            "verify_fixed_policy (policy shape)",
            sys.state_dim(),
            policy.state_dim(),
        ));
    }
    let start = Instant::now();
    let verify_first = initial_v.is_some();
    let v = match initial_v {
        Some(v) => v,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            cfg.init_value_net(sys.state_dim(), &mut rng)
        }
    };
    run_loop(
        sys,
        cfg,
        Slot::Fixed { policy, certified },
        v,
        verify_first,
        start,
        observer,
    )
}

enum Slot<'a, S: Scalar> {
    Owned(Mlp<S>),
    Fixed {
        policy: &'a dyn Policy<S>,
        certified: CertifiedPolicy<S>,
    },
}

impl<S: Scalar> Slot<'_, S> {
    fn policy(&self) -> &dyn Policy<S> {
        match self {
            Slot::Owned(n) => n,
            Slot::Fixed { policy, .. } => *policy,
        }
    }

    fn certified(&self) -> CertifiedPolicy<S> {
        match self {
            Slot::Owned(n) => CertifiedPolicy::Network { net: n.clone() },
            Slot::Fixed { certified, .. } => certified.clone(),
        }
    }

    fn network(&self) -> Option<&Mlp<S>> {
        match self {
            Slot::Owned(n) => Some(n),
            Slot::Fixed { .. } => None,
        }
    }
}

fn run_loop<S: Scalar>(
    sys: &SystemModel<S>,
    cfg: &SynthesisConfig,
    mut slot: Slot<'_, S>,
    mut v: Mlp<S>,
    verify_first: bool,
    start: Instant,
    observer: &mut Observer<'_, S>,
) -> Result<SynthesisOutcome<S>> {
    let hash = config_hash(&(sys.id(), cfg))?;
    let budget = cfg.cell_budget as u128;
    let m = S::lit(cfg.m);
    let mut grid = Grid::build(sys.state_space().clone(), S::lit(cfg.tau), budget)?;
    let seeds = seed_points(&grid, cfg.seed_points_per_dim);
    let mut buffer = CounterexampleBuffer::from_seed(seeds.clone(), &grid);
    let part = NoisePartition::new(sys.noise(), cfg.noise_cells_per_dim)?;
    let step_part = NoisePartition::new(sys.noise(), cfg.step_cells_per_dim)?;
    let vcfg = cfg.verify_config();
    let l_pi_fixed = match &slot {
        Slot::Fixed { policy, .. } => policy.lipschitz(),
        Slot::Owned(_) => None,
    };
    let mut learner = Learner::new(cfg.train.clone(), slot.network(), &v)?;

    let widest = grid.counts().iter().copied().max().unwrap_or(1);
    let coarse_tau = S::lit(cfg.tau) * S::lit(widest.div_ceil(cfg.seed_points_per_dim).max(1) as f64);
    let coarse = Grid::build(sys.state_space().clone(), coarse_tau, budget)?;
    let mut delta_estimate = max_step_size(sys, slot.policy(), &coarse, &step_part)?;

    let mut reports = Vec::new();
    let mut last_outcome = None;
    let timed_out = |start: &Instant| start.elapsed().as_secs_f64() >= cfg.timeout_secs;
    let mut stop = Some(StopReason::MaxIterations);

    for iteration in 1..=cfg.max_iterations {
        if timed_out(&start) {
            stop = Some(StopReason::Timeout);
            break;
        }
        let skip_training = verify_first && iteration == 1;
        let mut train = None;
        let mut train_error = None;
        if !skip_training {
            let consts = TrainConstants::at(sys, slot.policy(), &v, m, delta_estimate, grid.tau())?;
            let arg = match &mut slot {
                Slot::Owned(n) => PolicyArg::Net(n),
                Slot::Fixed { policy, .. } => PolicyArg::Fixed(*policy),
            };
            match learner.train_iteration(arg, &mut v, sys, &buffer, &consts, iteration - 1) {
                Ok(r) => train = Some(r),
                Err(Error::Divergence(msg)) => {
                    warn!("iteration {iteration}: training diverged ({msg}); parameters restored");
                    train_error = Some(msg);
                }
                Err(e) => return Err(e),
            }
            if timed_out(&start) {
                stop = Some(StopReason::Timeout);
                break;
            }
        }

        let policy = slot.policy();
        let l_pi = match slot.network() {
            Some(n) => network_lipschitz(n)?,
            None => l_pi_fixed.expect("checked on entry"),
        };
        let delta_theta = max_step_size(sys, policy, &grid, &step_part)?;
        let lips = LipschitzReport::new(l_pi, network_lipschitz(&v)?, sys.lipschitz(), delta_theta)?;
        let outcome = verify(&v, policy, sys, &grid, &lips, &part, &vcfg)?;
        let report = IterationReport {
            iteration,
            tau: grid.tau(),
            train,
            train_error,
            lipschitz: lips,
            status: outcome.status,
            counterexamples: outcome.counterexamples.len(),
            hard_violations: outcome.counterexamples.iter().filter(|c| c.hard).count(),
            buffer_len: buffer.len(),
            epsilon: outcome.epsilon,
            delta: outcome.delta,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "iteration {iteration}: tau={} status={:?} counterexamples={} (hard {}) L_pi={:.4} L_V={:.4} Delta={:.5} buffer={}",
            report.tau,
            report.status,
            report.counterexamples,
            report.hard_violations,
            lips.l_pi,
            lips.l_v,
            lips.delta_theta,
            buffer.len()
        );
        let checkpoint = Checkpoint {
            iteration,
            policy: slot.network().cloned(),
            v: v.clone(),
            buffer: buffer.clone(),
        };
        observer(&report, &checkpoint);
        reports.push(report);

        if outcome.is_certified() {
            let cert = Certificate::assemble(
                sys.id(),
                slot.certified(),
                v.clone(),
                m,
                &outcome,
                lips,
                cfg.noise_config(sys),
                cfg.local_refinement,
                hash,
            )?;
            return Ok(SynthesisOutcome {
                certificate: Some(cert),
                stop: None,
                reports,
                policy: slot.certified(),
                v,
                buffer,
                final_tau: grid.tau(),
                last_outcome: Some(outcome),
            });
        }

        let centers: Vec<Vec<S>> = outcome.counterexamples.iter().map(|c| c.center.clone()).collect();
        buffer = update_buffer(&buffer, &centers, &v, m, &grid)?;
        let mut candidates = seeds.clone();
        candidates.extend(buffer.points().iter().map(|p| p.x.clone()));
        learner.update_low_set(&v, &candidates, m)?;
        delta_estimate = delta_theta;
        let hard = outcome.has_hard_violation();
        last_outcome = Some(outcome);
        grid = match grid.refine(iteration, hard, budget) {
            Ok(g) => g,
            Err(Error::Budget { required, .. }) => {
                warn!("refinement skipped: {required} cells exceed the budget");
                grid
            }
            Err(e) => return Err(e),
        };
        buffer.reseed_if_empty(seed_points(&grid, cfg.seed_points_per_dim), &grid);
    }
    if stop == Some(StopReason::Timeout) {
        info!("timeout after {:.1} s; status unknown", start.elapsed().as_secs_f64());
    }
    Ok(SynthesisOutcome {
        certificate: None,
        stop,
        reports,
        policy: slot.certified(),
        v,
        buffer,
        final_tau: grid.tau(),
        last_outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::IntervalBox;
    use crate::policy::LinearPolicy;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    fn small_net(seed: u64, out: Activation) -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::random(&[2, 8, 8, 1], Activation::Relu, out, &mut rng)
    }

    fn const_v(c: f64) -> Mlp<f64> {
        // softplus(b) = c
        let b = (c.exp() - 1.0).ln();
        Mlp::constant(&[2, 4, 1], Activation::Relu, Activation::Softplus, b)
    }

    fn zero_policy() -> LinearPolicy<f64> {
        LinearPolicy::new(Array2::zeros((1, 2)), Array1::zeros(1), Some(0.0)).unwrap()
    }

    #[test]
    fn defaults_match_table() {
        let c = TrainConfig::default();
        assert_eq!(
            (
                c.lr,
                c.lambda,
                c.alpha,
                c.rho_theta,
                c.rho_nu,
                c.rho_prime,
                c.delta_train
            ),
            (0.0005, 0.001, 10.0, 4.0, 8.0, 0.01, 0.1)
        );
        assert_eq!(
            (c.n_cond2, c.n_cond3, c.n_3, c.n_4, c.eps_train),
            (16, 256, 256, 512, 0.1)
        );
        assert_eq!((c.freeze_policy_iters, c.epochs_per_iter, c.batch_size), (3, 50, 256));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"N_cond2\":16"));
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"lr": 0.01}"#).unwrap();
        assert_eq!(partial.lr, 0.01);
        assert_eq!(partial.alpha, 10.0);
    }

    #[test]
    fn cond2_constant_v_gives_margin() {
        let sys = SystemModel::<f64>::lds2d();
        let v = const_v(3.0);
        let xs = array![[0.1, 0.2], [-0.5, 0.3], [0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = loss_cond2(&zero_policy(), false, &v, &sys, xs.view(), 0.1, 16, &mut rng).unwrap();
        assert_relative_eq!(t.value, 0.1, epsilon = 1e-12);
        assert!(t.grad_pi.is_none());
    }

    #[test]
    fn cond2_inactive_when_decreasing() {
        // V = softplus(x1·w) grows with x1; the system pushes x1 down hard for x1 > 0 only if
        // the policy can. Use a large margin of −10 instead to switch every hinge off.
        let sys = SystemModel::<f64>::lds2d();
        let v = small_net(3, Activation::Softplus);
        let xs = array![[0.1, 0.2], [-0.5, 0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = loss_cond2(&zero_policy(), false, &v, &sys, xs.view(), -10.0, 4, &mut rng).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad_v.is_zero());
    }

    fn perturbed(net: &Mlp<f64>, k: usize, i: usize, j: usize, bias: bool, h: f64) -> Mlp<f64> {
        let mut n = net.clone();
        let layer = &mut n.layers_mut()[k];
        if bias {
            layer.bias_mut()[i] += h;
        } else {
            layer.weights_mut()[(i, j)] += h;
        }
        n
    }

    fn check_grad(analytic: &Gradients<f64>, net: &Mlp<f64>, f: impl Fn(&Mlp<f64>) -> f64) {
        let h = 1e-6;
        let mut checked = 0;
        for (k, layer) in net.layers().iter().enumerate() {
            for i in 0..layer.out_dim() {
                for j in 0..=layer.in_dim() {
                    let bias = j == layer.in_dim();
                    let num =
                        (f(&perturbed(net, k, i, j, bias, h)) - f(&perturbed(net, k, i, j, bias, -h))) / (2.0 * h);
                    let an = if bias {
                        analytic.layers[k].1[i]
                    } else {
                        analytic.layers[k].0[(i, j)]
                    };
                    let scale = num.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (num - an).abs() / scale < 1e-3 || (num - an).abs() < 1e-7,
                        "k={k} i={i} j={j}: {num} vs {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn cond2_gradients_match_finite_differences() {
        let sys = SystemModel::<f64>::lds2d();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi = Mlp::random(&[2, 6, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let v = small_net(4, Activation::Softplus);
        let xs = array![[0.1, 0.2], [-0.5, 0.3], [0.3, -0.6], [0.6, 0.65]];
        let n = 3;
        let noise = Array2::from_shape_fn((4 * n, 2), |_| rng.gen_range(-1.0..1.0));
        let margin = 0.5;
        let t = loss_cond2_with_noise(&pi, true, &v, &sys, xs.view(), noise.view(), n, margin).unwrap();
        assert!(t.value > 0.0);
        check_grad(&t.grad_v, &v, |vv| {
            loss_cond2_with_noise(&pi, false, vv, &sys, xs.view(), noise.view(), n, margin)
                .unwrap()
                .value
        });
        check_grad(t.grad_pi.as_ref().unwrap(), &pi, |pp| {
            loss_cond2_with_noise(pp, false, &v, &sys, xs.view(), noise.view(), n, margin)
                .unwrap()
                .value
        });
    }

    #[test]
    fn cond3_examples() {
        let pts = array![[0.65, 0.5], [-0.65, -0.5]];
        let thr = 1.0 + 2.0 * 0.1 + 0.1;
        assert_relative_eq!(
            loss_cond3_at(&const_v(1e-9), pts.view(), thr).unwrap().value,
            thr,
            epsilon = 1e-8
        );
        assert_eq!(loss_cond3_at(&const_v(thr + 1.0), pts.view(), thr).unwrap().value, 0.0);
        assert_relative_eq!(
            loss_cond3_at(&const_v(1.0), pts.view(), thr).unwrap().value,
            0.3,
            epsilon = 1e-12
        );
        let v = small_net(5, Activation::Softplus);
        let t = loss_cond3_at(&v, pts.view(), 10.0).unwrap();
        check_grad(&t.grad_v, &v, |vv| loss_cond3_at(vv, pts.view(), 10.0).unwrap().value);
    }

    #[test]
    fn lt_m_examples() {
        let d = array![[0.0, 0.1], [0.1, -0.1]];
        let x = array![[0.5, 0.5], [-0.3, 0.2], [0.0, 0.0]];
        assert_eq!(
            loss_lt_m_at(&const_v(1e-12), d.view(), x.view(), 1.0).unwrap().value,
            0.0
        );
        assert_relative_eq!(
            loss_lt_m_at(&const_v(2.0), d.view(), x.view(), 1.0).unwrap().value,
            1.0,
            epsilon = 1e-12
        );
        let v = small_net(6, Activation::Softplus);
        let t = loss_lt_m_at(&v, d.view(), x.view(), 0.0).unwrap();
        assert!(t.value > 0.0);
        check_grad(&t.grad_v, &v, |vv| {
            loss_lt_m_at(vv, d.view(), x.view(), 0.0).unwrap().value
        });
    }

    fn scaled_net(layers: &[(usize, usize, f64)]) -> Mlp<f64> {
        // Each layer has a single nonzero column whose absolute sum is the given norm.
        let ls = layers
            .iter()
            .enumerate()
            .map(|(k, &(i, o, norm))| {
                let mut w = Array2::zeros((o, i));
                w[(0, 0)] = norm;
                let act = if k + 1 == layers.len() {
                    Activation::Softplus
                } else {
                    Activation::Relu
                };
                crate::nn::Layer::new(w, Array1::zeros(o), act).unwrap()
            })
            .collect();
        Mlp::new(ls).unwrap()
    }

    #[test]
    fn lipschitz_examples() {
        let cfg = TrainConfig::default();
        let pi = scaled_net(&[(2, 3, 2.0), (3, 1, 1.0)]);
        let v = scaled_net(&[(2, 3, 5.0), (3, 1, 1.0)]);
        assert_eq!(loss_lipschitz(Some(&pi), &v, &cfg).unwrap().value, 0.0);
        let v10 = scaled_net(&[(2, 3, 10.0), (3, 1, 1.0)]);
        assert_relative_eq!(loss_lipschitz(None, &v10, &cfg).unwrap().value, 0.002, epsilon = 1e-15);
        let tiny = scaled_net(&[(2, 3, 0.001), (3, 1, 1.0)]);
        let t = loss_lipschitz(None, &tiny, &cfg).unwrap();
        assert_relative_eq!(t.value, 10.0 * (0.01 - 0.001), epsilon = 1e-12);
        // The term pushes L(V) up: the gradient on the active weight is negative.
        assert!(t.grad_v.layers[0].0[(0, 0)] < 0.0);
    }

    #[test]
    fn buffer_update_set_operation() {
        let grid = Grid::build(IntervalBox::from_pairs(&[(-1.0, 1.0)]), 0.125, 1000).unwrap();
        let v = Mlp::<f64>::new(vec![crate::nn::Layer::new(
            array![[1.0]],
            array![0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let b = CounterexampleBuffer::from_seed(vec![vec![-0.9], vec![-0.1], vec![0.6], vec![0.9]], &grid);
        let ce = vec![vec![0.875], vec![0.875], vec![0.125]];
        let out = update_buffer(&b, &ce, &v, 0.5, &grid).unwrap();
        let xs: Vec<f64> = out.points().iter().map(|p| p.x[0]).collect();
        // 0.9 and 0.875 share a cell: the retained point wins.
        assert_eq!(xs, vec![0.125, 0.6, 0.9]);
        assert_eq!(out.count(Provenance::Verifier), 1);
        assert_eq!(
            update_buffer(&out, &ce, &v, 0.5, &grid).unwrap(),
            update_buffer(&out, &ce, &v, 0.5, &grid).unwrap()
        );
        let twice = update_buffer(&update_buffer(&b, &ce, &v, 0.5, &grid).unwrap(), &ce, &v, 0.5, &grid).unwrap();
        assert_eq!(twice, out);
    }

    #[test]
    fn buffer_empties_and_reseeds() {
        let grid = Grid::build(IntervalBox::from_pairs(&[(-1.0, 1.0), (-1.0, 1.0)]), 0.25, 1000).unwrap();
        let b = CounterexampleBuffer::from_seed(vec![vec![0.1, 0.1], vec![-0.5, 0.5]], &grid);
        let mut out = update_buffer(&b, &[], &const_v(0.5), 1.0, &grid).unwrap();
        assert!(out.is_empty());
        assert!(out.reseed_if_empty(seed_points(&grid, 4), &grid));
        assert_eq!(out.len(), 16);
        let keep = update_buffer(&b, &[vec![0.3, 0.3]], &const_v(2.0), 1.0, &grid).unwrap();
        assert_eq!(keep.len(), 3);
    }

    #[test]
    fn frozen_policy_is_bit_identical() {
        let sys = SystemModel::<f64>::lds2d();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig {
            epochs_per_iter: 2,
            batch_size: 16,
            n_cond2: 4,
            n_cond3: 16,
            n_3: 8,
            n_4: 16,
            ..TrainConfig::default()
        };
        let mut pi = Mlp::random(&[2, 8, 1], Activation::Relu, Activation::Identity, &mut rng);
        let mut v = small_net(7, Activation::Softplus);
        let grid = Grid::build(sys.state_space().clone(), 0.1, 10_000).unwrap();
        let buffer = CounterexampleBuffer::from_seed(seed_points(&grid, 6), &grid);
        let consts = TrainConstants {
            m: 1.0,
            l_f: 1.0,
            delta_theta: 0.02,
            tau: 0.1,
            l_v: 4.0,
            l_pi: 3.0,
        };
        let mut learner = Learner::new(cfg.clone(), Some(&pi), &v).unwrap();
        let before = pi.clone();
        let v_before = v.clone();
        let r = learner
            .train_iteration(PolicyArg::Net(&mut pi), &mut v, &sys, &buffer, &consts, 0)
            .unwrap();
        assert!(!r.policy_trained);
        assert_eq!(pi, before);
        assert_ne!(v, v_before);

        let xs = buffer.to_array();
        let (_, g_pi, _) = total_loss(
            &pi,
            false,
            &v,
            &sys,
            xs.view(),
            &consts,
            &cfg,
            &LowSet::Target,
            &mut rng,
        )
        .unwrap();
        assert!(g_pi.is_none());
        let r = learner
            .train_iteration(PolicyArg::Net(&mut pi), &mut v, &sys, &buffer, &consts, 3)
            .unwrap();
        assert!(r.policy_trained);
        assert_ne!(pi, before);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let sys = SystemModel::<f64>::lds2d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = Mlp::random(&[2, 8, 1], Activation::Relu, Activation::Identity, &mut rng);
        let v = small_net(8, Activation::Softplus);
        let xs = array![[0.1, 0.2], [-0.5, 0.3]];
        let consts = TrainConstants {
            m: 1.0,
            l_f: 1.0,
            delta_theta: 0.02,
            tau: 0.01,
            l_v: 4.0,
            l_pi: 3.0,
        };
        let cfg = TrainConfig::default();
        let (b, _, _) = total_loss(&pi, true, &v, &sys, xs.view(), &consts, &cfg, &LowSet::Target, &mut rng).unwrap();
        assert_eq!(b.total, b.cond2 + b.cond3 + b.lt_m + b.lipschitz);
        for t in [b.cond2, b.cond3, b.lt_m, b.lipschitz] {
            assert!(t >= 0.0);
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let sys = SystemModel::<f64>::lds2d();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = Mlp::random(&[2, 6, 1], Activation::Relu, Activation::Identity, &mut rng);
        let v = small_net(6, Activation::Softplus);
        let xs = array![[0.1, 0.2], [-0.5, 0.3], [0.6, -0.6]];
        let consts = TrainConstants {
            m: 1.0,
            l_f: 1.0,
            delta_theta: 0.5,
            tau: 0.05,
            l_v: 4.0,
            l_pi: 3.0,
        };
        let cfg = TrainConfig {
            use_lprime_cond2: true,
            n_cond2: 4,
            n_cond3: 16,
            n_3: 8,
            n_4: 8,
            ..TrainConfig::default()
        };
        let eval = |pi: &Mlp<f64>, v: &Mlp<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            total_loss(pi, true, v, &sys, xs.view(), &consts, &cfg, &LowSet::Target, &mut r).unwrap()
        };
        let (b, gp, gv) = eval(&pi, &v);
        assert!(b.cond3 > 0.0 && b.cond2 > 0.0);
        let gp = gp.unwrap();
        let h = 1e-6;
        for (layer, i, j) in [(0, 0, 0), (0, 3, 1), (1, 0, 2)] {
            let mut vp = v.clone();
            vp.layers_mut()[layer].weights_mut()[(i, j)] += h;
            let mut vm = v.clone();
            vm.layers_mut()[layer].weights_mut()[(i, j)] -= h;
            let fd = (eval(&pi, &vp).0.total - eval(&pi, &vm).0.total) / (2.0 * h);
            assert_relative_eq!(gv.layers[layer].0[(i, j)], fd, epsilon = 1e-6, max_relative = 1e-4);
            let pi_idx = (i.min(pi.layers()[layer].out_dim() - 1), j);
            let mut pp = pi.clone();
            pp.layers_mut()[layer].weights_mut()[pi_idx] += h;
            let mut pm = pi.clone();
            pm.layers_mut()[layer].weights_mut()[pi_idx] -= h;
            let fd = (eval(&pp, &v).0.total - eval(&pm, &v).0.total) / (2.0 * h);
            let a = gp.layers[layer].0[pi_idx];
            assert_relative_eq!(a, fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }

    #[test]
    fn missing_lipschitz_constant_is_rejected() {
        let sys = SystemModel::<f64>::lds2d();
        let p = LinearPolicy::new(Array2::zeros((1, 2)), Array1::zeros(1), None).unwrap();
        let cfg = SynthesisConfig {
            tau: 0.1,
            ..SynthesisConfig::default()
        };
        let err = verify_fixed_policy(
            &p,
            CertifiedPolicy::External {
                name: "zero".into(),
                l_pi: 0.0,
            },
            &sys,
            &cfg,
            None,
            &mut |_, _| {},
        );
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad = SynthesisConfig {
            timeout_secs: 0.0,
            ..SynthesisConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthesisConfig {
            tau: -1.0,
            ..SynthesisConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
