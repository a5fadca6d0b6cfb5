//! Certificates, escape probability, stabilization-time bounds, simulation and re-checking.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::{Grid, DEFAULT_CELL_BUDGET};
use crate::lipschitz::{max_step_size, network_lipschitz, LipschitzReport};
use crate::nn::Mlp;
use crate::noise::{BoundMode, NoisePartition, NoiseSpec};
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::verifier::{sweep_values, verify, VerifyConfig, VerifyOutcome};
use crate::{Error, Result};

/// Slack allowed when comparing recomputed margins with stored ones.
pub const RECHECK_TOLERANCE: f64 = 1e-12;

/// The certified policy: a network, or an external map known only through its constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
pub enum CertifiedPolicy<S: Scalar> {
    Network {
        net: Mlp<S>,
    },
    External {
        name: String,
        #[serde(rename = "L_pi")]
        l_pi: S,
    },
}

impl<S: Scalar> CertifiedPolicy<S> {
    pub fn network(&self) -> Option<&Mlp<S>> {
        match self {
            CertifiedPolicy::Network { net } => Some(net),
            CertifiedPolicy::External { .. } => None,
        }
    }
}

/// How the noise space was handled during verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub spec: NoiseSpec,
    /// Partition used for the expectation bound.
    pub cells_per_dim: usize,
    pub mode: BoundMode,
    /// Partition used when bounding the step size.
    pub step_cells_per_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Certificate<S: Scalar> {
    pub env: String,
    pub policy: CertifiedPolicy<S>,
    #[serde(rename = "V")]
    pub v: Mlp<S>,
    #[serde(rename = "M")]
    pub m: S,
    pub tau: S,
    #[serde(flatten)]
    pub lipschitz: LipschitzReport<S>,
    pub epsilon: S,
    pub delta: S,
    pub p: S,
    #[serde(rename = "Gamma")]
    pub gamma: S,
    pub noise: NoiseConfig,
    pub local_refinement: bool,
    pub config_hash: String,
    pub toolkit_version: String,
}

/// `p = (M + L_V·Δ)/(M + L_V·Δ + δ)`.
pub fn escape_probability<S: Scalar>(m: S, l_v: S, delta_theta: S, delta: S) -> Result<S> {
    if !(delta > S::zero()) || !delta.is_finite() {
        return Err(Error::InvalidConfig(format!("delta must be positive, got {delta}")));
    }
    if !(m > S::zero()) || l_v < S::zero() || delta_theta < S::zero() {
        return Err(Error::InvalidConfig("M must be positive and L_V, Δ nonnegative".into()));
    }
    let a = m + l_v * delta_theta;
    Ok(a / (a + delta))
}

/// `V(x₀)/ε + (M + L_V·Δ)(Γ + L_V·Δ)/(δ·ε)`.
#[allow(clippy::too_many_arguments)]
pub fn expected_out_formula<S: Scalar>(v_x0: S, epsilon: S, m: S, l_v: S, delta_theta: S, delta: S, gamma: S) -> S {
    let ld = l_v * delta_theta;
    v_x0 / epsilon + (m + ld) * (gamma + ld) / (delta * epsilon)
}

/// Sound upper bound on `sup V` over the stabilizing set.
pub fn gamma_sup<S: Scalar>(v: &Mlp<S>, sys: &SystemModel<S>, grid: &Grid<S>) -> Result<S> {
    Ok(sweep_values(v, sys, grid, S::infinity())?.gamma)
}

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl<S: Scalar> Certificate<S> {
    /// Builds a certificate from a certified outcome.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        env: &str,
        policy: CertifiedPolicy<S>,
        v: Mlp<S>,
        m: S,
        outcome: &VerifyOutcome<S>,
        lipschitz: LipschitzReport<S>,
        noise: NoiseConfig,
        local_refinement: bool,
        config_hash: String,
    ) -> Result<Self> {
        if !outcome.is_certified() {
            return Err(Error::Contract(format!(
                "outcome is {:?}, not certified",
                outcome.status
            )));
        }
        let epsilon = outcome
            .epsilon
            .ok_or_else(|| Error::Contract("certified outcome without ε".into()))?;
        let delta = outcome
            .delta
            .ok_or_else(|| Error::Contract("certified outcome without δ".into()))?;
        if !(epsilon > S::zero()) || !(delta > S::zero()) {
            return Err(Error::Contract(format!("nonpositive margins ε={epsilon}, δ={delta}")));
        }
        let p = escape_probability(m, lipschitz.l_v, lipschitz.delta_theta, delta)?;
        Ok(Self {
            env: env.to_string(),
            policy,
            v,
            m,
            tau: outcome.tau,
            lipschitz,
            epsilon,
            delta,
            p,
            gamma: outcome.gamma,
            noise,
            local_refinement,
            config_hash,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Bound on the expected number of steps spent outside the stabilizing set from `x0`.
    pub fn expected_out_bound(&self, x0: &[S]) -> Result<S> {
        let l = &self.lipschitz;
        Ok(expected_out_formula(
            self.v.eval_scalar(x0)?,
            self.epsilon,
            self.m,
            l.l_v,
            l.delta_theta,
            self.delta,
            self.gamma,
        ))
    }

    /// Bound on `P[Out ≥ t]` from `x0`.
    pub fn tail_out_bound(&self, x0: &[S], t: S) -> Result<S> {
        if !(t >= S::one()) {
            return Err(Error::InvalidConfig(format!("t must be at least 1, got {t}")));
        }
        Ok((self.expected_out_bound(x0)? / t).min(S::one()))
    }

    /// Writes `x1,…,V,expected_out_bound` on a uniform lattice with `resolution` points per axis.
    pub fn contour_export<W: Write>(&self, sys: &SystemModel<S>, resolution: usize, mut out: W) -> Result<()> {
        if resolution < 2 {
            return Err(Error::InvalidConfig("resolution must be at least 2".into()));
        }
        let n = sys.state_dim();
        let names: Vec<String> = (1..=n).map(|d| format!("x{d}")).collect();
        writeln!(out, "{},V,expected_out_bound", names.join(","))?;
        let total = resolution.pow(n as u32);
        let bounds = sys.state_space();
        let mut x = vec![S::zero(); n];
        for idx in 0..total {
            let mut rem = idx;
            for d in (0..n).rev() {
                let k = rem % resolution;
                rem /= resolution;
                let iv = bounds[d];
                x[d] = iv.lo + iv.width() * S::lit(k as f64 / (resolution - 1) as f64);
            }
            let v = self.v.eval_scalar(&x)?;
            let b = self.expected_out_bound(&x)?;
            let cols: Vec<String> = x.iter().map(|c| format!("{:.15e}", c.as_f64())).collect();
            writeln!(out, "{},{:.15e},{:.15e}", cols.join(","), v.as_f64(), b.as_f64())?;
        }
        Ok(())
    }
}

/// Outcome of [`recheck`].
#[derive(Debug, Clone)]
pub struct RecheckReport<S: Scalar> {
    pub ok: bool,
    pub reasons: Vec<String>,
    pub lipschitz: LipschitzReport<S>,
    pub outcome: VerifyOutcome<S>,
}

/// Recomputes every constant from the serialized networks and re-runs verification.
pub fn recheck<S: Scalar>(cert: &Certificate<S>, sys: &SystemModel<S>) -> Result<RecheckReport<S>> {
    match &cert.policy {
        CertifiedPolicy::Network { net } => recheck_with_policy(cert, sys, net),
        CertifiedPolicy::External { name, .. } => Err(Error::Unsupported(format!(
            "external policy `{name}` must be supplied to recheck_with_policy"
        ))),
    }
}

/// [`recheck`] for a certificate whose policy is supplied by the caller.
pub fn recheck_with_policy<S: Scalar>(
    cert: &Certificate<S>,
    sys: &SystemModel<S>,
    policy: &dyn Policy<S>,
) -> Result<RecheckReport<S>> {
    if cert.env != sys.id() {
        return Err(Error::EnvMismatch {
            expected: cert.env.clone(),
            got: sys.id().to_string(),
        });
    }
    if &cert.noise.spec != sys.noise() {
        return Err(Error::InvalidConfig(
            "certificate noise law differs from the system's".into(),
        ));
    }
    let tol = S::lit(RECHECK_TOLERANCE);
    let mut reasons = Vec::new();
    let l_pi = match &cert.policy {
        CertifiedPolicy::Network { net } => network_lipschitz(net)?,
        CertifiedPolicy::External { l_pi, .. } => *l_pi,
    };
    let l_v = network_lipschitz(&cert.v)?;
    let grid = Grid::build(sys.state_space().clone(), cert.tau, DEFAULT_CELL_BUDGET)?;
    let step_part = NoisePartition::new(sys.noise(), cert.noise.step_cells_per_dim)?;
    let delta_theta = max_step_size(sys, policy, &grid, &step_part)?;
    let lips = LipschitzReport::new(l_pi, l_v, sys.lipschitz(), delta_theta)?;
    let stored = &cert.lipschitz;
    for (name, ours, theirs) in [
        ("L_pi", lips.l_pi, stored.l_pi),
        ("L_V", lips.l_v, stored.l_v),
        ("L_f", lips.l_f, stored.l_f),
        ("K", lips.k, stored.k),
        ("Delta_theta", lips.delta_theta, stored.delta_theta),
    ] {
        if ours > theirs + tol * (S::one() + theirs.abs()) {
            reasons.push(format!("{name}: recomputed {ours} exceeds stored {theirs}"));
        }
    }
    let part = NoisePartition::new(sys.noise(), cert.noise.cells_per_dim)?;
    let cfg = VerifyConfig {
        m: cert.m.as_f64(),
        bound_mode: cert.noise.mode,
        local_refinement: cert.local_refinement,
        ..VerifyConfig::default()
    };
    let outcome = verify(&cert.v, policy, sys, &grid, &lips, &part, &cfg)?;
    if !outcome.is_certified() {
        reasons.push(format!("verification status is {:?}", outcome.status));
    } else {
        let eps = outcome.epsilon.expect("certified");
        let delta = outcome.delta.expect("certified");
        if eps < cert.epsilon - tol {
            reasons.push(format!("epsilon: recomputed {eps} below stored {}", cert.epsilon));
        }
        if delta < cert.delta - tol {
            reasons.push(format!("delta: recomputed {delta} below stored {}", cert.delta));
        }
        if outcome.gamma > cert.gamma + tol {
            reasons.push(format!(
                "Gamma: recomputed {} above stored {}",
                outcome.gamma, cert.gamma
            ));
        }
        let p = escape_probability(cert.m, lips.l_v, lips.delta_theta, delta)?;
        if p > cert.p + tol {
            reasons.push(format!("p: recomputed {p} above stored {}", cert.p));
        }
    }
    let claimed_p = escape_probability(cert.m, stored.l_v, stored.delta_theta, cert.delta);
    if claimed_p.map_or(true, |p| (p - cert.p).abs() > tol) {
        reasons.push("stored p is inconsistent with the stored constants".into());
    }
    Ok(RecheckReport {
        ok: reasons.is_empty(),
        reasons,
        lipschitz: lips,
        outcome,
    })
}

/// Empirical stabilization statistics from independent rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Steps spent outside the stabilizing set among `x₀, …, x_H`, per trajectory.
    pub out_counts: Vec<usize>,
    /// Trajectories whose last 10% of states all lie in the stabilizing set.
    pub tail_stabilized: usize,
    /// Trajectories outside the stabilizing set at the horizon; their true count is larger.
    pub outside_at_horizon: usize,
    pub horizon: usize,
}

impl SimulationReport {
    pub fn mean_out(&self) -> f64 {
        if self.out_counts.is_empty() {
            return 0.0;
        }
        self.out_counts.iter().sum::<usize>() as f64 / self.out_counts.len() as f64
    }

    pub fn tail_fraction(&self) -> f64 {
        if self.out_counts.is_empty() {
            return 1.0;
        }
        self.tail_stabilized as f64 / self.out_counts.len() as f64
    }
}

/// Rolls out `n_traj` trajectories of length `horizon` from `x0`.
///
/// Trajectory `i` draws its noise from stream `i` of a generator seeded with `seed`.
pub fn simulate<S: Scalar>(
    policy: &dyn Policy<S>,
    sys: &SystemModel<S>,
    x0: &[S],
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<SimulationReport> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if x0.len() != sys.state_dim() {
        return Err(Error::dims("simulate", sys.state_dim(), x0.len()));
    }
    let tail_len = horizon.div_ceil(10);
    let runs: Result<Vec<(usize, bool, bool)>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut x = x0.to_vec();
            let mut next = vec![S::zero(); x.len()];
            let mut w = vec![S::zero(); sys.noise_dim()];
            let mut out = usize::from(!sys.in_stabilizing_set(&x));
            let mut tail_ok = true;
            for t in 1..=horizon {
                let u = policy.act(&x)?;
                sys.noise().sample_into(&mut rng, &mut w);
                sys.step_into(&x, &u, &w, &mut next);
                std::mem::swap(&mut x, &mut next);
                let inside = sys.in_stabilizing_set(&x);
                out += usize::from(!inside);
                if t > horizon - tail_len && !inside {
                    tail_ok = false;
                }
            }
            Ok((out, tail_ok, !sys.in_stabilizing_set(&x)))
        })
        .collect();
    let runs = runs?;
    Ok(SimulationReport {
        out_counts: runs.iter().map(|r| r.0).collect(),
        tail_stabilized: runs.iter().filter(|r| r.1).count(),
        outside_at_horizon: runs.iter().filter(|r| r.2).count(),
        horizon,
    })
}

/// Writes `x1,…,V_lo,V_hi,sublevel` per grid cell; `sublevel` marks cells with `V̄ ≤ M`.
pub fn export_sublevel_mask<S: Scalar, W: Write>(v: &Mlp<S>, grid: &Grid<S>, m: S, mut out: W) -> Result<()> {
    use crate::interval::{scalar_bounds_batch, BoxBatch};
    let n = grid.dim();
    let names: Vec<String> = (1..=n).map(|d| format!("x{d}")).collect();
    writeln!(out, "{},V_lo,V_hi,sublevel", names.join(","))?;
    const CHUNK: usize = 4096;
    let total = grid.num_cells();
    for start in (0..total).step_by(CHUNK) {
        let end = (start + CHUNK).min(total);
        let boxes: Vec<_> = (start..end).map(|i| grid.cell_box(i)).collect();
        let (lo, hi) = scalar_bounds_batch(v, &BoxBatch::from_boxes(&boxes))?;
        for (r, b) in boxes.iter().enumerate() {
            let cols: Vec<String> = b.center().iter().map(|c| format!("{:.12e}", c.as_f64())).collect();
            writeln!(
                out,
                "{},{:.12e},{:.12e},{}",
                cols.join(","),
                lo[r].as_f64(),
                hi[r].as_f64(),
                u8::from(hi[r] <= m)
            )?;
        }
    }
    Ok(())
}
