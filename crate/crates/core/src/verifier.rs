//! Grid verification of the supermartingale conditions.
//!
//! Given `V`, a policy and a grid, the verifier
//! 1. finds every cell on which `V` may reach `M` (interval upper bound `≥ M`),
//! 2. checks `E[V(f(x̃, π(x̃), ω))] < V(x̃) − τ·K` at the center of each such cell,
//!    retrying soft violations once on cells bisected to mesh `τ/2`,
//! 3. checks that the interval lower bound of `V` exceeds `M + L_V·Δ` on every cell meeting
//!    `𝒳 \ 𝒳_s`,
//!
//! and on success reports the margins `ε` and `δ`.
//!
//! Cells are processed in fixed-size chunks in index order; every reduction is a min, max or
//! ordered concatenation, so results do not depend on the number of worker threads.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{CellRole, CellSet, Grid};
use crate::interval::{scalar_bounds_batch, BoxBatch, IntervalBox};
use crate::lipschitz::LipschitzReport;
use crate::nn::Mlp;
use crate::noise::{expected_upper_bound_batch, BoundMode, NoisePartition};
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::{Error, Result};

/// Cells per chunk in the value sweep.
const SWEEP_CHUNK: usize = 2048;
/// Base cells per chunk in the decrease check.
const DECREASE_CHUNK: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Level `M` of the supermartingale.
    pub m: f64,
    pub bound_mode: BoundMode,
    /// Retry soft violations on bisected cells.
    pub local_refinement: bool,
    /// Maximum number of cell evaluations per call.
    pub cell_budget: u128,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            m: 1.0,
            bound_mode: BoundMode::MassWeighted,
            local_refinement: true,
            cell_budget: 100_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    Certified,
    Counterexamples,
    Condition3Failed,
    BudgetExceeded,
}

/// A cell whose center failed the decrease check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar", deserialize = "S: Scalar"))]
pub struct Counterexample<S: Scalar> {
    pub index: usize,
    /// The checked point with the smallest gap among the cell's leaves.
    pub center: Vec<S>,
    /// `V(x̃) − mesh·K − bound`; nonpositive for a violation.
    pub gap: S,
    /// Even `bound < V(x̃)` fails.
    pub hard: bool,
}

/// Result of a decrease check over a set of cells.
#[derive(Debug, Clone)]
pub struct DecreaseResult<S: Scalar> {
    pub violations: Vec<Counterexample<S>>,
    /// Smallest gap over cells that passed.
    pub min_passing_gap: Option<S>,
    /// Number of leaf centers evaluated.
    pub checked: usize,
}

/// Result of the condition-3 check.
#[derive(Debug, Clone)]
pub struct Condition3Result<S: Scalar> {
    pub ok: bool,
    /// `min (V̲(cell) − M − L_V·Δ)` over the checked cells; `None` when there are none.
    pub delta: Option<S>,
    pub failing: Vec<usize>,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar", deserialize = "S: Scalar"))]
pub struct VerifyOutcome<S: Scalar> {
    pub status: VerifyStatus,
    pub tau: S,
    pub epsilon: Option<S>,
    pub delta: Option<S>,
    /// Upper bound on `sup V` over the stabilizing set.
    pub gamma: S,
    pub counterexamples: Vec<Counterexample<S>>,
    pub condition3_failing: Vec<usize>,
    pub ge_m_cells: usize,
    pub locally_refined: usize,
    pub cells_evaluated: u128,
    pub unprocessed: u128,
}

impl<S: Scalar> VerifyOutcome<S> {
    pub fn is_certified(&self) -> bool {
        self.status == VerifyStatus::Certified
    }

    pub fn has_hard_violation(&self) -> bool {
        self.counterexamples.iter().any(|c| c.hard)
    }

    pub fn counterexample_set(&self) -> CellSet {
        CellSet::new(
            CellRole::Counterexample,
            self.counterexamples.iter().map(|c| c.index).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One pass over every cell: which cells may reach `M`, and `sup V` over the stabilizing set.
#[derive(Debug, Clone)]
pub struct ValueSweep<S: Scalar> {
    pub ge_m: CellSet,
    pub gamma: S,
}

fn chunk_boxes<S: Scalar>(grid: &Grid<S>, start: usize, end: usize) -> BoxBatch<S> {
    let n = grid.dim();
    let mut batch = BoxBatch::with_capacity(end - start, n);
    let mut lo = vec![S::zero(); n];
    let mut hi = vec![S::zero(); n];
    for (r, idx) in (start..end).enumerate() {
        grid.corners_into(idx, &mut lo, &mut hi);
        for d in 0..n {
            batch.mid[(r, d)] = (lo[d] + hi[d]) * S::half();
            batch.rad[(r, d)] = (hi[d] - lo[d]) * S::half();
        }
    }
    batch
}

fn inside_excluded<S: Scalar>(sys: &SystemModel<S>, cell: &IntervalBox<S>) -> bool {
    sys.excluded().iter().any(|b| cell.is_subset_of(b))
}

/// Interval sweep of `V` over the grid.
pub fn sweep_values<S: Scalar>(v: &Mlp<S>, sys: &SystemModel<S>, grid: &Grid<S>, m: S) -> Result<ValueSweep<S>> {
    let n = grid.num_cells();
    let parts: Result<Vec<(Vec<usize>, S)>> = (0..n.div_ceil(SWEEP_CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * SWEEP_CHUNK;
            let end = (start + SWEEP_CHUNK).min(n);
            let (_, hi) = scalar_bounds_batch(v, &chunk_boxes(grid, start, end))?;
            let mut ge = Vec::new();
            let mut gamma = S::neg_infinity();
            for (r, &h) in hi.iter().enumerate() {
                if !h.is_finite() {
                    return Err(Error::NonFinite(format!("V bound on cell {}", start + r)));
                }
                if h >= m {
                    ge.push(start + r);
                }
                if h > gamma && !inside_excluded(sys, &grid.cell_box(start + r)) {
                    gamma = h;
                }
            }
            Ok((ge, gamma))
        })
        .collect();
    let mut ge = Vec::new();
    let mut gamma = S::neg_infinity();
    for (g, m) in parts? {
        ge.extend(g);
        gamma = gamma.max(m);
    }
    Ok(ValueSweep {
        ge_m: CellSet::new(CellRole::GeM, ge),
        gamma: gamma.max(S::zero()),
    })
}

/// Cells on which the interval upper bound of `V` reaches `M`.
pub fn collect_ge_m<S: Scalar>(v: &Mlp<S>, sys: &SystemModel<S>, grid: &Grid<S>, m: S) -> Result<CellSet> {
    Ok(sweep_values(v, sys, grid, m)?.ge_m)
}

/// Expected-decrease check at the center of every leaf of every listed cell.
#[allow(clippy::too_many_arguments)]
pub fn check_decrease<S: Scalar>(
    v: &Mlp<S>,
    policy: &dyn Policy<S>,
    sys: &SystemModel<S>,
    grid: &Grid<S>,
    cells: &CellSet,
    k: S,
    part: &NoisePartition<S>,
    mode: BoundMode,
) -> Result<DecreaseResult<S>> {
    let idx = cells.indices();
    let parts: Result<Vec<DecreaseResult<S>>> = idx
        .par_chunks(DECREASE_CHUNK)
        .map(|chunk| decrease_chunk(v, policy, sys, grid, chunk, k, part, mode))
        .collect();
    let mut out = DecreaseResult {
        violations: Vec::new(),
        min_passing_gap: None,
        checked: 0,
    };
    for p in parts? {
        out.violations.extend(p.violations);
        out.min_passing_gap = min_opt(out.min_passing_gap, p.min_passing_gap);
        out.checked += p.checked;
    }
    Ok(out)
}

fn min_opt<S: Scalar>(a: Option<S>, b: Option<S>) -> Option<S> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

#[allow(clippy::too_many_arguments)]
fn decrease_chunk<S: Scalar>(
    v: &Mlp<S>,
    policy: &dyn Policy<S>,
    sys: &SystemModel<S>,
    grid: &Grid<S>,
    chunk: &[usize],
    k: S,
    part: &NoisePartition<S>,
    mode: BoundMode,
) -> Result<DecreaseResult<S>> {
    let n = grid.dim();
    let leaves: Vec<_> = chunk.iter().flat_map(|&i| grid.leaves(i)).collect();
    let mut xs = Array2::zeros((leaves.len(), n));
    for (r, leaf) in leaves.iter().enumerate() {
        for (d, c) in leaf.cell.center().into_iter().enumerate() {
            xs[(r, d)] = c;
        }
    }
    let vals = v.forward_batch(xs.view())?;
    let us = policy.act_batch(xs.view())?;
    let bounds = expected_upper_bound_batch(v, sys, &xs, &us, part, mode)?;
    let mut out = DecreaseResult {
        violations: Vec::new(),
        min_passing_gap: None,
        checked: leaves.len(),
    };
    let mut r = 0;
    while r < leaves.len() {
        let base = leaves[r].base;
        let mut worst: Option<(usize, S)> = None;
        let mut hard = false;
        while r < leaves.len() && leaves[r].base == base {
            let vx = vals[(r, 0)];
            let gap = vx - leaves[r].mesh * k - bounds[r];
            if !gap.is_finite() {
                return Err(Error::NonFinite(format!("decrease gap at cell {base}")));
            }
            hard |= bounds[r] >= vx;
            if worst.is_none_or(|(_, g)| gap < g) {
                worst = Some((r, gap));
            }
            r += 1;
        }
        let (wr, gap) = worst.expect("every cell has a leaf");
        if gap > S::zero() {
            out.min_passing_gap = min_opt(out.min_passing_gap, Some(gap));
        } else {
            out.violations.push(Counterexample {
                index: base,
                center: xs.row(wr).to_vec(),
                gap,
                hard,
            });
        }
    }
    Ok(out)
}

/// `ε` from a clean decrease check.
pub fn extract_epsilon<S: Scalar>(result: &DecreaseResult<S>) -> Result<Option<S>> {
    if !result.violations.is_empty() {
        return Err(Error::Contract(format!(
            "epsilon requested with {} counterexamples present",
            result.violations.len()
        )));
    }
    Ok(result.min_passing_gap)
}

/// Lower bound of `V` against `M + L_V·Δ` on every cell meeting `𝒳 \ 𝒳_s`.
pub fn check_condition3<S: Scalar>(
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    grid: &Grid<S>,
    m: S,
    l_v: S,
    delta_theta: S,
) -> Result<Condition3Result<S>> {
    let cells = grid.cells_intersecting(sys.excluded(), CellRole::ComplementXs);
    let threshold = m + l_v * delta_theta;
    let idx = cells.indices();
    let parts: Result<Vec<(Option<S>, Vec<usize>)>> = idx
        .par_chunks(SWEEP_CHUNK)
        .map(|chunk| {
            let boxes: Vec<_> = chunk.iter().map(|&i| grid.cell_box(i)).collect();
            let (lo, _) = scalar_bounds_batch(v, &BoxBatch::from_boxes(&boxes))?;
            let mut delta = None;
            let mut failing = Vec::new();
            for (&i, &l) in chunk.iter().zip(lo.iter()) {
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("V lower bound on cell {i}")));
                }
                let slack = l - threshold;
                delta = min_opt(delta, Some(slack));
                if slack <= S::zero() {
                    failing.push(i);
                }
            }
            Ok((delta, failing))
        })
        .collect();
    let mut delta = None;
    let mut failing = Vec::new();
    for (d, f) in parts? {
        delta = min_opt(delta, d);
        failing.extend(f);
    }
    Ok(Condition3Result {
        ok: failing.is_empty() && delta.is_some(),
        delta,
        failing,
        checked: idx.len(),
    })
}

/// Full verification of `(π, V)` on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn verify<S: Scalar>(
    v: &Mlp<S>,
    policy: &dyn Policy<S>,
    sys: &SystemModel<S>,
    grid: &Grid<S>,
    lips: &LipschitzReport<S>,
    part: &NoisePartition<S>,
    cfg: &VerifyConfig,
) -> Result<VerifyOutcome<S>> {
    let m = S::lit(cfg.m);
    let sweep = sweep_values(v, sys, grid, m)?;
    let mut evaluated = grid.num_cells() as u128;
    let mut outcome = VerifyOutcome {
        status: VerifyStatus::Certified,
        tau: grid.tau(),
        epsilon: None,
        delta: None,
        gamma: sweep.gamma,
        counterexamples: Vec::new(),
        condition3_failing: Vec::new(),
        ge_m_cells: sweep.ge_m.len(),
        locally_refined: 0,
        cells_evaluated: 0,
        unprocessed: 0,
    };
    let planned = evaluated + sweep.ge_m.len() as u128;
    if planned > cfg.cell_budget {
        outcome.status = VerifyStatus::BudgetExceeded;
        outcome.cells_evaluated = evaluated;
        outcome.unprocessed = sweep.ge_m.len() as u128;
        return Ok(outcome);
    }

    let first = check_decrease(v, policy, sys, grid, &sweep.ge_m, lips.k, part, cfg.bound_mode)?;
    evaluated += first.checked as u128;
    let mut epsilon = first.min_passing_gap;
    let mut violations = Vec::new();
    let soft: Vec<usize> = first.violations.iter().filter(|c| !c.hard).map(|c| c.index).collect();
    if cfg.local_refinement && !soft.is_empty() {
        let children = soft.len() as u128 * (1u128 << grid.dim());
        if evaluated + children > cfg.cell_budget {
            outcome.status = VerifyStatus::BudgetExceeded;
            outcome.cells_evaluated = evaluated;
            outcome.unprocessed = children;
            outcome.counterexamples = first.violations;
            return Ok(outcome);
        }
        let soft = CellSet::new(CellRole::Counterexample, soft);
        let refined = grid.refine_locally(&soft);
        let second = check_decrease(v, policy, sys, &refined, &soft, lips.k, part, cfg.bound_mode)?;
        evaluated += second.checked as u128;
        outcome.locally_refined = soft.len();
        epsilon = min_opt(epsilon, second.min_passing_gap);
        violations.extend(first.violations.into_iter().filter(|c| c.hard));
        violations.extend(second.violations);
        violations.sort_by_key(|c| c.index);
    } else {
        violations = first.violations;
    }
    outcome.cells_evaluated = evaluated;

    if !violations.is_empty() {
        outcome.status = VerifyStatus::Counterexamples;
        outcome.counterexamples = violations;
        return Ok(outcome);
    }

    let c3 = check_condition3(v, sys, grid, m, lips.l_v, lips.delta_theta)?;
    outcome.cells_evaluated += c3.checked as u128;
    outcome.delta = c3.delta;
    if !c3.ok {
        outcome.status = VerifyStatus::Condition3Failed;
        outcome.condition3_failing = c3.failing;
        return Ok(outcome);
    }
    // With no cell reaching M the decrease condition holds vacuously; any positive ε serves.
    outcome.epsilon = Some(epsilon.unwrap_or(S::one()));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DEFAULT_CELL_BUDGET;
    use crate::nn::Activation;
    use crate::policy::LinearPolicy;
    use ndarray::array;

    fn setup() -> (SystemModel<f64>, Grid<f64>, NoisePartition<f64>, LinearPolicy<f64>) {
        let sys = SystemModel::lds2d();
        let grid = Grid::build(sys.state_space().clone(), 0.05, DEFAULT_CELL_BUDGET).unwrap();
        let part = NoisePartition::new(sys.noise(), 4).unwrap();
        let pi = LinearPolicy::new(array![[0.0, 0.0]], array![0.0], Some(0.0)).unwrap();
        (sys, grid, part, pi)
    }

    fn constant_v(c: f64) -> Mlp<f64> {
        Mlp::constant(&[2, 4, 1], Activation::Relu, Activation::Identity, c)
    }

    #[test]
    fn collect_ge_m_constant_nets() {
        let (sys, grid, _, _) = setup();
        assert_eq!(
            collect_ge_m(&constant_v(2.0), &sys, &grid, 1.0).unwrap().len(),
            grid.num_cells()
        );
        assert!(collect_ge_m(&constant_v(0.5), &sys, &grid, 1.0).unwrap().is_empty());
    }

    #[test]
    fn constant_v_violates_decrease_everywhere() {
        let (sys, grid, part, pi) = setup();
        let v = constant_v(2.0);
        let cells = CellSet::new(CellRole::GeM, (0..10).collect());
        let r = check_decrease(&v, &pi, &sys, &grid, &cells, 1.0, &part, BoundMode::MassWeighted).unwrap();
        assert_eq!(r.violations.len(), 10);
        assert!(r.violations.iter().all(|c| c.hard));
        assert!(extract_epsilon(&r).is_err());
        let r0 = check_decrease(&v, &pi, &sys, &grid, &cells, 0.0, &part, BoundMode::MassWeighted).unwrap();
        assert_eq!(r0.violations.len(), 10);
    }

    #[test]
    fn condition3_constant_nets() {
        let (sys, grid, _, _) = setup();
        let r = check_condition3(&constant_v(1.0 + 2.0 * 0.1 + 1.0), &sys, &grid, 1.0, 2.0, 0.1).unwrap();
        assert!(r.ok);
        assert!((r.delta.unwrap() - 1.0).abs() < 1e-12);
        let r = check_condition3(&constant_v(0.0), &sys, &grid, 1.0, 2.0, 0.1).unwrap();
        assert!(!r.ok);
        assert_eq!(r.failing.len(), r.checked);
        assert!(r.checked > 0);
    }

    #[test]
    fn zero_v_fails_condition3_only() {
        let (sys, grid, part, pi) = setup();
        let lips = LipschitzReport::new(0.0, 0.0, 1.0, 0.1).unwrap();
        let out = verify(
            &constant_v(0.0),
            &pi,
            &sys,
            &grid,
            &lips,
            &part,
            &VerifyConfig::default(),
        )
        .unwrap();
        assert_eq!(out.status, VerifyStatus::Condition3Failed);
        assert_eq!(out.ge_m_cells, 0);
        assert!(out.counterexamples.is_empty());
    }

    #[test]
    fn budget_is_enforced() {
        let (sys, grid, part, pi) = setup();
        let lips = LipschitzReport::new(0.0, 0.0, 1.0, 0.1).unwrap();
        let cfg = VerifyConfig {
            cell_budget: 10,
            ..VerifyConfig::default()
        };
        let out = verify(&constant_v(3.0), &pi, &sys, &grid, &lips, &part, &cfg).unwrap();
        assert_eq!(out.status, VerifyStatus::BudgetExceeded);
        assert_eq!(out.unprocessed, grid.num_cells() as u128);
    }

    #[test]
    fn outcome_serializes() {
        let (sys, grid, part, pi) = setup();
        let lips = LipschitzReport::new(0.0, 0.0, 1.0, 0.1).unwrap();
        let out = verify(
            &constant_v(2.0),
            &pi,
            &sys,
            &grid,
            &lips,
            &part,
            &VerifyConfig::default(),
        )
        .unwrap();
        assert_eq!(out.status, VerifyStatus::Counterexamples);
        assert!(out.has_hard_violation());
        let json = out.to_json().unwrap();
        assert!(json.contains("\"status\": \"counterexamples\""));
        let back: VerifyOutcome<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.counterexamples, out.counterexamples);
    }
}
