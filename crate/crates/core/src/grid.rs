//! Rectangular discretization of the state space.
//!
//! A grid with mesh `τ` over an `n`-dimensional box uses per-dimension spacing at most
//! `h = 2τ/n`, so every point of the box lies within L1 distance `τ` of the center of the cell
//! containing it. Cells are addressed by a row-major linear index (last dimension fastest) and
//! are never materialized; boxes and centers are computed on demand.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::interval::{Interval, IntervalBox};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Default ceiling on the number of base cells a grid may have.
pub const DEFAULT_CELL_BUDGET: u128 = 100_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<S: Scalar> {
    bounds: IntervalBox<S>,
    tau: S,
    counts: Vec<usize>,
    spacing: Vec<S>,
    /// Cells subdivided at mesh `τ/2`, keyed by base cell index.
    local: BTreeMap<usize, Vec<IntervalBox<S>>>,
}

/// What a [`CellSet`] was collected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRole {
    GeM,
    ComplementXs,
    Counterexample,
    Other,
}

/// A sorted, duplicate-free list of base cell indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSet {
    pub role: CellRole,
    indices: Vec<usize>,
}

impl CellSet {
    pub fn new(role: CellRole, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { role, indices }
    }

    pub fn empty(role: CellRole) -> Self {
        Self {
            role,
            indices: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }
}

/// A leaf cell: a base cell or one of its local refinement children.
#[derive(Debug, Clone)]
pub struct LeafCell<S: Scalar> {
    pub base: usize,
    pub cell: IntervalBox<S>,
    pub mesh: S,
}

impl<S: Scalar> Grid<S> {
    /// Uniform grid over `bounds` with mesh `tau`.
    pub fn build(bounds: IntervalBox<S>, tau: S, budget: u128) -> Result<Self> {
        if !(tau > S::zero()) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("mesh must be positive, got {tau}")));
        }
        let n = bounds.dim();
        let h = S::two() * tau / S::lit(n as f64);
        let mut counts = Vec::with_capacity(n);
        let mut total: u128 = 1;
        for iv in bounds.iter() {
            let ratio = (iv.width() / h).as_f64();
            // Absorb the rounding error of the division so exact multiples are not bumped up.
            let c = (ratio * (1.0 - 1e-12)).ceil().max(1.0);
            if !c.is_finite() || c > u64::MAX as f64 {
                return Err(Error::Budget {
                    required: u128::MAX,
                    budget,
                    bytes: u128::MAX,
                });
            }
            let c = c as u128;
            total = total.saturating_mul(c);
            counts.push(c as usize);
        }
        if total > budget {
            return Err(Error::Budget {
                required: total,
                budget,
                bytes: total.saturating_mul(2 * n as u128 * std::mem::size_of::<S>() as u128),
            });
        }
        let spacing = bounds
            .iter()
            .zip(&counts)
            .map(|(iv, &c)| iv.width() / S::lit(c as f64))
            .collect();
        Ok(Self {
            bounds,
            tau,
            counts,
            spacing,
            local: BTreeMap::new(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn bounds(&self) -> &IntervalBox<S> {
        &self.bounds
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self) -> &[S] {
        &self.spacing
    }

    pub fn num_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = idx % self.counts[d];
            idx /= self.counts[d];
        }
        out
    }

    pub fn index_of_coords(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.counts).fold(0, |acc, (&c, &n)| acc * n + c)
    }

    #[inline]
    fn edge(&self, d: usize, k: usize) -> S {
        let iv = self.bounds[d];
        if k == 0 {
            iv.lo
        } else if k >= self.counts[d] {
            iv.hi
        } else {
            iv.lo + S::lit(k as f64) * self.spacing[d]
        }
    }

    #[inline]
    fn axis_interval(&self, d: usize, k: usize) -> Interval<S> {
        Interval {
            lo: self.edge(d, k),
            hi: self.edge(d, k + 1),
        }
    }

    pub fn cell_box(&self, idx: usize) -> IntervalBox<S> {
        let coords = self.coords(idx);
        IntervalBox::new(
            coords
                .iter()
                .enumerate()
                .map(|(d, &k)| self.axis_interval(d, k))
                .collect(),
        )
        .expect("grid cells are valid boxes")
    }

    pub fn center(&self, idx: usize) -> Vec<S> {
        self.coords(idx)
            .iter()
            .enumerate()
            .map(|(d, &k)| self.axis_interval(d, k).mid())
            .collect()
    }

    /// Writes the center of cell `idx` into `out` without allocating.
    pub fn center_into(&self, mut idx: usize, out: &mut [S]) {
        for d in (0..self.dim()).rev() {
            let k = idx % self.counts[d];
            idx /= self.counts[d];
            out[d] = self.axis_interval(d, k).mid();
        }
    }

    /// Writes lower and upper corners of cell `idx`.
    pub fn corners_into(&self, mut idx: usize, lo: &mut [S], hi: &mut [S]) {
        for d in (0..self.dim()).rev() {
            let k = idx % self.counts[d];
            idx /= self.counts[d];
            let iv = self.axis_interval(d, k);
            lo[d] = iv.lo;
            hi[d] = iv.hi;
        }
    }

    /// Index of the cell containing `x`; points outside the bounds map to the nearest cell.
    pub fn cell_of(&self, x: &[S]) -> usize {
        let coords: Vec<usize> = x
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let rel = ((v - self.bounds[d].lo) / self.spacing[d]).floor();
                let k = rel.to_f64().unwrap_or(0.0).max(0.0) as usize;
                k.min(self.counts[d] - 1)
            })
            .collect();
        self.index_of_coords(&coords)
    }

    /// Centers of a coarser grid whose spacing is `factor` times this grid's.
    pub fn seed_training_set(&self, factor: usize) -> Vec<Vec<S>> {
        let factor = factor.max(1);
        let counts: Vec<usize> = self.counts.iter().map(|&c| c.div_ceil(factor)).collect();
        let coarse = Grid {
            bounds: self.bounds.clone(),
            tau: self.tau * S::lit(factor as f64),
            spacing: self
                .bounds
                .iter()
                .zip(&counts)
                .map(|(iv, &c)| iv.width() / S::lit(c as f64))
                .collect(),
            counts,
            local: BTreeMap::new(),
        };
        (0..coarse.num_cells()).map(|i| coarse.center(i)).collect()
    }

    /// Range of cell coordinates along `d` whose closed cells meet `[lo, hi]`.
    fn axis_range(&self, d: usize, iv: &Interval<S>) -> Option<(usize, usize)> {
        let b = self.bounds[d];
        if iv.hi < b.lo || iv.lo > b.hi {
            return None;
        }
        let n = self.counts[d];
        let s = self.spacing[d];
        let guess_lo = ((iv.lo - b.lo) / s).floor().to_f64().unwrap_or(0.0).max(0.0) as usize;
        let mut k_lo = guess_lo.saturating_sub(1).min(n - 1);
        while k_lo + 1 < n && self.edge(d, k_lo + 1) < iv.lo {
            k_lo += 1;
        }
        let guess_hi = ((iv.hi - b.lo) / s).floor().to_f64().unwrap_or(0.0).max(0.0) as usize;
        let mut k_hi = (guess_hi + 1).min(n - 1);
        while k_hi > 0 && self.edge(d, k_hi) > iv.hi {
            k_hi -= 1;
        }
        (k_lo <= k_hi).then_some((k_lo, k_hi))
    }

    /// All cells whose closed box meets the closed union of `region`.
    pub fn cells_intersecting(&self, region: &[IntervalBox<S>], role: CellRole) -> CellSet {
        let mut out = Vec::new();
        for rbox in region {
            let ranges: Option<Vec<_>> = (0..self.dim()).map(|d| self.axis_range(d, &rbox[d])).collect();
            let Some(ranges) = ranges else { continue };
            let mut coords: Vec<usize> = ranges.iter().map(|r| r.0).collect();
            'outer: loop {
                out.push(self.index_of_coords(&coords));
                for d in (0..self.dim()).rev() {
                    if coords[d] < ranges[d].1 {
                        coords[d] += 1;
                        continue 'outer;
                    }
                    coords[d] = ranges[d].0;
                }
                break;
            }
        }
        CellSet::new(role, out)
    }

    /// Scheduled global refinement: halve `τ` on iterations 5, 7, 9, … unless the verifier
    /// reported a hard violation.
    pub fn refine(&self, iteration: usize, hard_violation: bool, budget: u128) -> Result<Grid<S>> {
        if refinement_due(iteration, hard_violation) {
            Grid::build(self.bounds.clone(), self.tau * S::half(), budget)
        } else {
            Ok(self.clone())
        }
    }

    /// Subdivides each listed cell into `2ⁿ` children at mesh `τ/2`.
    pub fn refine_locally(&self, cells: &CellSet) -> Grid<S> {
        let mut out = self.clone();
        for &idx in cells.indices() {
            out.local.insert(idx, bisect(&self.cell_box(idx)));
        }
        out
    }

    pub fn local_refinements(&self) -> &BTreeMap<usize, Vec<IntervalBox<S>>> {
        &self.local
    }

    /// Leaf cells of one base cell: its children if refined, itself otherwise.
    pub fn leaves(&self, idx: usize) -> Vec<LeafCell<S>> {
        match self.local.get(&idx) {
            Some(children) => children
                .iter()
                .map(|c| LeafCell {
                    base: idx,
                    cell: c.clone(),
                    mesh: self.tau * S::half(),
                })
                .collect(),
            None => vec![LeafCell {
                base: idx,
                cell: self.cell_box(idx),
                mesh: self.tau,
            }],
        }
    }

    /// Writes `center, value` rows for every cell center, as used for contour plots.
    pub fn export_csv<W: Write>(&self, mut out: W, value: impl Fn(&[S]) -> S) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|d| format!("x{d}")).collect();
        writeln!(out, "{},V", header.join(","))?;
        let mut c = vec![S::zero(); self.dim()];
        for idx in 0..self.num_cells() {
            self.center_into(idx, &mut c);
            let cols: Vec<String> = c.iter().map(|v| format!("{:.12e}", v.as_f64())).collect();
            writeln!(out, "{},{:.12e}", cols.join(","), value(&c).as_f64())?;
        }
        Ok(())
    }
}

/// True on iterations 5, 7, 9, … when no hard violation was seen.
pub fn refinement_due(iteration: usize, hard_violation: bool) -> bool {
    !hard_violation && iteration >= 5 && (iteration - 5).is_multiple_of(2)
}

/// Splits a box at its midpoint along every dimension.
pub fn bisect<S: Scalar>(cell: &IntervalBox<S>) -> Vec<IntervalBox<S>> {
    let n = cell.dim();
    (0..1usize << n)
        .map(|mask| {
            IntervalBox::new(
                cell.iter()
                    .enumerate()
                    .map(|(d, iv)| {
                        let m = iv.mid();
                        if mask >> (n - 1 - d) & 1 == 0 {
                            Interval { lo: iv.lo, hi: m }
                        } else {
                            Interval { lo: m, hi: iv.hi }
                        }
                    })
                    .collect(),
            )
            .expect("halves of a valid box")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_1d(tau: f64) -> Grid<f64> {
        Grid::build(IntervalBox::from_pairs(&[(0.0, 1.0)]), tau, DEFAULT_CELL_BUDGET).unwrap()
    }

    #[test]
    fn build_1d_example() {
        let g = unit_1d(0.25);
        assert_eq!(g.num_cells(), 2);
        assert_eq!(g.spacing()[0], 0.5);
        assert_eq!(g.center(0), vec![0.25]);
        assert_eq!(g.center(1), vec![0.75]);
    }

    #[test]
    fn build_matches_benchmark_mesh() {
        let g = Grid::build(
            IntervalBox::<f64>::from_pairs(&[(-0.7, 0.7), (-0.7, 0.7)]),
            0.0007,
            DEFAULT_CELL_BUDGET,
        )
        .unwrap();
        assert_eq!(g.counts(), &[2000, 2000]);
        assert!((g.spacing()[0] - 0.0007).abs() < 1e-15);
    }

    #[test]
    fn build_rejects_bad_mesh_and_budget() {
        assert!(Grid::build(IntervalBox::<f64>::from_pairs(&[(0.0, 1.0)]), 0.0, 10).is_err());
        let err = Grid::build(IntervalBox::<f64>::from_pairs(&[(0.0, 1.0), (0.0, 1.0)]), 1e-4, 1000);
        match err {
            Err(Error::Budget { required, .. }) => assert_eq!(required, 100_000_000),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn coords_round_trip() {
        let g = Grid::build(
            IntervalBox::<f64>::from_pairs(&[(0.0, 1.0), (0.0, 2.0), (0.0, 3.0)]),
            0.3,
            DEFAULT_CELL_BUDGET,
        )
        .unwrap();
        for idx in 0..g.num_cells() {
            assert_eq!(g.index_of_coords(&g.coords(idx)), idx);
            assert_eq!(g.cell_of(&g.center(idx)), idx);
        }
    }

    #[test]
    fn seed_training_set_factors() {
        let g = unit_1d(0.05);
        assert_eq!(g.num_cells(), 10);
        assert_eq!(g.seed_training_set(1).len(), 10);
        assert_eq!(g.seed_training_set(2).len(), 5);
        assert_eq!(g.seed_training_set(3).len(), 4);
        assert!(g.seed_training_set(3).iter().all(|p| g.bounds().contains(p)));
    }

    #[test]
    fn cells_intersecting_edge_cases() {
        let g = Grid::build(
            IntervalBox::<f64>::from_pairs(&[(-1.0, 1.0), (-1.0, 1.0)]),
            0.1,
            DEFAULT_CELL_BUDGET,
        )
        .unwrap();
        let all = g.cells_intersecting(std::slice::from_ref(g.bounds()), CellRole::Other);
        assert_eq!(all.len(), g.num_cells());
        assert!(g.cells_intersecting(&[], CellRole::Other).is_empty());
        // A box touching a grid line picks up the neighbors on both sides.
        let line = IntervalBox::from_pairs(&[(0.0, 0.0), (0.0, 0.0)]);
        assert_eq!(g.cells_intersecting(&[line], CellRole::Other).len(), 4);
    }

    #[test]
    fn refine_schedule() {
        let g = unit_1d(0.1);
        assert_eq!(g.refine(4, false, DEFAULT_CELL_BUDGET).unwrap().tau(), 0.1);
        assert_eq!(g.refine(5, false, DEFAULT_CELL_BUDGET).unwrap().tau(), 0.05);
        assert_eq!(g.refine(5, true, DEFAULT_CELL_BUDGET).unwrap().tau(), 0.1);
        assert_eq!(g.refine(6, false, DEFAULT_CELL_BUDGET).unwrap().tau(), 0.1);
        assert_eq!(g.refine(7, false, DEFAULT_CELL_BUDGET).unwrap().tau(), 0.05);
    }

    #[test]
    fn refine_locally_children_tile_parent() {
        let g = Grid::build(
            IntervalBox::<f64>::from_pairs(&[(0.0, 1.0), (0.0, 1.0)]),
            0.25,
            DEFAULT_CELL_BUDGET,
        )
        .unwrap();
        assert_eq!(g.refine_locally(&CellSet::empty(CellRole::Counterexample)), g);
        let r = g.refine_locally(&CellSet::new(CellRole::Counterexample, vec![1]));
        let leaves = r.leaves(1);
        assert_eq!(leaves.len(), 4);
        let parent = g.cell_box(1);
        let vol: f64 = leaves.iter().map(|l| l.cell.volume()).sum();
        assert!((vol - parent.volume()).abs() < 1e-15);
        for leaf in &leaves {
            assert!(leaf.cell.is_subset_of(&parent));
            assert_eq!(leaf.mesh, 0.125);
            let half_l1: f64 = leaf.cell.widths().iter().map(|w| w / 2.0).sum();
            assert!(half_l1 <= leaf.mesh + 1e-15);
        }
        assert_eq!(r.leaves(0).len(), 1);
    }
}
