//! Disturbance laws, noise-space partitions and the expected-value upper bound.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::interval::{scalar_bounds_batch, BoxBatch, Interval, IntervalBox};
use crate::nn::Mlp;
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::{Error, Result};

/// Independent per-dimension disturbance law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Density `1 − |x|` on `[−1, 1]`.
    Triangular { dim: usize },
    /// Centered normal; unbounded, so it can be sampled but not partitioned.
    Normal { dim: usize, std: f64 },
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        match *self {
            NoiseSpec::Triangular { dim } | NoiseSpec::Normal { dim, .. } => dim,
        }
    }

    pub fn sample_into<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [S]) {
        match *self {
            NoiseSpec::Triangular { .. } => {
                for o in out.iter_mut() {
                    *o = S::lit(triangular_inv_cdf(rng.gen::<f64>()));
                }
            }
            NoiseSpec::Normal { std, .. } => {
                for o in out.iter_mut() {
                    // Box–Muller on (0, 1].
                    let u1 = 1.0 - rng.gen::<f64>();
                    let u2 = rng.gen::<f64>();
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *o = S::lit(std * z);
                }
            }
        }
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    /// The bounded support, or an error for unbounded laws.
    pub fn support<S: Scalar>(&self) -> Result<IntervalBox<S>> {
        match *self {
            NoiseSpec::Triangular { dim } => IntervalBox::new(vec![
                Interval {
                    lo: -S::one(),
                    hi: S::one()
                };
                dim
            ]),
            NoiseSpec::Normal { .. } => Err(Error::Unsupported(
                "normal noise has unbounded support and cannot be partitioned".into(),
            )),
        }
    }

    fn marginal_cdf(&self, x: f64) -> f64 {
        match *self {
            NoiseSpec::Triangular { .. } => triangular_cdf(x),
            NoiseSpec::Normal { .. } => unreachable!("rejected by support()"),
        }
    }
}

pub fn triangular_pdf(x: f64) -> f64 {
    if (-1.0..=1.0).contains(&x) {
        1.0 - x.abs()
    } else {
        0.0
    }
}

pub fn triangular_cdf(x: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x <= 0.0 {
        (1.0 + x) * (1.0 + x) / 2.0
    } else if x < 1.0 {
        1.0 - (1.0 - x) * (1.0 - x) / 2.0
    } else {
        1.0
    }
}

pub fn triangular_inv_cdf(u: f64) -> f64 {
    if u < 0.5 {
        -1.0 + (2.0 * u).sqrt()
    } else {
        1.0 - (2.0 * (1.0 - u)).sqrt()
    }
}

/// How cell suprema are weighted into the expectation bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// `Σ P(cellᵢ)·sup_i`.
    #[default]
    MassWeighted,
    /// `Σ maxvol·sup_i`, sound when the density is at most 1.
    Maxvol,
}

impl std::str::FromStr for BoundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mass" | "mass_weighted" => Ok(BoundMode::MassWeighted),
            "maxvol" => Ok(BoundMode::Maxvol),
            other => Err(Error::InvalidConfig(format!("unknown bound mode `{other}`"))),
        }
    }
}

/// A uniform grid over the noise support with per-cell probability masses.
#[derive(Debug, Clone)]
pub struct NoisePartition<S: Scalar> {
    cells: Vec<IntervalBox<S>>,
    masses: Vec<S>,
    maxvol: S,
    cells_per_dim: usize,
}

impl<S: Scalar> NoisePartition<S> {
    pub fn new(spec: &NoiseSpec, cells_per_dim: usize) -> Result<Self> {
        if cells_per_dim == 0 {
            return Err(Error::InvalidConfig("cells_per_dim must be at least 1".into()));
        }
        let support = spec.support::<f64>()?;
        let dim = spec.dim();
        let k = cells_per_dim;
        let axes: Vec<Vec<(f64, f64, f64)>> = support
            .iter()
            .map(|iv| {
                let w = iv.width() / k as f64;
                (0..k)
                    .map(|i| {
                        let lo = if i == 0 { iv.lo } else { iv.lo + i as f64 * w };
                        let hi = if i + 1 == k { iv.hi } else { iv.lo + (i + 1) as f64 * w };
                        (lo, hi, spec.marginal_cdf(hi) - spec.marginal_cdf(lo))
                    })
                    .collect()
            })
            .collect();
        let total = k
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::InvalidConfig(format!("{k}^{dim} noise cells overflow")))?;
        let mut cells = Vec::with_capacity(total);
        let mut masses = Vec::with_capacity(total);
        let mut maxvol = S::zero();
        for idx in 0..total {
            let mut rem = idx;
            let mut ivs = vec![Interval::point(S::zero()); dim];
            let mut mass = 1.0;
            for d in (0..dim).rev() {
                let (lo, hi, m) = axes[d][rem % k];
                rem /= k;
                ivs[d] = Interval {
                    lo: S::lit(lo),
                    hi: S::lit(hi),
                };
                mass *= m;
            }
            let cell = IntervalBox::new(ivs)?;
            maxvol = maxvol.max(cell.volume());
            cells.push(cell);
            masses.push(S::lit(mass));
        }
        Ok(Self {
            cells,
            masses,
            maxvol,
            cells_per_dim,
        })
    }

    pub fn cells(&self) -> &[IntervalBox<S>] {
        &self.cells
    }

    pub fn masses(&self) -> &[S] {
        &self.masses
    }

    pub fn maxvol(&self) -> S {
        self.maxvol
    }

    pub fn cells_per_dim(&self) -> usize {
        self.cells_per_dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn weights(&self, mode: BoundMode) -> Vec<S> {
        match mode {
            BoundMode::MassWeighted => self.masses.clone(),
            BoundMode::Maxvol => vec![self.maxvol; self.cells.len()],
        }
    }
}

/// Upper bound on `E_ω[V(f(x, π(x), ω))]` for one state.
pub fn expected_upper_bound<S: Scalar>(
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    policy: &dyn Policy<S>,
    x: &[S],
    part: &NoisePartition<S>,
    mode: BoundMode,
) -> Result<S> {
    let xs = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|_| Error::dims("expected_upper_bound", sys.state_dim(), x.len()))?;
    let us = policy.act_batch(xs.view())?;
    Ok(expected_upper_bound_batch(v, sys, &xs, &us, part, mode)?[0])
}

/// [`expected_upper_bound`] for every row of `xs`, given the matching policy outputs `us`.
pub fn expected_upper_bound_batch<S: Scalar>(
    v: &Mlp<S>,
    sys: &SystemModel<S>,
    xs: &Array2<S>,
    us: &Array2<S>,
    part: &NoisePartition<S>,
    mode: BoundMode,
) -> Result<Vec<S>> {
    if xs.ncols() != sys.state_dim() {
        return Err(Error::dims("expected_upper_bound (state)", sys.state_dim(), xs.ncols()));
    }
    if us.ncols() != sys.action_dim() || us.nrows() != xs.nrows() {
        return Err(Error::dims(
            "expected_upper_bound (action)",
            sys.action_dim(),
            us.ncols(),
        ));
    }
    if part.cells.first().map(IntervalBox::dim) != Some(sys.noise_dim()) {
        return Err(Error::dims(
            "expected_upper_bound (noise)",
            sys.noise_dim(),
            part.cells.first().map_or(0, IntervalBox::dim),
        ));
    }
    let k = part.len();
    let mut batch = BoxBatch::with_capacity(xs.nrows() * k, sys.state_dim());
    for (r, (x, u)) in xs.outer_iter().zip(us.outer_iter()).enumerate() {
        let xb = IntervalBox::point(x.as_slice().expect("standard layout"));
        let ub = IntervalBox::point(u.as_slice().expect("standard layout"));
        for (c, cell) in part.cells.iter().enumerate() {
            batch.set_row(r * k + c, &sys.step_bounds(&xb, &ub, cell)?);
        }
    }
    let (_, hi) = scalar_bounds_batch(v, &batch)?;
    let weights = part.weights(mode);
    Ok((0..xs.nrows())
        .map(|r| {
            weights
                .iter()
                .zip(hi.slice(ndarray::s![r * k..(r + 1) * k]))
                .map(|(&w, &h)| w * h)
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::policy::LinearPolicy;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_masses() {
        let spec = NoiseSpec::Triangular { dim: 1 };
        let p2 = NoisePartition::<f64>::new(&spec, 2).unwrap();
        assert_eq!(p2.masses(), &[0.5, 0.5]);
        let p4 = NoisePartition::<f64>::new(&spec, 4).unwrap();
        for (m, e) in p4.masses().iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert!((m - e).abs() < 1e-12);
        }
        for k in 1..20 {
            let p = NoisePartition::<f64>::new(&NoiseSpec::Triangular { dim: 2 }, k).unwrap();
            assert_eq!(p.len(), k * k);
            assert!((p.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.cells().iter().all(|c| c.volume() <= p.maxvol()));
        }
        assert!(NoisePartition::<f64>::new(&spec, 0).is_err());
        assert!(NoisePartition::<f64>::new(&NoiseSpec::Normal { dim: 1, std: 1.0 }, 4).is_err());
    }

    #[test]
    fn triangular_law() {
        assert_eq!(triangular_pdf(0.0), 1.0);
        assert_eq!(triangular_cdf(0.0), 0.5);
        for u in [0.0, 0.1, 0.5, 0.77, 0.999] {
            assert!((triangular_cdf(triangular_inv_cdf(u)) - u).abs() < 1e-12);
        }
        let spec = NoiseSpec::Triangular { dim: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut sum = 0.0;
        let mut below = 0usize;
        for _ in 0..n {
            let w: Vec<f64> = spec.sample(&mut rng);
            assert!((-1.0..=1.0).contains(&w[0]));
            sum += w[0];
            below += usize::from(w[0] < 0.0);
        }
        let se = (1.0f64 / 6.0).sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 4.0 * se);
        assert!((below as f64 / n as f64 - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn constant_value_bounds() {
        let sys = SystemModel::<f64>::lds2d();
        let v = Mlp::constant(&[2, 4, 1], Activation::Relu, Activation::Identity, 0.7);
        let pi = LinearPolicy::new(array![[0.0, 0.0]], array![0.0], Some(0.0)).unwrap();
        let part = NoisePartition::new(sys.noise(), 4).unwrap();
        let b = expected_upper_bound(&v, &sys, &pi, &[0.1, 0.1], &part, BoundMode::MassWeighted).unwrap();
        assert!((b - 0.7).abs() < 1e-12);
        let b = expected_upper_bound(&v, &sys, &pi, &[0.1, 0.1], &part, BoundMode::Maxvol).unwrap();
        // 16 cells of volume 0.25 over a support of volume 4.
        assert!((b - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn maxvol_in_one_dimension_doubles() {
        let json = r#"{"A":[[0.5]],"B":[[0.1]],"noise_scale":[0.1],"bounds":[[-1,1]],"target_box":[[-0.1,0.1]]}"#;
        let sys = SystemModel::<f64>::from_affine_spec_json(json).unwrap();
        let v = Mlp::constant(&[1, 3, 1], Activation::Relu, Activation::Identity, 1.5);
        let pi = LinearPolicy::new(array![[0.0]], array![0.0], Some(0.0)).unwrap();
        for k in [1, 3, 8] {
            let part = NoisePartition::new(sys.noise(), k).unwrap();
            let b = expected_upper_bound(&v, &sys, &pi, &[0.2], &part, BoundMode::Maxvol).unwrap();
            assert!((b - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_mode_parsing() {
        assert_eq!("mass".parse::<BoundMode>().unwrap(), BoundMode::MassWeighted);
        assert_eq!("maxvol".parse::<BoundMode>().unwrap(), BoundMode::Maxvol);
        assert!("other".parse::<BoundMode>().is_err());
    }
}
