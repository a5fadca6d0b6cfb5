//! Lipschitz constants of networks, the composed constant `K` and the maximal step size `Δ`.
//!
//! All constants are with respect to the L1 norm on inputs and outputs. A layer `x ↦ σ(Wx + b)`
//! with 1-Lipschitz `σ` has constant `max_j Σ_i |W_ij|` (the largest absolute column sum of
//! `W`, stored as output × input), and the network constant is the product over layers.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::interval::IntervalBox;
use crate::nn::{Gradients, Mlp};
use crate::noise::NoisePartition;
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::system::SystemModel;
use crate::{Error, Result};

/// Cells per chunk when sweeping a grid.
const CHUNK: usize = 4096;

/// Largest absolute column sum, and the column attaining it.
pub fn column_norm<S: Scalar>(w: ArrayView2<'_, S>) -> (S, usize) {
    let mut best = (S::zero(), 0);
    for (j, col) in w.columns().into_iter().enumerate() {
        let s: S = col.iter().map(|v| v.abs()).sum();
        if s > best.0 {
            best = (s, j);
        }
    }
    best
}

fn check_activations<S: Scalar>(net: &Mlp<S>) -> Result<()> {
    match net.layers().iter().find(|l| !l.activation().is_one_lipschitz()) {
        Some(l) => Err(Error::Unsupported(format!(
            "activation {:?} is not 1-Lipschitz",
            l.activation()
        ))),
        None => Ok(()),
    }
}

/// Product over layers of the induced L1 norm of each weight matrix.
pub fn network_lipschitz<S: Scalar>(net: &Mlp<S>) -> Result<S> {
    check_activations(net)?;
    Ok(net
        .layers()
        .iter()
        .map(|l| column_norm(l.weights().view()).0)
        .fold(S::one(), |a, b| a * b))
}

/// [`network_lipschitz`] together with its subgradient with respect to the weights.
///
/// Only the maximizing column of each layer receives gradient; `|·|` has subgradient 0 at 0.
pub fn network_lipschitz_grad<S: Scalar>(net: &Mlp<S>) -> Result<(S, Gradients<S>)> {
    check_activations(net)?;
    let norms: Vec<(S, usize)> = net.layers().iter().map(|l| column_norm(l.weights().view())).collect();
    let n = norms.len();
    let mut prefix = vec![S::one(); n + 1];
    for k in 0..n {
        prefix[k + 1] = prefix[k] * norms[k].0;
    }
    let mut suffix = vec![S::one(); n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] * norms[k].0;
    }
    let mut grads = Gradients::zeros_like(net);
    for (k, layer) in net.layers().iter().enumerate() {
        let others = prefix[k] * suffix[k + 1];
        let j = norms[k].1;
        let gw: &mut Array2<S> = &mut grads.layers[k].0;
        for i in 0..layer.out_dim() {
            gw[(i, j)] = others * sign(layer.weights()[(i, j)]);
        }
    }
    Ok((prefix[n], grads))
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `K = L_V·(L_f·(L_π + 1) + 1)`.
pub fn compose_k<S: Scalar>(l_v: S, l_f: S, l_pi: S) -> S {
    l_v * (l_f * (l_pi + S::one()) + S::one())
}

/// The constants a certificate depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Scalar", deserialize = "S: Scalar"))]
pub struct LipschitzReport<S: Scalar> {
    #[serde(rename = "L_pi")]
    pub l_pi: S,
    #[serde(rename = "L_V")]
    pub l_v: S,
    #[serde(rename = "L_f")]
    pub l_f: S,
    #[serde(rename = "K")]
    pub k: S,
    #[serde(rename = "Delta_theta")]
    pub delta_theta: S,
}

impl<S: Scalar> LipschitzReport<S> {
    pub fn new(l_pi: S, l_v: S, l_f: S, delta_theta: S) -> Result<Self> {
        let r = Self {
            l_pi,
            l_v,
            l_f,
            k: compose_k(l_v, l_f, l_pi),
            delta_theta,
        };
        for (name, v) in [
            ("L_pi", r.l_pi),
            ("L_V", r.l_v),
            ("L_f", r.l_f),
            ("K", r.k),
            ("Delta_theta", r.delta_theta),
        ] {
            if !v.is_finite() || v < S::zero() {
                return Err(Error::NonFinite(format!("{name} = {v}")));
            }
        }
        Ok(r)
    }
}

/// Sound upper bound on `‖f(x, π(x), ω) − x‖₁` over the grid and the noise support.
///
/// Every grid cell is paired with every noise cell; the result is the largest interval bound
/// of the L1 displacement. Clipping into the state space only shortens steps, so the bound is
/// taken on the unclipped map.
pub fn max_step_size<S: Scalar>(
    sys: &SystemModel<S>,
    policy: &dyn Policy<S>,
    grid: &Grid<S>,
    part: &NoisePartition<S>,
) -> Result<S> {
    let n = grid.num_cells();
    let chunks = n.div_ceil(CHUNK);
    let per_chunk: Result<Vec<S>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let cells: Vec<IntervalBox<S>> = (c * CHUNK..((c + 1) * CHUNK).min(n))
                .map(|i| grid.cell_box(i))
                .collect();
            step_size_over(sys, policy, &cells, part)
        })
        .collect();
    Ok(per_chunk?.into_iter().fold(S::zero(), S::max))
}

/// [`max_step_size`] restricted to explicit state boxes.
pub fn step_size_over<S: Scalar>(
    sys: &SystemModel<S>,
    policy: &dyn Policy<S>,
    cells: &[IntervalBox<S>],
    part: &NoisePartition<S>,
) -> Result<S> {
    if cells.is_empty() {
        return Ok(S::zero());
    }
    let actions = policy.act_bounds_batch(&crate::interval::BoxBatch::from_boxes(cells))?;
    let mut best = S::zero();
    for (r, cell) in cells.iter().enumerate() {
        let u = sys.action_bounds().clamp_box(&actions.row(r));
        for w in part.cells() {
            let d = sys.dynamics().displacement_bounds(cell, &u, w)?;
            best = best.max(d.iter().map(|iv| iv.mag()).sum());
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DEFAULT_CELL_BUDGET;
    use crate::nn::{Activation, Layer};
    use crate::policy::LinearPolicy;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(w: Array2<f64>) -> Mlp<f64> {
        let b = ndarray::Array1::zeros(w.nrows());
        Mlp::new(vec![Layer::new(w, b, Activation::Identity).unwrap()]).unwrap()
    }

    #[test]
    fn network_lipschitz_examples() {
        assert_eq!(
            network_lipschitz(&single(array![[1.0, -2.0], [3.0, 4.0]])).unwrap(),
            6.0
        );
        assert_eq!(network_lipschitz(&single(array![[1.0]])).unwrap(), 1.0);
        let two = Mlp::new(vec![
            Layer::new(array![[2.0]], array![0.0], Activation::Relu).unwrap(),
            Layer::new(array![[3.0]], array![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap();
        assert_eq!(network_lipschitz(&two).unwrap(), 6.0);
    }

    #[test]
    fn compose_k_examples() {
        assert_eq!(compose_k(2.0, 3.0, 1.0), 14.0);
        assert_eq!(compose_k(1.0, 0.0, 0.0), 1.0);
        assert_eq!(compose_k(0.0, 5.0, 7.0), 0.0);
    }

    #[test]
    fn lipschitz_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Mlp::<f64>::random(&[2, 5, 4, 1], Activation::Relu, Activation::Softplus, &mut rng);
        let (l, g) = network_lipschitz_grad(&net).unwrap();
        assert_eq!(l, network_lipschitz(&net).unwrap());
        let h = 1e-7;
        for k in 0..net.layers().len() {
            let (rows, cols) = net.layers()[k].weights().dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut p = net.clone();
                    p.layers_mut()[k].weights_mut()[(i, j)] += h;
                    let mut m = net.clone();
                    m.layers_mut()[k].weights_mut()[(i, j)] -= h;
                    let fd = (network_lipschitz(&p).unwrap() - network_lipschitz(&m).unwrap()) / (2.0 * h);
                    assert!((fd - g.layers[k].0[(i, j)]).abs() < 1e-5, "layer {k} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn lipschitz_bound_holds_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let net = Mlp::<f64>::random(&[2, 16, 16, 1], Activation::Relu, Activation::Softplus, &mut rng);
            let l = network_lipschitz(&net).unwrap();
            for _ in 0..200 {
                let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let y = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let gap = (net.eval_scalar(&x).unwrap() - net.eval_scalar(&y).unwrap()).abs();
                let dist = (x[0] - y[0]).abs() + (x[1] - y[1]).abs();
                assert!(gap <= l * dist + 1e-12);
            }
        }
    }

    #[test]
    fn zero_policy_step_size_on_lds2d() {
        let sys = SystemModel::<f64>::lds2d();
        let zero = LinearPolicy::new(array![[0.0, 0.0]], array![0.0], Some(0.0)).unwrap();
        let grid = Grid::build(sys.state_space().clone(), 0.05, DEFAULT_CELL_BUDGET).unwrap();
        let part = NoisePartition::new(sys.noise(), 8).unwrap();
        let delta = max_step_size(&sys, &zero, &grid, &part).unwrap();
        // |0.0196·x₂| + |−0.02·x₂| over |x₂| ≤ 0.7, plus |u| ≤ 1 and |ω| ≤ 1 terms; a zero
        // policy contributes no action term.
        let by_hand = 0.0196 * 0.7 + 0.002 + 0.02 * 0.7 + 0.001;
        assert!((delta - by_hand).abs() < 1e-12, "{delta} vs {by_hand}");
        let saturating = LinearPolicy::new(array![[0.0, 0.0]], array![5.0], Some(0.0)).unwrap();
        let delta = max_step_size(&sys, &saturating, &grid, &part).unwrap();
        // Worst case per coordinate is 0.01772 + 0.115; the true sup, at x₂ = −0.7, is 0.12472.
        assert!((0.12472..=0.13272 + 1e-12).contains(&delta), "{delta}");
    }

    #[test]
    fn static_system_has_zero_step() {
        let json = r#"{"A":[[1,0],[0,1]],"B":[[0],[0]],"noise_scale":[0,0],"bounds":[[-1,1],[-1,1]],"target_box":[[-0.1,0.1],[-0.1,0.1]]}"#;
        let sys = SystemModel::<f64>::from_affine_spec_json(json).unwrap();
        let pi = LinearPolicy::new(array![[1.0, 1.0]], array![0.0], Some(1.0)).unwrap();
        let grid = Grid::build(sys.state_space().clone(), 0.2, DEFAULT_CELL_BUDGET).unwrap();
        let part = NoisePartition::new(sys.noise(), 2).unwrap();
        assert_eq!(max_step_size(&sys, &pi, &grid, &part).unwrap(), 0.0);
    }

    #[test]
    fn report_rejects_negative_constants() {
        assert!(LipschitzReport::new(1.0, 2.0, 3.0, 0.1).is_ok());
        assert_eq!(LipschitzReport::new(1.0, 2.0, 3.0, 0.1).unwrap().k, 14.0);
        assert!(LipschitzReport::new(-1.0, 2.0, 3.0, 0.1).is_err());
        assert!(LipschitzReport::new(1.0, f64::NAN, 3.0, 0.1).is_err());
    }
}
