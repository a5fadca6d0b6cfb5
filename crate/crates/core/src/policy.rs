//! Control policies as seen by the verifier: evaluable, interval-evaluable and Lipschitz.

use ndarray::{Array1, Array2, ArrayView2};

use crate::interval::{affine_prop, net_bounds, net_bounds_batch, BoxBatch, IntervalBox};
use crate::lipschitz::network_lipschitz;
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// A state-feedback map `x ↦ u`.
pub trait Policy<S: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;

    fn action_dim(&self) -> usize;

    fn act(&self, x: &[S]) -> Result<Vec<S>>;

    /// Sound bounds on the action over a box of states.
    fn act_bounds(&self, states: &IntervalBox<S>) -> Result<IntervalBox<S>>;

    /// L1→L1 Lipschitz constant, if known.
    fn lipschitz(&self) -> Option<S>;

    fn act_batch(&self, xs: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let mut out = Array2::zeros((xs.nrows(), self.action_dim()));
        for (r, row) in xs.outer_iter().enumerate() {
            let u = self.act(&row.to_vec())?;
            out.row_mut(r).assign(&Array1::from(u));
        }
        Ok(out)
    }

    fn act_bounds_batch(&self, states: &BoxBatch<S>) -> Result<BoxBatch<S>> {
        let mut out = BoxBatch::with_capacity(states.rows(), self.action_dim());
        for r in 0..states.rows() {
            out.set_row(r, &self.act_bounds(&states.row(r))?);
        }
        Ok(out)
    }

    /// The policy as a network, when it is one.
    fn as_network(&self) -> Option<&Mlp<S>> {
        None
    }
}

impl<S: Scalar> Policy<S> for Mlp<S> {
    fn state_dim(&self) -> usize {
        self.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.output_dim()
    }

    fn act(&self, x: &[S]) -> Result<Vec<S>> {
        self.forward(x)
    }

    fn act_bounds(&self, states: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        net_bounds(self, states)
    }

    fn lipschitz(&self) -> Option<S> {
        network_lipschitz(self).ok()
    }

    fn act_batch(&self, xs: ArrayView2<'_, S>) -> Result<Array2<S>> {
        self.forward_batch(xs)
    }

    fn act_bounds_batch(&self, states: &BoxBatch<S>) -> Result<BoxBatch<S>> {
        net_bounds_batch(self, states)
    }

    fn as_network(&self) -> Option<&Mlp<S>> {
        Some(self)
    }
}

/// `u = K x + c` with a user-supplied Lipschitz constant.
#[derive(Debug, Clone)]
pub struct LinearPolicy<S: Scalar> {
    gain: Array2<S>,
    offset: Array1<S>,
    lipschitz: Option<S>,
}

impl<S: Scalar> LinearPolicy<S> {
    pub fn new(gain: Array2<S>, offset: Array1<S>, lipschitz: Option<S>) -> Result<Self> {
        if gain.nrows() != offset.len() {
            return Err(Error::dims("LinearPolicy::new", gain.nrows(), offset.len()));
        }
        Ok(Self {
            gain,
            offset,
            lipschitz,
        })
    }
}

impl<S: Scalar> Policy<S> for LinearPolicy<S> {
    fn state_dim(&self) -> usize {
        self.gain.ncols()
    }

    fn action_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn act(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("LinearPolicy::act", self.state_dim(), x.len()));
        }
        Ok(self
            .gain
            .outer_iter()
            .zip(self.offset.iter())
            .map(|(row, &c)| row.iter().zip(x).fold(c, |acc, (&k, &v)| acc + k * v))
            .collect())
    }

    fn act_bounds(&self, states: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        affine_prop(self.gain.view(), self.offset.view(), states)
    }

    fn lipschitz(&self) -> Option<S> {
        self.lipschitz
    }
}
