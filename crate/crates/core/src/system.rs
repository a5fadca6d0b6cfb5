//! Discrete-time stochastic systems `x' = f(x, g(u), ω)` and the two benchmark instances.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::interval::{affine_prop, Interval, IntervalBox};
use crate::noise::NoiseSpec;
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// The transition map of a system, before action clamping and state clipping.
pub trait Dynamics<S: Scalar>: Send + Sync + Debug {
    fn state_dim(&self) -> usize;

    fn action_dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    /// `f(x, u, ω)` for an already clamped action.
    fn step_raw(&self, x: &[S], u: &[S], w: &[S], out: &mut [S]);

    /// Sound box enclosing `f` over the given boxes.
    fn step_bounds(&self, _x: &IntervalBox<S>, _u: &IntervalBox<S>, _w: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        Err(Error::Unsupported(format!("{self:?} has no interval form")))
    }

    /// Sound box enclosing `f(x, u, ω) − x`.
    fn displacement_bounds(
        &self,
        x: &IntervalBox<S>,
        u: &IntervalBox<S>,
        w: &IntervalBox<S>,
    ) -> Result<IntervalBox<S>> {
        let next = self.step_bounds(x, u, w)?;
        IntervalBox::new(next.iter().zip(x.iter()).map(|(a, b)| a.sub(b)).collect())
    }

    /// Gradients of `upstreamᵀ f(x, u, ω)` with respect to `x` and `u`.
    fn vjp(&self, x: &[S], u: &[S], w: &[S], upstream: &[S]) -> (Vec<S>, Vec<S>);

    /// L1 Lipschitz constant of `f` in `(x, u)`.
    fn lipschitz(&self) -> S;
}

/// `x' = A x + B u + E ω`.
#[derive(Debug, Clone)]
pub struct AffineDynamics<S: Scalar> {
    a: Array2<S>,
    b: Array2<S>,
    e: Array2<S>,
    full: Array2<S>,
    disp: Array2<S>,
}

impl<S: Scalar> AffineDynamics<S> {
    pub fn new(a: Array2<S>, b: Array2<S>, e: Array2<S>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dims("AffineDynamics (A square)", n, a.ncols()));
        }
        if b.nrows() != n {
            return Err(Error::dims("AffineDynamics (B rows)", n, b.nrows()));
        }
        if e.nrows() != n {
            return Err(Error::dims("AffineDynamics (E rows)", n, e.nrows()));
        }
        if a.iter().chain(b.iter()).chain(e.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine dynamics".into()));
        }
        let full = concatenate(Axis(1), &[a.view(), b.view(), e.view()]).expect("row counts checked");
        let mut disp = full.clone();
        for i in 0..n {
            disp[(i, i)] -= S::one();
        }
        Ok(Self { a, b, e, full, disp })
    }

    pub fn a(&self) -> &Array2<S> {
        &self.a
    }

    pub fn b(&self) -> &Array2<S> {
        &self.b
    }

    pub fn e(&self) -> &Array2<S> {
        &self.e
    }
}

impl<S: Scalar> Dynamics<S> for AffineDynamics<S> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.e.ncols()
    }

    fn step_raw(&self, x: &[S], u: &[S], w: &[S], out: &mut [S]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = S::zero();
            for (j, &v) in x.iter().enumerate() {
                acc += self.a[(i, j)] * v;
            }
            for (j, &v) in u.iter().enumerate() {
                acc += self.b[(i, j)] * v;
            }
            for (j, &v) in w.iter().enumerate() {
                acc += self.e[(i, j)] * v;
            }
            *o = acc;
        }
    }

    fn step_bounds(&self, x: &IntervalBox<S>, u: &IntervalBox<S>, w: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        let zero = Array1::zeros(self.state_dim());
        affine_prop(self.full.view(), zero.view(), &x.concat(u).concat(w))
    }

    fn displacement_bounds(
        &self,
        x: &IntervalBox<S>,
        u: &IntervalBox<S>,
        w: &IntervalBox<S>,
    ) -> Result<IntervalBox<S>> {
        let zero = Array1::zeros(self.state_dim());
        affine_prop(self.disp.view(), zero.view(), &x.concat(u).concat(w))
    }

    fn vjp(&self, _x: &[S], _u: &[S], _w: &[S], upstream: &[S]) -> (Vec<S>, Vec<S>) {
        let g = ndarray::ArrayView1::from(upstream);
        (self.a.t().dot(&g).to_vec(), self.b.t().dot(&g).to_vec())
    }

    fn lipschitz(&self) -> S {
        // Induced L1 norm of [A B]: the largest absolute column sum.
        let ab = concatenate(Axis(1), &[self.a.view(), self.b.view()]).expect("row counts checked");
        ab.columns()
            .into_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<S>())
            .fold(S::zero(), S::max)
    }
}

/// Inverted pendulum with additive noise on both coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PendulumDynamics {
    pub d: f64,
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub b: f64,
}

impl Default for PendulumDynamics {
    fn default() -> Self {
        Self {
            d: 0.05,
            g: 10.0,
            m: 0.15,
            l: 0.5,
            b: 0.1,
        }
    }
}

impl PendulumDynamics {
    const NOISE_VEL: f64 = 0.002;
    const NOISE_ANGLE: f64 = 0.005;

    fn gravity_coef(&self) -> f64 {
        -1.5 * self.g / (2.0 * self.l)
    }

    fn torque_coef(&self) -> f64 {
        3.0 / (self.m * self.l * self.l) * 2.0
    }

    fn velocity<S: Scalar>(&self, x: &[S], u: S, w1: S) -> S {
        let pi = S::PI();
        S::lit(1.0 - self.b) * x[1]
            + S::lit(self.d) * (S::lit(self.gravity_coef()) * (x[0] + pi).sin() + S::lit(self.torque_coef()) * u)
            + S::lit(Self::NOISE_VEL) * w1
    }

    fn velocity_bounds<S: Scalar>(&self, x: &IntervalBox<S>, u: Interval<S>, w1: Interval<S>) -> Interval<S> {
        let gravity = x[0].shift(S::PI()).sin().scale(S::lit(self.gravity_coef()));
        let torque = u.scale(S::lit(self.torque_coef()));
        (x[1].scale(S::lit(1.0 - self.b)))
            .add(&gravity.add(&torque).scale(S::lit(self.d)))
            .add(&w1.scale(S::lit(Self::NOISE_VEL)))
    }
}

impl<S: Scalar> Dynamics<S> for PendulumDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn step_raw(&self, x: &[S], u: &[S], w: &[S], out: &mut [S]) {
        let v = self.velocity(x, u[0], w[0]);
        out[1] = v;
        out[0] = x[0] + S::lit(self.d) * v + S::lit(Self::NOISE_ANGLE) * w[1];
    }

    fn step_bounds(&self, x: &IntervalBox<S>, u: &IntervalBox<S>, w: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        let v = self.velocity_bounds(x, u[0], w[0]);
        let angle = x[0]
            .add(&v.scale(S::lit(self.d)))
            .add(&w[1].scale(S::lit(Self::NOISE_ANGLE)));
        IntervalBox::new(vec![angle, v])
    }

    fn displacement_bounds(
        &self,
        x: &IntervalBox<S>,
        u: &IntervalBox<S>,
        w: &IntervalBox<S>,
    ) -> Result<IntervalBox<S>> {
        let v = self.velocity_bounds(x, u[0], w[0]);
        let d_angle = v.scale(S::lit(self.d)).add(&w[1].scale(S::lit(Self::NOISE_ANGLE)));
        let gravity = x[0].shift(S::PI()).sin().scale(S::lit(self.gravity_coef()));
        let torque = u[0].scale(S::lit(self.torque_coef()));
        let d_vel = x[1]
            .scale(S::lit(-self.b))
            .add(&gravity.add(&torque).scale(S::lit(self.d)))
            .add(&w[0].scale(S::lit(Self::NOISE_VEL)));
        IntervalBox::new(vec![d_angle, d_vel])
    }

    fn vjp(&self, x: &[S], _u: &[S], _w: &[S], upstream: &[S]) -> (Vec<S>, Vec<S>) {
        let d = S::lit(self.d);
        let through_v = upstream[1] + d * upstream[0];
        let dv_dx0 = d * S::lit(self.gravity_coef()) * (x[0] + S::PI()).cos();
        let gx = vec![upstream[0] + through_v * dv_dx0, through_v * S::lit(1.0 - self.b)];
        let gu = vec![through_v * d * S::lit(self.torque_coef())];
        (gx, gu)
    }

    fn lipschitz(&self) -> S {
        // Column sums of the Jacobian bound, using |cos| ≤ 1:
        // x1 → 1 + d²·c_g + d·c_g, x2 → d(1−b) + (1−b), u → d²·c_u + d·c_u.
        let cg = self.gravity_coef().abs();
        let cu = self.torque_coef();
        let d = self.d;
        let col_x1 = 1.0 + d * d * cg + d * cg;
        let col_x2 = (1.0 - self.b) * (1.0 + d);
        let col_u = d * cu * (1.0 + d);
        S::lit(col_x1.max(col_x2).max(col_u))
    }
}

/// Training reward shaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 inside the stabilizing set, 0 elsewhere.
    Indicator,
    /// `1 − x₁² − 0.1·x₂²`.
    PendulumQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Membership {
    pub in_x: bool,
    pub in_xs: bool,
    pub in_t: bool,
}

/// A system together with its state space, stabilizing set, target set and noise law.
#[derive(Debug, Clone)]
pub struct SystemModel<S: Scalar> {
    id: String,
    dynamics: Arc<dyn Dynamics<S>>,
    action_bounds: IntervalBox<S>,
    state_space: IntervalBox<S>,
    excluded: Vec<IntervalBox<S>>,
    target: IntervalBox<S>,
    noise: NoiseSpec,
    reward: RewardMode,
    l_f: S,
}

/// JSON description of an affine system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineSpec {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub noise_scale: NoiseScale,
    pub bounds: Vec<(f64, f64)>,
    #[serde(default)]
    pub excluded_boxes: Vec<Vec<(f64, f64)>>,
    pub target_box: Vec<(f64, f64)>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub reward: Option<RewardMode>,
}

fn default_id() -> String {
    "affine".into()
}

/// Noise input matrix, or its diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseScale {
    Diagonal(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

fn matrix<S: Scalar>(rows: &[Vec<f64>], what: &str) -> Result<Array2<S>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidConfig(format!(
            "{what} must be a nonempty rectangular matrix"
        )));
    }
    Ok(Array2::from_shape_fn((r, c), |(i, j)| S::lit(rows[i][j])))
}

fn boxed<S: Scalar>(pairs: &[(f64, f64)], what: &str) -> Result<IntervalBox<S>> {
    IntervalBox::new(
        pairs
            .iter()
            .map(|&(lo, hi)| Interval::new(S::lit(lo), S::lit(hi)))
            .collect::<Result<_>>()?,
    )
    .map_err(|e| Error::InvalidConfig(format!("{what}: {e}")))
}

impl<S: Scalar> SystemModel<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        dynamics: Arc<dyn Dynamics<S>>,
        state_space: IntervalBox<S>,
        excluded: Vec<IntervalBox<S>>,
        target: IntervalBox<S>,
        noise: NoiseSpec,
        reward: RewardMode,
    ) -> Result<Self> {
        let n = dynamics.state_dim();
        if state_space.dim() != n {
            return Err(Error::dims("SystemModel (state space)", n, state_space.dim()));
        }
        if target.dim() != n {
            return Err(Error::dims("SystemModel (target)", n, target.dim()));
        }
        if let Some(b) = excluded.iter().find(|b| b.dim() != n) {
            return Err(Error::dims("SystemModel (excluded box)", n, b.dim()));
        }
        if noise.dim() != dynamics.noise_dim() {
            return Err(Error::dims("SystemModel (noise)", dynamics.noise_dim(), noise.dim()));
        }
        let sys = Self {
            id: id.into(),
            action_bounds: IntervalBox::new(
                (0..dynamics.action_dim())
                    .map(|_| Interval {
                        lo: -S::one(),
                        hi: S::one(),
                    })
                    .collect(),
            )?,
            l_f: dynamics.lipschitz(),
            dynamics,
            state_space,
            excluded,
            target,
            noise,
            reward,
        };
        if !sys.target.is_subset_of(&sys.state_space) || sys.excluded.iter().any(|b| b.intersects(&sys.target)) {
            return Err(Error::InvalidConfig(
                "target set must lie inside the stabilizing set".into(),
            ));
        }
        Ok(sys)
    }

    /// Two-dimensional linear system with saturated scalar input.
    pub fn lds2d() -> Self {
        let dyn_ = AffineDynamics::new(
            Array2::from_shape_vec((2, 2), vec![S::one(), S::lit(0.0196), S::zero(), S::lit(0.98)]).unwrap(),
            Array2::from_shape_vec((2, 1), vec![S::lit(0.002), S::lit(0.1)]).unwrap(),
            Array2::from_shape_vec((2, 2), vec![S::lit(0.002), S::zero(), S::zero(), S::lit(0.001)]).unwrap(),
        )
        .expect("benchmark matrices are valid");
        Self::new(
            "lds2d",
            Arc::new(dyn_),
            IntervalBox::from_pairs(&[(-0.7, 0.7), (-0.7, 0.7)]),
            vec![
                IntervalBox::from_pairs(&[(-0.7, -0.6), (-0.7, -0.4)]),
                IntervalBox::from_pairs(&[(0.6, 0.7), (0.4, 0.7)]),
            ],
            IntervalBox::from_pairs(&[(-0.2, 0.2), (-0.2, 0.2)]),
            NoiseSpec::Triangular { dim: 2 },
            RewardMode::Indicator,
        )
        .expect("benchmark sets are consistent")
    }

    /// Inverted pendulum on `[−3, 3]²`.
    pub fn pendulum() -> Self {
        Self::new(
            "pendulum",
            Arc::new(PendulumDynamics::default()),
            IntervalBox::from_pairs(&[(-3.0, 3.0), (-3.0, 3.0)]),
            vec![
                IntervalBox::from_pairs(&[(-3.0, -2.9), (-3.0, 0.0)]),
                IntervalBox::from_pairs(&[(2.9, 3.0), (0.0, 3.0)]),
            ],
            IntervalBox::from_pairs(&[(-0.2, 0.2), (-0.2, 0.2)]),
            NoiseSpec::Triangular { dim: 2 },
            RewardMode::PendulumQuadratic,
        )
        .expect("benchmark sets are consistent")
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "lds2d" => Ok(Self::lds2d()),
            "pendulum" => Ok(Self::pendulum()),
            other => Err(Error::InvalidConfig(format!("unknown environment `{other}`"))),
        }
    }

    pub fn from_affine_spec(spec: &AffineSpec) -> Result<Self> {
        let a = matrix::<S>(&spec.a, "A")?;
        let b = matrix::<S>(&spec.b, "B")?;
        let e = match &spec.noise_scale {
            NoiseScale::Diagonal(d) => {
                let mut e = Array2::zeros((d.len(), d.len()));
                for (i, &v) in d.iter().enumerate() {
                    e[(i, i)] = S::lit(v);
                }
                e
            }
            NoiseScale::Matrix(m) => matrix::<S>(m, "noise_scale")?,
        };
        let dyn_ = AffineDynamics::new(a, b, e)?;
        let noise = spec.noise.clone().unwrap_or(NoiseSpec::Triangular {
            dim: Dynamics::<S>::noise_dim(&dyn_),
        });
        Self::new(
            spec.id.clone(),
            Arc::new(dyn_),
            boxed(&spec.bounds, "bounds")?,
            spec.excluded_boxes
                .iter()
                .map(|b| boxed(b, "excluded_boxes"))
                .collect::<Result<_>>()?,
            boxed(&spec.target_box, "target_box")?,
            noise,
            spec.reward.unwrap_or(RewardMode::Indicator),
        )
    }

    pub fn from_affine_spec_json(json: &str) -> Result<Self> {
        Self::from_affine_spec(&serde_json::from_str(json)?)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dynamics(&self) -> &dyn Dynamics<S> {
        self.dynamics.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.dynamics.action_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.dynamics.noise_dim()
    }

    pub fn state_space(&self) -> &IntervalBox<S> {
        &self.state_space
    }

    /// Boxes whose union is `𝒳 \ 𝒳_s` (up to boundaries).
    pub fn excluded(&self) -> &[IntervalBox<S>] {
        &self.excluded
    }

    pub fn target(&self) -> &IntervalBox<S> {
        &self.target
    }

    pub fn action_bounds(&self) -> &IntervalBox<S> {
        &self.action_bounds
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn reward_mode(&self) -> RewardMode {
        self.reward
    }

    pub fn lipschitz(&self) -> S {
        self.l_f
    }

    /// The action saturation `g`.
    pub fn clamp_action(&self, u: &mut [S]) {
        self.action_bounds.clamp_point(u);
    }

    /// One transition: clamp the action, apply `f`, clip the result into `𝒳`.
    pub fn step(&self, x: &[S], u: &[S], w: &[S]) -> Result<Vec<S>> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("SystemModel::step (state)", self.state_dim(), x.len()));
        }
        if u.len() != self.action_dim() {
            return Err(Error::dims("SystemModel::step (action)", self.action_dim(), u.len()));
        }
        if w.len() != self.noise_dim() {
            return Err(Error::dims("SystemModel::step (noise)", self.noise_dim(), w.len()));
        }
        if x.iter().chain(u).chain(w).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("SystemModel::step input".into()));
        }
        let mut out = vec![S::zero(); self.state_dim()];
        self.step_into(x, u, w, &mut out);
        Ok(out)
    }

    /// Unchecked [`SystemModel::step`] writing into `out`.
    pub fn step_into(&self, x: &[S], u: &[S], w: &[S], out: &mut [S]) {
        let mut buf = [S::zero(); 8];
        let mut heap;
        let g: &mut [S] = if u.len() <= buf.len() {
            &mut buf[..u.len()]
        } else {
            heap = vec![S::zero(); u.len()];
            &mut heap
        };
        g.copy_from_slice(u);
        self.clamp_action(g);
        self.dynamics.step_raw(x, g, w, out);
        self.state_space.clamp_point(out);
    }

    /// Sound enclosure of the clipped successor over boxes of states, actions and noise.
    pub fn step_bounds(&self, x: &IntervalBox<S>, u: &IntervalBox<S>, w: &IntervalBox<S>) -> Result<IntervalBox<S>> {
        let g = self.action_bounds.clamp_box(u);
        Ok(self.state_space.clamp_box(&self.dynamics.step_bounds(x, &g, w)?))
    }

    /// Sound enclosure of `{f(x, π(x), ω) : x ∈ states, ω ∈ noise}`.
    pub fn dynamics_bounds(
        &self,
        policy: &dyn Policy<S>,
        states: &IntervalBox<S>,
        noise: &IntervalBox<S>,
    ) -> Result<IntervalBox<S>> {
        if states.dim() != self.state_dim() {
            return Err(Error::dims("dynamics_bounds (state)", self.state_dim(), states.dim()));
        }
        if noise.dim() != self.noise_dim() {
            return Err(Error::dims("dynamics_bounds (noise)", self.noise_dim(), noise.dim()));
        }
        let u = policy.act_bounds(states)?;
        self.step_bounds(states, &u, noise)
    }

    /// Gradient of `upstreamᵀ step(x, u, ω)` with respect to the unclamped action `u`.
    ///
    /// Saturated action components and clipped state components pass no gradient.
    pub fn action_vjp(&self, x: &[S], u: &[S], w: &[S], upstream: &[S]) -> Vec<S> {
        let mut g = u.to_vec();
        self.clamp_action(&mut g);
        let mut raw = vec![S::zero(); self.state_dim()];
        self.dynamics.step_raw(x, &g, w, &mut raw);
        let up: Vec<S> = raw
            .iter()
            .zip(upstream)
            .zip(self.state_space.iter())
            .map(|((&r, &gr), iv)| if iv.contains(r) { gr } else { S::zero() })
            .collect();
        let (_, gu) = self.dynamics.vjp(x, &g, w, &up);
        gu.into_iter()
            .zip(u)
            .zip(self.action_bounds.iter())
            .map(|((gi, &ui), iv)| if ui > iv.lo && ui < iv.hi { gi } else { S::zero() })
            .collect()
    }

    pub fn membership(&self, x: &[S]) -> Membership {
        let in_x = self.state_space.contains(x);
        Membership {
            in_x,
            in_xs: in_x && !self.excluded.iter().any(|b| b.contains(x)),
            in_t: self.target.contains(x),
        }
    }

    pub fn in_stabilizing_set(&self, x: &[S]) -> bool {
        self.membership(x).in_xs
    }

    pub fn reward(&self, x: &[S]) -> S {
        match self.reward {
            RewardMode::Indicator => {
                if self.in_stabilizing_set(x) {
                    S::one()
                } else {
                    S::zero()
                }
            }
            RewardMode::PendulumQuadratic => S::one() - x[0] * x[0] - S::lit(0.1) * x[1] * x[1],
        }
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        sample_box(&self.state_space, rng)
    }

    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        sample_box(&self.target, rng)
    }

    /// Uniform sample from `𝒳 \ 𝒳_s`, or `None` when it is empty.
    pub fn sample_complement<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<S>> {
        let vols: Vec<f64> = self.excluded.iter().map(|b| b.volume().as_f64()).collect();
        let total: f64 = vols.iter().sum();
        if self.excluded.is_empty() || total <= 0.0 {
            return None;
        }
        loop {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = self.excluded.len() - 1;
            for (i, v) in vols.iter().enumerate() {
                if t < *v {
                    pick = i;
                    break;
                }
                t -= v;
            }
            let x = sample_box(&self.excluded[pick], rng);
            let covering = self.excluded.iter().filter(|b| b.contains(&x)).count().max(1);
            if covering == 1 || rng.gen::<f64>() * covering as f64 <= 1.0 {
                return Some(x);
            }
        }
    }
}

pub fn sample_box<S: Scalar, R: Rng + ?Sized>(b: &IntervalBox<S>, rng: &mut R) -> Vec<S> {
    b.iter()
        .map(|iv| iv.lo + iv.width() * S::lit(rng.gen::<f64>()))
        .collect()
}
