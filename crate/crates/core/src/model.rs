//! Parametrized discrete-time systems and the bearing-only single-integrator scenario.
//!
//! A [`SystemModel`] bundles the dynamics `x+ = f(x, u, p)`, the observation map
//! `y = h(x, p)` and its parameter Jacobian. The estimator, the Grammian and the
//! controller only ever talk to a model through this trait.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance below which a bearing is considered undefined.
pub const SINGULARITY_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("singular observation: state is {distance:e} away from the landmark")]
    SingularObservation { distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_p: usize,
    pub n_y: usize,
}

/// The closed convex parameter set `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSet {
    #[default]
    Unbounded,
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ParamSet {
    pub fn is_bounded(&self) -> bool {
        matches!(self, ParamSet::Box { .. })
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        match self {
            ParamSet::Unbounded => true,
            ParamSet::Box { lower, upper } => p
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, p: &DVector<f64>) -> DVector<f64> {
        match self {
            ParamSet::Unbounded => p.clone(),
            ParamSet::Box { lower, upper } => DVector::from_iterator(
                p.len(),
                p.iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
            ),
        }
    }
}

/// Contract a scenario implements to plug into the estimation/control loop.
pub trait SystemModel: Send + Sync {
    fn dims(&self) -> Dims;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    fn observe(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// `n_y x n_p` Jacobian of [`SystemModel::observe`] with respect to the parameter.
    fn jac_obs_p(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>, ModelError>;

    /// Sensitivity block `N_k` (`n_p x m`) whose outer product `N_k N_k^T` is the
    /// step's contribution to the observability Grammian. Defaults to the
    /// transposed observation Jacobian.
    fn sensitivity(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.jac_obs_p(x, p)?.transpose())
    }

    /// Radius of the admissible input ball `U`.
    fn input_radius(&self) -> f64;

    fn param_set(&self) -> &ParamSet;

    /// Whether `dynamics` actually reads `p`. When it does, the estimator
    /// re-simulates the window under each candidate parameter.
    fn dynamics_depend_on_param(&self) -> bool {
        false
    }
}

/// Projects `u` onto the closed ball of radius `radius`.
pub fn project_input(u: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = u.norm();
    if n <= radius {
        u.clone()
    } else {
        u * (radius / n)
    }
}

/// Bounded observation noise: uniform on the closed `nu`-ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub nu: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { nu: 0.03, seed: 0 }
    }
}

/// Draws the `index`-th disturbance of the stream identified by `spec.seed`.
///
/// Each `(seed, index)` pair maps to its own ChaCha stream, so a draw never
/// depends on how many draws came before it.
pub fn draw_noise(spec: &NoiseSpec, dim: usize, index: u64) -> DVector<f64> {
    assert!(dim >= 1, "noise dimension must be positive");
    if spec.nu == 0.0 {
        return DVector::zeros(dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut n = dir.norm();
    while n == 0.0 {
        dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        n = dir.norm();
    }
    let radius = spec.nu * rng.random::<f64>().powf(1.0 / dim as f64);
    let mut v = dir * (radius / n);
    // rounding can push the norm one ulp past the ball
    let vn = v.norm();
    if vn > spec.nu {
        v *= spec.nu / vn;
    }
    v
}

/// Parameters of the single-integrator bearing-only landmark scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BearingScenario {
    /// True landmark position.
    pub p_true: [f64; 2],
    /// Sampling period.
    pub delta: f64,
    /// Initial robot position.
    pub x0: [f64; 2],
    /// Radius of the admissible velocity ball.
    pub u_max: f64,
}

impl Default for BearingScenario {
    fn default() -> Self {
        Self {
            p_true: [5.0, 8.0],
            delta: 0.1,
            x0: [5.0, 10.0],
            u_max: 2.0,
        }
    }
}

impl BearingScenario {
    pub fn model(&self) -> BearingModel {
        BearingModel::new(self.delta, self.u_max)
    }

    pub fn p_true(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.p_true)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }
}

/// `x+ = x + delta * u`; the parameter does not enter the dynamics.
pub fn bearing_dynamics(x: &Vector2<f64>, u: &Vector2<f64>, delta: f64) -> Vector2<f64> {
    x + u * delta
}

/// Unit vector pointing from the robot at `x` to the landmark at `p`.
pub fn bearing_observe(x: &Vector2<f64>, p: &Vector2<f64>) -> Result<Vector2<f64>, ModelError> {
    let d = p - x;
    let distance = d.norm();
    if distance < SINGULARITY_GUARD {
        return Err(ModelError::SingularObservation { distance });
    }
    Ok(d / distance)
}

/// Jacobian of [`bearing_observe`] with respect to the landmark: `(I - b b^T) / |p - x|`.
pub fn bearing_jac_p(x: &Vector2<f64>, p: &Vector2<f64>) -> Result<Matrix2<f64>, ModelError> {
    let d = p - x;
    let distance = d.norm();
    if distance < SINGULARITY_GUARD {
        return Err(ModelError::SingularObservation { distance });
    }
    let b = d / distance;
    Ok((Matrix2::identity() - b * b.transpose()) / distance)
}

/// Tangential sensitivity `H(x, p) = [x2 - p2, -(x1 - p1)] / |x - p|^2`.
///
/// `H H^T` equals `J^T J` for the Jacobian of [`bearing_jac_p`].
pub fn bearing_tangent(x: &Vector2<f64>, p: &Vector2<f64>) -> Result<Vector2<f64>, ModelError> {
    let d = x - p;
    let n2 = d.norm_squared();
    if n2.sqrt() < SINGULARITY_GUARD {
        return Err(ModelError::SingularObservation { distance: n2.sqrt() });
    }
    Ok(Vector2::new(d[1], -d[0]) / n2)
}

fn v2(v: &DVector<f64>) -> Vector2<f64> {
    debug_assert_eq!(v.len(), 2);
    Vector2::new(v[0], v[1])
}

fn dv(v: Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// [`SystemModel`] view of the bearing scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingModel {
    pub delta: f64,
    pub u_max: f64,
    pub param_set: ParamSet,
}

impl BearingModel {
    pub fn new(delta: f64, u_max: f64) -> Self {
        Self {
            delta,
            u_max,
            param_set: ParamSet::Unbounded,
        }
    }
}

impl SystemModel for BearingModel {
    fn dims(&self) -> Dims {
        Dims {
            n_x: 2,
            n_u: 2,
            n_p: 2,
            n_y: 2,
        }
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        dv(bearing_dynamics(&v2(x), &v2(u), self.delta))
    }

    fn observe(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        bearing_observe(&v2(x), &v2(p)).map(dv)
    }

    fn jac_obs_p(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let j = bearing_jac_p(&v2(x), &v2(p))?;
        Ok(DMatrix::from_column_slice(2, 2, j.as_slice()))
    }

    fn sensitivity(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let h = bearing_tangent(&v2(x), &v2(p))?;
        Ok(DMatrix::from_column_slice(2, 1, h.as_slice()))
    }

    fn input_radius(&self) -> f64 {
        self.u_max
    }

    fn param_set(&self) -> &ParamSet {
        &self.param_set
    }
}
