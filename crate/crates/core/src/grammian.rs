//! Observability Grammian `O = sum_k N_k N_k^T` and its realized/predicted split.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::MeasurementWindow;
use crate::model::{ModelError, SystemModel};

/// Asymmetry tolerated by [`min_eigenvalue`].
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Negative eigenvalues down to this magnitude are reported as zero.
pub const PSD_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammianError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("empty measurement window")]
    EmptyWindow,
}

fn outer_sum<'a>(
    model: &dyn SystemModel,
    p: &DVector<f64>,
    states: impl IntoIterator<Item = &'a DVector<f64>>,
) -> Result<DMatrix<f64>, ModelError> {
    let n_p = p.len();
    let mut o = DMatrix::zeros(n_p, n_p);
    for x in states {
        let n = model.sensitivity(x, p)?;
        o += &n * n.transpose();
    }
    Ok(o)
}

/// Grammian of a window of states at parameter `p`.
pub fn grammian_full(
    model: &dyn SystemModel,
    p: &DVector<f64>,
    states: &[DVector<f64>],
) -> Result<DMatrix<f64>, ModelError> {
    outer_sum(model, p, states)
}

/// Realized part `Gamma` of the one-step-ahead Grammian, plus what is needed
/// to evaluate the predicted term `S_f(p, x_t, u)` for any candidate input.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammianSplit {
    pub gamma: DMatrix<f64>,
    pub p: DVector<f64>,
    /// Latest measured state `x_t`, from which the next state is predicted.
    pub current_state: DVector<f64>,
}

impl GrammianSplit {
    /// Predicted contribution of the next state `f(x_t, u, p)`.
    pub fn predicted(&self, model: &dyn SystemModel, u: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let next = model.dynamics(&self.current_state, u, &self.p);
        self.predicted_at(model, &next)
    }

    pub fn predicted_at(&self, model: &dyn SystemModel, next: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let n = model.sensitivity(next, &self.p)?;
        Ok(&n * n.transpose())
    }

    /// `Gamma + S_f(p, x_t, u)`: the Grammian over the shifted horizon.
    pub fn assembled(&self, model: &dyn SystemModel, u: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        Ok(&self.gamma + self.predicted(model, u)?)
    }
}

/// Splits the Grammian over the horizon `[t-L+2, t+1]`.
///
/// `gamma` sums the most recent `L - 1` measured states; on a full window that
/// drops exactly the oldest sample. Partially filled windows keep all samples.
pub fn split(
    model: &dyn SystemModel,
    p: &DVector<f64>,
    window: &MeasurementWindow,
) -> Result<GrammianSplit, GrammianError> {
    let current_state = window.latest_state().ok_or(GrammianError::EmptyWindow)?.clone();
    let keep = window.len().min(window.capacity() - 1);
    let skip = window.len() - keep;
    let gamma = outer_sum(model, p, window.states().iter().skip(skip))?;
    Ok(GrammianSplit {
        gamma,
        p: p.clone(),
        current_state,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
///
/// Uses the closed form for `2 x 2` and a symmetric eigensolver otherwise.
/// Values in `[-PSD_CLAMP, 0)` are clamped to zero.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, GrammianError> {
    assert!(m.is_square(), "min_eigenvalue needs a square matrix");
    let asym = (m - m.transpose()).amax();
    let scale = m.amax().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(GrammianError::NotSymmetric(asym));
    }
    let lam = match m.nrows() {
        0 => return Ok(0.0),
        1 => m[(0, 0)],
        2 => {
            let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
            let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
            let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            // (tr/2)^2 - det written without cancellation
            half_tr - half_diff.hypot(off)
        }
        _ => {
            let sym = (m + m.transpose()) * 0.5;
            sym.symmetric_eigenvalues().min()
        }
    };
    if (-PSD_CLAMP..0.0).contains(&lam) {
        Ok(0.0)
    } else {
        Ok(lam)
    }
}

/// Observability level of an assembled Grammian against a required level.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    pub lambda_min: f64,
    pub matrix: DMatrix<f64>,
    pub level_ok: bool,
}

impl ObservabilityReport {
    pub fn new(matrix: DMatrix<f64>, delta_prime: f64) -> Result<Self, GrammianError> {
        let lambda_min = min_eigenvalue(&matrix)?;
        Ok(Self {
            lambda_min,
            level_ok: lambda_min >= delta_prime,
            matrix,
        })
    }
}
