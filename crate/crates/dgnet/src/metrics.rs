//! Evaluation metrics for derivative fields and long-term predictions.
//!
//! All values are per-element mean squared errors, so they are invariant to
//! trajectory ordering and directly comparable across splits of equal shape.

use serde::Serialize;

use crate::data::Trajectory;
use crate::integrators::{rollout, Result as IntResult, StepperConfig};
use crate::systems::System;
use crate::tensor::{Result, Tensor, TensorError};

/// Metric bundle mirroring the benchmark tables.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    pub deriv_mse: Option<f64>,
    pub energy_mse: Option<f64>,
    pub mass_mse: Option<f64>,
    pub diff_mse: Option<f64>,
    /// Per-trajectory energy MSE breakdown, prediction order.
    pub per_trajectory_energy: Vec<f64>,
}

/// MSE between the model's derivative field and the true one over all states
/// of the given trajectories.
pub fn metric_deriv_mse(
    model: &dyn System,
    truth: &dyn System,
    trajectories: &[Trajectory],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for traj in trajectories {
        for s in &traj.states {
            let a = model.rhs(s)?;
            let b = truth.rhs(s)?;
            let d = a.sub(&b)?;
            acc += d.as_slice().iter().map(|x| x * x).sum::<f64>();
            count += d.numel();
        }
    }
    if count == 0 {
        return Err(TensorError::Invalid("no states to evaluate".into()));
    }
    Ok(acc / count as f64)
}

/// MSE of a scalar energy evaluated along predicted vs. true trajectories.
pub fn metric_energy_mse(
    predicted: &Trajectory,
    truth: &Trajectory,
    energy: &dyn Fn(&Tensor) -> f64,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "trajectory lengths {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len();
    if n == 0 {
        return Err(TensorError::Invalid("empty trajectories".into()));
    }
    let mut acc = 0.0;
    for (p, t) in predicted.states.iter().zip(truth.states.iter()) {
        let d = energy(p) - energy(t);
        acc += d * d;
    }
    Ok(acc / n as f64)
}

/// MSE of the total mass `Σuₖ·Δx` along predicted vs. true trajectories.
pub fn metric_mass_mse(predicted: &Trajectory, truth: &Trajectory, dx: f64) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "trajectory lengths {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len();
    if n == 0 {
        return Err(TensorError::Invalid("empty trajectories".into()));
    }
    let mut acc = 0.0;
    for (p, t) in predicted.states.iter().zip(truth.states.iter()) {
        let d = (p.sum() - t.sum()) * dx;
        acc += d * d;
    }
    Ok(acc / n as f64)
}

/// One-step prediction MSE: the model is stepped from every observed state
/// and compared against the next observation.
pub fn metric_diff_mse(
    model: &dyn System,
    stepper: &StepperConfig,
    trajectories: &[Trajectory],
) -> IntResult<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for traj in trajectories {
        for (u, u_next, dt) in traj.pairs() {
            let pred = one_step(model, stepper, u, dt)?;
            let d = pred.sub(u_next).map_err(crate::integrators::IntegratorError::Tensor)?;
            acc += d.as_slice().iter().map(|x| x * x).sum::<f64>();
            count += d.numel();
        }
    }
    if count == 0 {
        return Err(crate::integrators::IntegratorError::Unsupported(
            "no state pairs to evaluate".into(),
        ));
    }
    Ok(acc / count as f64)
}

/// Single step of any stepper kind over `[0, dt]`.
pub fn one_step(
    model: &dyn System,
    stepper: &StepperConfig,
    u: &Tensor,
    dt: f64,
) -> IntResult<Tensor> {
    let r = rollout(stepper, model, u, &[0.0, dt])?;
    Ok(r.trajectory.states.into_iter().nth(1).unwrap())
}
