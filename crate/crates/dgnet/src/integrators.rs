//! Time steppers.
//!
//! Explicit: midpoint (RK2), adaptive Dormand–Prince 5(4), leapfrog for
//! separable Hamiltonians. Implicit: the discrete-gradient scheme
//! `u' = u + dt·G·∇̄H(u', u)`, solved per step by fixed-point iteration with
//! a Newton fallback. With a skew `G` the scheme conserves the energy up to
//! the solver tolerance; with `G ≤ 0` it dissipates; with `1ᵀG = 0` it
//! conserves the total mass.

use thiserror::Error;

use crate::data::Trajectory;
use crate::systems::System;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite right-hand side at step {step}")]
    NonFiniteRhs { step: usize },
    #[error("nonlinear solver stalled at step {step}: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("step size underflow at t = {t}: h = {h:.3e} (stiff problem?)")]
    StepUnderflow { t: f64, h: f64 },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, IntegratorError>;

/// Nonlinear solver for the implicit scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolverKind {
    /// Picard iteration on `w ← u + dt·G·∇̄H(w, u)`, Newton fallback when it
    /// stops contracting.
    FixedPoint,
    /// Newton with a finite-difference Jacobian of the fixed-point map.
    NewtonFd,
}

#[derive(Debug, Clone, Copy)]
pub struct DgSolverConfig {
    pub kind: SolverKind,
    /// Convergence bound on the residual ∞-norm and on the energy defect.
    pub tol: f64,
    pub max_iter: usize,
}

impl DgSolverConfig {
    pub fn defaults(precision: crate::tensor::Precision) -> Self {
        DgSolverConfig {
            kind: SolverKind::FixedPoint,
            tol: match precision {
                crate::tensor::Precision::Single => 1e-5,
                crate::tensor::Precision::Double => 1e-10,
            },
            max_iter: 100,
        }
    }
}

/// Stepper selection with its fixed parameters.
#[derive(Debug, Clone)]
pub enum StepperConfig {
    Rk2 {
        dt: f64,
    },
    DopriAdaptive {
        rtol: f64,
        atol: f64,
        min_step: f64,
        max_step: f64,
    },
    Leapfrog {
        dt: f64,
    },
    DiscreteGradient {
        dt: f64,
        solver: DgSolverConfig,
    },
}

impl StepperConfig {
    pub fn dopri_defaults(precision: crate::tensor::Precision) -> Self {
        let tol = match precision {
            crate::tensor::Precision::Single => 1e-6,
            crate::tensor::Precision::Double => 1e-9,
        };
        StepperConfig::DopriAdaptive {
            rtol: tol,
            atol: tol,
            min_step: 1e-14,
            max_step: f64::INFINITY,
        }
    }
}

/// Per-step solver/controller diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiag {
    pub iterations: usize,
    pub residual: f64,
    pub rejected_steps: usize,
}

/// A computed trajectory plus per-step diagnostics.
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<StepDiag>,
}

/// One explicit-midpoint step: `u + dt·f(u + dt/2·f(u))`.
pub fn step_rk2(
    rhs: &dyn Fn(&Tensor) -> TensorResult<Tensor>,
    u: &Tensor,
    dt: f64,
) -> Result<Tensor> {
    let k1 = rhs(u)?;
    if !k1.all_finite() {
        return Err(IntegratorError::NonFiniteRhs { step: 0 });
    }
    let mid = u.add_scaled(0.5 * dt, &k1)?;
    let k2 = rhs(&mid)?;
    if !k2.all_finite() {
        return Err(IntegratorError::NonFiniteRhs { step: 0 });
    }
    Ok(u.add_scaled(dt, &k2)?)
}

/// One kick-drift-kick leapfrog step for a separable Hamiltonian given the
/// two gradient callbacks `dV = ∇_q V` and `dT = ∇_p T`.
pub fn step_leapfrog(
    dv: &dyn Fn(&Tensor) -> TensorResult<Tensor>,
    dt_grad: &dyn Fn(&Tensor) -> TensorResult<Tensor>,
    q: &Tensor,
    p: &Tensor,
    dt: f64,
) -> Result<(Tensor, Tensor)> {
    let p_half = p.add_scaled(-0.5 * dt, &dv(q)?)?;
    let q_new = q.add_scaled(dt, &dt_grad(&p_half)?)?;
    let p_new = p_half.add_scaled(-0.5 * dt, &dv(&q_new)?)?;
    Ok((q_new, p_new))
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `du/dt = rhs(u)` with the adaptive Dormand–Prince 5(4) pair and
/// PI step-size control, producing the solution at every requested sample
/// time (`sample_times[0]` is the initial time). Steps are shortened to land
/// exactly on sample times.
pub fn integrate_dopri(
    rhs: &dyn Fn(&Tensor) -> TensorResult<Tensor>,
    u0: &Tensor,
    sample_times: &[f64],
    rtol: f64,
    atol: f64,
    min_step: f64,
    max_step: f64,
) -> Result<(Vec<Tensor>, StepDiag)> {
    if sample_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IntegratorError::Unsupported(
            "sample times must be strictly increasing".into(),
        ));
    }
    let mut states = Vec::with_capacity(sample_times.len());
    states.push(u0.clone());
    if sample_times.len() == 1 {
        return Ok((states, StepDiag::default()));
    }
    let mut t = sample_times[0];
    let mut u = u0.clone();
    let mut k1 = rhs(&u)?;
    let mut rejected = 0usize;
    let mut accepted = 0usize;
    // Initial step guess from the first derivative scale.
    let span = sample_times[sample_times.len() - 1] - t;
    let mut h = (0.01 * span).min(max_step).max(min_step);
    let mut err_prev: f64 = 1.0;
    let safety = 0.9;
    // PI controller exponents for a 5th/4th embedded pair.
    let k_i = 0.7 / 5.0;
    let k_p = 0.4 / 5.0;

    let mut next_sample = 1;
    let t_end = sample_times[sample_times.len() - 1];
    let mut k = vec![k1.clone(); 7];
    while t < t_end - 1e-14 * t_end.abs().max(1.0) {
        let target = sample_times[next_sample];
        let mut h_try = h.min(max_step).max(min_step);
        if t + h_try > target {
            h_try = target - t; // land exactly on the sample time
        }
        k[0] = k1.clone();
        for s in 1..7 {
            let mut y = u.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    y = y.add_scaled(h_try * a, kj)?;
                }
            }
            k[s] = rhs(&y)?;
            if !k[s].all_finite() {
                return Err(IntegratorError::NonFiniteRhs { step: accepted });
            }
        }
        let mut u5 = u.clone();
        let mut u4 = u.clone();
        for s in 0..7 {
            if DP_B5[s] != 0.0 {
                u5 = u5.add_scaled(h_try * DP_B5[s], &k[s])?;
            }
            if DP_B4[s] != 0.0 {
                u4 = u4.add_scaled(h_try * DP_B4[s], &k[s])?;
            }
        }
        // Weighted RMS error norm.
        let mut err_sq = 0.0;
        let n = u.numel();
        for i in 0..n {
            let sc = atol + rtol * u.as_slice()[i].abs().max(u5.as_slice()[i].abs());
            let e = (u5.as_slice()[i] - u4.as_slice()[i]) / sc;
            err_sq += e * e;
        }
        let err = (err_sq / n as f64).sqrt().max(1e-30);
        if err <= 1.0 {
            t += h_try;
            u = u5;
            k1 = k[6].clone(); // FSAL
            accepted += 1;
            if (t - target).abs() <= 1e-12 * target.abs().max(1.0) {
                states.push(u.clone());
                next_sample += 1;
                if next_sample >= sample_times.len() {
                    break;
                }
            }
            let fac = safety * err.powf(-k_i) * err_prev.powf(k_p);
            h = (h_try * fac.clamp(0.2, 10.0)).min(max_step);
            err_prev = err;
        } else {
            rejected += 1;
            let fac = safety * err.powf(-0.2);
            h = h_try * fac.clamp(0.2, 1.0);
            if h < min_step {
                return Err(IntegratorError::StepUnderflow { t, h });
            }
        }
        if h < min_step {
            h = min_step;
        }
    }
    Ok((
        states,
        StepDiag {
            iterations: accepted,
            residual: 0.0,
            rejected_steps: rejected,
        },
    ))
}

/// One implicit discrete-gradient step.
///
/// Solves `w = u + dt·G·∇̄H(w, u)` starting from the explicit predictor
/// `u + dt·G∇H(u)`. Convergence requires both the residual ∞-norm and the
/// induced one-step energy defect `|∇̄H·r|` to fall below `tol`, so the
/// conservation/dissipation bounds inherit the solver tolerance directly.
pub fn step_discrete_gradient(
    system: &dyn System,
    u: &Tensor,
    dt: f64,
    solver: &DgSolverConfig,
) -> Result<(Tensor, StepDiag)> {
    let gspec = system.gspec().ok_or_else(|| {
        IntegratorError::Unsupported("discrete-gradient stepper needs a structure operator".into())
    })?;
    if dt == 0.0 {
        return Ok((
            u.clone(),
            StepDiag {
                iterations: 1,
                residual: 0.0,
                rejected_steps: 0,
            },
        ));
    }
    let predictor = {
        let r = system.rhs(u)?;
        if !r.all_finite() {
            return Err(IntegratorError::NonFiniteRhs { step: 0 });
        }
        u.add_scaled(dt, &r)?
    };
    // F(w) = u + dt·G·∇̄H(w, u) − w; residual r = F(w).
    let eval = |w: &Tensor| -> Result<(Tensor, Tensor)> {
        let dg = system.discrete_grad(w, u)?;
        let gdg = gspec.apply(&dg)?;
        let fw = u.add_scaled(dt, &gdg)?;
        Ok((fw.sub(w)?, dg))
    };

    let mut w = predictor;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    if solver.kind == SolverKind::FixedPoint {
        while iterations < solver.max_iter {
            let (r, dg) = eval(&w)?;
            iterations += 1;
            let rn = r.norm_inf();
            let defect = dg.dot(&r).map(f64::abs).unwrap_or(f64::INFINITY);
            if rn <= solver.tol && defect <= solver.tol {
                return Ok((
                    w,
                    StepDiag {
                        iterations,
                        residual: rn,
                        rejected_steps: 0,
                    },
                ));
            }
            history.push(rn);
            // Newton fallback once Picard stops contracting.
            let stalled = history.len() >= 20 && {
                let recent = history[history.len() - 1];
                let old = history[history.len() - 10];
                recent > 0.5 * old
            };
            if stalled {
                break;
            }
            w = w.add(&r)?; // w ← F(w) + w − w = u + dt·G·∇̄H(w,u)
        }
        if iterations >= solver.max_iter {
            let (r, _) = eval(&w)?;
            return Err(IntegratorError::NonConvergence {
                step: 0,
                iterations,
                residual: r.norm_inf(),
            });
        }
    }

    // Newton with a finite-difference Jacobian of w ↦ dt·G·∇̄H(w, u).
    let n = u.numel();
    let fd_h = system.precision().epsilon().sqrt();
    while iterations < solver.max_iter {
        let (r, dg) = eval(&w)?;
        iterations += 1;
        let rn = r.norm_inf();
        let defect = dg.dot(&r).map(f64::abs).unwrap_or(f64::INFINITY);
        if rn <= solver.tol && defect <= solver.tol {
            return Ok((
                w,
                StepDiag {
                    iterations,
                    residual: rn,
                    rejected_steps: 0,
                },
            ));
        }
        // J = ∂F/∂w = dt·G·∂∇̄H/∂w − I, column by column.
        let mut jac = vec![0.0; n * n];
        let base = {
            let dg = system.discrete_grad(&w, u)?;
            gspec.apply(&dg)?
        };
        for j in 0..n {
            let hj = fd_h * w.as_slice()[j].abs().max(1.0);
            let mut wp = w.to_vec();
            wp[j] += hj;
            let wp = Tensor::from_raw(w.shape().to_vec(), wp, w.precision());
            let dgp = system.discrete_grad(&wp, u)?;
            let gp = gspec.apply(&dgp)?;
            for i in 0..n {
                jac[i * n + j] = dt * (gp.as_slice()[i] - base.as_slice()[i]) / hj;
            }
            jac[j * n + j] -= 1.0;
        }
        // Solve J δ = −r, step w ← w + δ.
        let mut rhs_vec: Vec<f64> = r.as_slice().iter().map(|&x| -x).collect();
        solve_dense(&mut jac, &mut rhs_vec).map_err(|_| IntegratorError::NonConvergence {
            step: 0,
            iterations,
            residual: rn,
        })?;
        let delta = Tensor::from_raw(w.shape().to_vec(), rhs_vec, w.precision());
        w = w.add(&delta)?;
    }
    let (r, _) = eval(&w)?;
    let rn = r.norm_inf();
    Err(IntegratorError::NonConvergence {
        step: 0,
        iterations,
        residual: rn,
    })
}

/// Gaussian elimination with partial pivoting; `a` is row-major `n×n`,
/// overwritten; `b` becomes the solution.
pub(crate) fn solve_dense(a: &mut [f64], b: &mut [f64]) -> std::result::Result<(), ()> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Err(());
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for k in col + 1..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Drives a stepper over the sample grid `times` and records diagnostics.
///
/// Fixed-step kinds require `times` to be uniform with the configured `dt`;
/// the adaptive kind integrates between consecutive samples. Leapfrog
/// requires a plain symplectic structure and evaluates the two gradient
/// halves with the complementary variables zeroed (exact for separable
/// energies, the class it is specified for).
pub fn rollout(
    stepper: &StepperConfig,
    system: &dyn System,
    u0: &Tensor,
    times: &[f64],
) -> Result<RolloutResult> {
    if times.is_empty() {
        return Err(IntegratorError::Unsupported("empty time grid".into()));
    }
    let mut states = vec![u0.clone()];
    let mut diagnostics = Vec::new();
    match stepper {
        StepperConfig::Rk2 { .. } => {
            let rhs = |u: &Tensor| system.rhs(u);
            for w in times.windows(2) {
                let dt = w[1] - w[0];
                let next =
                    step_rk2(&rhs, states.last().unwrap(), dt).map_err(|e| at_step(e, states.len()))?;
                states.push(next);
                diagnostics.push(StepDiag {
                    iterations: 2,
                    residual: 0.0,
                    rejected_steps: 0,
                });
            }
        }
        StepperConfig::DopriAdaptive {
            rtol,
            atol,
            min_step,
            max_step,
        } => {
            let rhs = |u: &Tensor| system.rhs(u);
            let (s, diag) = integrate_dopri(&rhs, u0, times, *rtol, *atol, *min_step, *max_step)?;
            states = s;
            diagnostics = vec![diag; times.len().saturating_sub(1)];
        }
        StepperConfig::Leapfrog { .. } => {
            let half = match system.gspec().map(|g| &g.kind) {
                Some(crate::systems::GKind::Symplectic { half }) => *half,
                _ => {
                    return Err(IntegratorError::Unsupported(
                        "leapfrog requires a plain symplectic structure".into(),
                    ))
                }
            };
            let dim = system.dim();
            let precision = system.precision();
            let dv = |q: &Tensor| -> TensorResult<Tensor> {
                let mut full = q.to_vec();
                full.resize(dim, 0.0);
                let g = system.grad(&Tensor::from_raw(vec![dim], full, precision))?;
                Ok(Tensor::from_raw(
                    vec![half],
                    g.as_slice()[..half].to_vec(),
                    precision,
                ))
            };
            let dt_grad = |p: &Tensor| -> TensorResult<Tensor> {
                let mut full = vec![0.0; half];
                full.extend_from_slice(p.as_slice());
                let g = system.grad(&Tensor::from_raw(vec![dim], full, precision))?;
                Ok(Tensor::from_raw(
                    vec![half],
                    g.as_slice()[half..].to_vec(),
                    precision,
                ))
            };
            for w in times.windows(2) {
                let dt = w[1] - w[0];
                let cur = states.last().unwrap();
                let q = Tensor::from_raw(vec![half], cur.as_slice()[..half].to_vec(), precision);
                let p = Tensor::from_raw(vec![half], cur.as_slice()[half..].to_vec(), precision);
                let (q2, p2) =
                    step_leapfrog(&dv, &dt_grad, &q, &p, dt).map_err(|e| at_step(e, states.len()))?;
                let mut next = q2.to_vec();
                next.extend_from_slice(p2.as_slice());
                states.push(Tensor::from_raw(vec![dim], next, precision));
                diagnostics.push(StepDiag {
                    iterations: 3,
                    residual: 0.0,
                    rejected_steps: 0,
                });
            }
        }
        StepperConfig::DiscreteGradient { solver, .. } => {
            for w in times.windows(2) {
                let dt = w[1] - w[0];
                let (next, diag) = step_discrete_gradient(system, states.last().unwrap(), dt, solver)
                    .map_err(|e| at_step(e, states.len()))?;
                states.push(next);
                diagnostics.push(diag);
            }
        }
    }
    Ok(RolloutResult {
        trajectory: Trajectory::new(times.to_vec(), states),
        diagnostics,
    })
}

fn at_step(e: IntegratorError, step: usize) -> IntegratorError {
    match e {
        IntegratorError::NonConvergence {
            iterations,
            residual,
            ..
        } => IntegratorError::NonConvergence {
            step,
            iterations,
            residual,
        },
        IntegratorError::NonFiniteRhs { .. } => IntegratorError::NonFiniteRhs { step },
        other => other,
    }
}

/// Tape form of one RK2 step; `rhs` appends the derivative subgraph.
pub fn step_rk2_on_tape(
    tape: &mut Tape,
    rhs: &mut dyn FnMut(&mut Tape, NodeId) -> TensorResult<NodeId>,
    u: NodeId,
    dt: f64,
) -> TensorResult<NodeId> {
    let k1 = rhs(tape, u)?;
    let half = tape.scale(k1, 0.5 * dt);
    let mid = tape.add(u, half)?;
    let k2 = rhs(tape, mid)?;
    let inc = tape.scale(k2, dt);
    tape.add(u, inc)
}

/// Tape form of an adaptive Dormand–Prince integration over one interval
/// `[0, dt]`. Step-size decisions are made on detached values; gradients flow
/// through the accepted stages only.
pub fn integrate_dopri_on_tape(
    tape: &mut Tape,
    rhs: &mut dyn FnMut(&mut Tape, NodeId) -> TensorResult<NodeId>,
    u: NodeId,
    dt: f64,
    rtol: f64,
    atol: f64,
) -> TensorResult<NodeId> {
    let mut t = 0.0;
    let mut cur = u;
    let mut h = dt; // one training interval is short; start optimistic
    let min_step = dt * 1e-6;
    let mut guard = 0usize;
    while t < dt - 1e-14 * dt.abs().max(1.0) {
        if t + h > dt {
            h = dt - t;
        }
        let mut k: Vec<NodeId> = Vec::with_capacity(7);
        k.push(rhs(tape, cur)?);
        for s in 1..7 {
            let mut y = cur;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    let term = tape.scale(*kj, h * a);
                    y = tape.add(y, term)?;
                }
            }
            k.push(rhs(tape, y)?);
        }
        let mut u5 = cur;
        for s in 0..7 {
            if DP_B5[s] != 0.0 {
                let term = tape.scale(k[s], h * DP_B5[s]);
                u5 = tape.add(u5, term)?;
            }
        }
        // Error estimate on values only.
        let mut err_sq = 0.0;
        {
            let uv = tape.value(cur).clone();
            let u5v = tape.value(u5);
            let n = uv.numel();
            let mut u4 = uv.clone();
            for s in 0..7 {
                if DP_B4[s] != 0.0 {
                    u4 = u4.add_scaled(h * DP_B4[s], tape.value(k[s]))?;
                }
            }
            for i in 0..n {
                let sc = atol + rtol * uv.as_slice()[i].abs().max(u5v.as_slice()[i].abs());
                let e = (u5v.as_slice()[i] - u4.as_slice()[i]) / sc;
                err_sq += e * e;
            }
            err_sq = (err_sq / n as f64).max(1e-30);
        }
        let err = err_sq.sqrt();
        if err <= 1.0 {
            t += h;
            cur = u5;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            if h < min_step {
                return Err(TensorError::Invalid(
                    "adaptive step underflow inside training".into(),
                ));
            }
        }
        guard += 1;
        if guard > 10_000 {
            return Err(TensorError::Invalid(
                "adaptive integrator exceeded stage budget".into(),
            ));
        }
    }
    Ok(cur)
}
