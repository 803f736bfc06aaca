//! Discrete differentials and discrete gradients.
//!
//! A discrete gradient of `H` is a two-point map `∇̄H(u, v)` with
//! `H(u) − H(v) = ∇̄H(u, v)·(u − v)` and `∇̄H(u, u) = ∇H(u)`. For networks
//! built from linear layers and elementwise activations it is assembled by a
//! modified backward pass: linear layers contribute their ordinary transposed
//! Jacobians, activations contribute entrywise secant slopes
//! `(f(h) − f(k))/(h − k)`, switched to the midpoint derivative when the two
//! pre-activations are closer than `ε`. The whole construction is recorded on
//! the tape, so losses built on top of it can be differentiated with respect
//! to the model parameters by the ordinary reverse sweep.

use std::sync::Arc;

use crate::models::{EnergyModel, ForwardTrace, PlanStep, Activation};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Precision, Result, Tensor, TensorError};

/// Coincidence threshold for the secant rule: `1e-6` in single precision,
/// `1e-12` in double.
pub fn default_eps(precision: Precision) -> f64 {
    match precision {
        Precision::Single => 1e-6,
        Precision::Double => 1e-12,
    }
}

/// Entrywise secant slope `(f(h) − f(k))/(h − k)`, falling back to `f′` at
/// the midpoint where `|h − k| ≤ eps`. Value-level form.
pub fn secant_slope(h: &Tensor, k: &Tensor, act: Activation, eps: f64) -> Result<Tensor> {
    if h.shape() != k.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            h.shape(),
            k.shape()
        )));
    }
    let data = h
        .as_slice()
        .iter()
        .zip(k.as_slice().iter())
        .map(|(&a, &b)| {
            if (a - b).abs() > eps {
                (act.apply(a) - act.apply(b)) / (a - b)
            } else {
                act.derivative(0.5 * (a + b))
            }
        })
        .collect();
    Ok(Tensor::from_raw(h.shape().to_vec(), data, h.precision()))
}

/// Tape form of the secant slope. `fh`/`fk` are the already-recorded
/// activation outputs of `h`/`k`, so both branch values stay differentiable
/// and gradient flows only through the branch that was taken.
pub fn secant_slope_nodes(
    tape: &mut Tape,
    h: NodeId,
    k: NodeId,
    fh: NodeId,
    fk: NodeId,
    act: Activation,
    eps: f64,
) -> Result<NodeId> {
    let num = tape.sub(fh, fk)?;
    let den = tape.sub(h, k)?;
    let mask: Arc<Vec<bool>> = Arc::new(
        tape.value(den)
            .as_slice()
            .iter()
            .map(|d| d.abs() > eps)
            .collect(),
    );
    let shape = tape.value(den).shape().to_vec();
    let ones = tape.leaf(Tensor::ones(&shape, tape.precision()))?;
    // Keep the division singularity out of the inactive branch.
    let den_safe = tape.select(Arc::clone(&mask), den, ones)?;
    let far = tape.div(num, den_safe)?;
    let mid = {
        let s = tape.add(h, k)?;
        tape.scale(s, 0.5)
    };
    let near = match act {
        Activation::Tanh => {
            let t = tape.tanh(mid);
            let t2 = tape.mul(t, t)?;
            tape.affine(t2, -1.0, 1.0)
        }
        Activation::Identity => ones,
    };
    tape.select(mask, far, near)
}

/// Discrete product rule for an elementwise product `f·g` evaluated at two
/// points: `((g₁+g₂)/2)·d̄f + ((f₁+f₂)/2)·d̄g`. The returned slope satisfies
/// `f(x₁)g(x₁) − f(x₂)g(x₂) = rule · (x₁ − x₂)` exactly when `d̄f`, `d̄g` do.
pub fn discrete_product_rule(
    f_vals: (&Tensor, &Tensor),
    g_vals: (&Tensor, &Tensor),
    df: &Tensor,
    dg: &Tensor,
) -> Result<Tensor> {
    let g_avg = g_vals.0.add(g_vals.1)?.scale(0.5);
    let f_avg = f_vals.0.add(f_vals.1)?.scale(0.5);
    g_avg.mul(df)?.add(&f_avg.mul(dg)?)
}

/// Tape nodes produced by the discrete-gradient construction.
pub struct DgNodes {
    /// `∇̄H(u, v)` in the input layout (`[dim, B]` or `[1, B*n]`).
    pub dg: NodeId,
    /// Per-sample energies of the first argument, `[1, B]` row.
    pub h_u: NodeId,
    /// Per-sample energies of the second argument.
    pub h_v: NodeId,
}

/// Discrete gradient of one state pair, with the scalar energies.
pub struct DgResult {
    pub dg: Tensor,
    pub h_u: f64,
    pub h_v: f64,
}

/// Builds `∇̄H(u, v)` on `tape` for a packed batch. Two forward chains are
/// recorded, then the modified backward pass composes transposed linear
/// Jacobians with secant diagonals, seeded with ones.
pub fn discrete_gradient_nodes(
    tape: &mut Tape,
    model: &EnergyModel,
    params: &[NodeId],
    u: NodeId,
    v: NodeId,
    batch: usize,
    eps: f64,
) -> Result<DgNodes> {
    let trace_u = model.forward_batch(tape, u, params, batch)?;
    let trace_v = model.forward_batch(tape, v, params, batch)?;
    let seed = tape.leaf(Tensor::ones(&[1, batch], tape.precision()))?;
    let dg = match model.sub_plans() {
        Some((q_plan, p_plan)) => {
            let (sub_u, sub_v) = (trace_u.sub.as_ref().unwrap(), trace_v.sub.as_ref().unwrap());
            let dgq = chain_dg(tape, &q_plan, params, &sub_u.0, &sub_v.0, seed, batch, eps)?;
            let dgp = chain_dg(tape, &p_plan, params, &sub_u.1, &sub_v.1, seed, batch, eps)?;
            tape.concat_rows(dgq, dgp)?
        }
        None => {
            let plan = model.plan().expect("sequential architecture");
            chain_dg(tape, &plan, params, &trace_u, &trace_v, seed, batch, eps)?
        }
    };
    let h_u = as_row(tape, trace_u.output, batch)?;
    let h_v = as_row(tape, trace_v.output, batch)?;
    Ok(DgNodes { dg, h_u, h_v })
}

fn as_row(tape: &mut Tape, id: NodeId, batch: usize) -> Result<NodeId> {
    if tape.value(id).shape() == [1, batch] {
        Ok(id)
    } else {
        tape.reshape(id, vec![1, batch])
    }
}

/// Walks plan steps in reverse, composing the per-layer discrete Jacobians.
fn chain_dg(
    tape: &mut Tape,
    steps: &[PlanStep],
    params: &[NodeId],
    trace_u: &ForwardTrace,
    trace_v: &ForwardTrace,
    seed: NodeId,
    batch: usize,
    eps: f64,
) -> Result<NodeId> {
    let mut g = seed;
    for (i, step) in steps.iter().enumerate().rev() {
        let (in_u, in_v) = if i == 0 {
            (trace_u.input, trace_v.input)
        } else {
            (trace_u.steps[i - 1], trace_v.steps[i - 1])
        };
        g = match step {
            PlanStep::Linear { w, .. } => tape.matmul_tn(params[*w], g)?,
            PlanStep::Conv { kernel, .. } => {
                let kt = tape.kernel_transpose_flip(params[*kernel])?;
                tape.conv1d(kt, g, batch)?
            }
            PlanStep::Act(a) => {
                let slopes =
                    secant_slope_nodes(tape, in_u, in_v, trace_u.steps[i], trace_v.steps[i], *a, eps)?;
                tape.mul(slopes, g)?
            }
            PlanStep::SpatialSum { scale } => {
                let total = match tape.value(in_u).shape() {
                    [_, t] => *t,
                    [t] => *t,
                    _ => return Err(TensorError::ShapeMismatch("spatial sum input".into())),
                };
                let reps = total / batch;
                let scaled = tape.scale(g, *scale);
                tape.segment_broadcast(scaled, reps)?
            }
            PlanStep::FieldsToCols => {
                let (c, total) = match tape.value(in_u).shape() {
                    [c, t] => (*c, *t),
                    _ => return Err(TensorError::ShapeMismatch("flatten input".into())),
                };
                cols_to_fields(tape, g, c, total / batch, batch)?
            }
        };
    }
    Ok(g)
}

/// Inverse of the per-sample flatten: `[c*n, B] → [c, B*n]`.
fn cols_to_fields(tape: &mut Tape, g: NodeId, c: usize, n: usize, batch: usize) -> Result<NodeId> {
    if batch == 1 {
        return tape.reshape(g, vec![c, n]);
    }
    let total = batch * n;
    let mut acc: Option<NodeId> = None;
    for b in 0..batch {
        // Column b of g, reshaped to [c, n], scattered into block b.
        let mut pick = vec![0.0; batch];
        pick[b] = 1.0;
        let e = tape.leaf(Tensor::from_raw(vec![batch, 1], pick, tape.precision()))?;
        let col = tape.matmul(g, e)?; // [c*n, 1]
        let block = tape.reshape(col, vec![c, n])?;
        let mut scatter = vec![0.0; n * total];
        for i in 0..n {
            scatter[i * total + b * n + i] = 1.0;
        }
        let s = tape.leaf(Tensor::from_raw(vec![n, total], scatter, tape.precision()))?;
        let placed = tape.matmul(block, s)?; // [c, total]
        acc = Some(match acc {
            Some(a) => tape.add(a, placed)?,
            None => placed,
        });
    }
    acc.ok_or_else(|| TensorError::Invalid("empty batch".into()))
}

/// Discrete gradient of a model at one state pair. The computation lives on a
/// private tape; use [`discrete_gradient_nodes`] to build it inside a larger
/// graph (e.g. a training loss).
pub fn discrete_gradient(
    model: &EnergyModel,
    u: &Tensor,
    v: &Tensor,
    eps: Option<f64>,
) -> Result<DgResult> {
    let eps = eps.unwrap_or_else(|| default_eps(model.precision));
    let mut tape = Tape::new(model.precision);
    let params = model.register_params(&mut tape)?;
    let un = tape.leaf(model.batch_input(&[u])?)?;
    let vn = tape.leaf(model.batch_input(&[v])?)?;
    let nodes = discrete_gradient_nodes(&mut tape, model, &params, un, vn, 1, eps)?;
    let dg = tape.value(nodes.dg).reshaped(vec![model.state_dim()])?;
    Ok(DgResult {
        dg,
        h_u: tape.value(nodes.h_u).as_slice()[0],
        h_v: tape.value(nodes.h_v).as_slice()[0],
    })
}

/// Coordinate-wise discrete gradient built from `N + 1` energy evaluations:
/// component `i` is the difference quotient of `H` along the mixed states
/// `(v₁..vᵢ₋₁, uᵢ, uᵢ₊₁..)` and `(v₁..vᵢ, uᵢ₊₁..)`. Expensive but
/// independent of any network structure, which makes it the reference oracle
/// for the fast construction.
///
/// Coordinates with `|uᵢ − vᵢ| ≤ eps` use a central finite difference of `H`
/// at the mixed midpoint with step `eps^(1/2)`.
pub fn itoh_abe_gradient(
    h_fn: &dyn Fn(&Tensor) -> f64,
    u: &Tensor,
    v: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if u.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let n = u.numel();
    let precision = u.precision();
    let ud = u.as_slice();
    let vd = v.as_slice();
    let mut mixed = ud.to_vec();
    let mut h_prev = h_fn(u);
    let mut out = vec![0.0; n];
    let fd_step = eps.sqrt();
    for i in 0..n {
        // After this assignment `mixed` is (v₁..vᵢ, uᵢ₊₁..).
        let h_head = h_prev;
        mixed[i] = vd[i];
        let h_tail = h_fn(&Tensor::from_raw(u.shape().to_vec(), mixed.clone(), precision));
        if (ud[i] - vd[i]).abs() > eps {
            out[i] = (h_head - h_tail) / (ud[i] - vd[i]);
        } else {
            let mut probe = mixed.clone();
            let mid = 0.5 * (ud[i] + vd[i]);
            probe[i] = mid + fd_step;
            let hp = h_fn(&Tensor::from_raw(u.shape().to_vec(), probe.clone(), precision));
            probe[i] = mid - fd_step;
            let hm = h_fn(&Tensor::from_raw(u.shape().to_vec(), probe, precision));
            out[i] = (hp - hm) / (2.0 * fd_step);
        }
        h_prev = h_tail;
    }
    Ok(Tensor::from_raw(u.shape().to_vec(), out, precision))
}

/// Residuals of the two discrete-gradient conditions for a candidate map.
#[derive(Debug, Clone, Copy)]
pub struct DgCheck {
    /// `|H(u) − H(v) − ∇̄H(u,v)·(u − v)|`
    pub residual1: f64,
    /// `‖∇̄H(u,u) − ∇H(u)‖∞`
    pub residual2: f64,
}

/// Evaluates both defining conditions of a discrete gradient at `(u, v)`.
pub fn verify_dg_conditions(
    h_fn: &dyn Fn(&Tensor) -> f64,
    grad_fn: &dyn Fn(&Tensor) -> Tensor,
    dg_fn: &dyn Fn(&Tensor, &Tensor) -> Tensor,
    u: &Tensor,
    v: &Tensor,
) -> Result<DgCheck> {
    let dg = dg_fn(u, v);
    let diff = u.sub(v)?;
    let residual1 = (h_fn(u) - h_fn(v) - dg.dot(&diff)?).abs();
    let dg_uu = dg_fn(u, u);
    let residual2 = dg_uu.sub(&grad_fn(u))?.norm_inf();
    Ok(DgCheck {
        residual1,
        residual2,
    })
}
