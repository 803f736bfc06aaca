//! Neural energy functions and derivative-field models.
//!
//! An [`EnergyModel`] maps a state to a scalar energy; a [`NodeModel`] maps a
//! state directly to its time derivative. Both are built from the same layer
//! vocabulary (linear, periodic conv, tanh) so the discrete-differential
//! rules in [`crate::dg`] can walk their structure.
//!
//! Batching convention: ODE-style states are packed as columns of a
//! `[dim, batch]` matrix; PDE-style fields are packed as `batch` consecutive
//! length-`n` blocks of a `[1, batch*n]` matrix, each block periodic on its
//! own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tape::{backward_for, NodeId, Tape};
use crate::tensor::{Precision, Result, Tensor, TensorError};

/// Elementwise nonlinearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    /// No-op activation, useful in tests and linear toy models.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn apply_on_tape(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => tape.affine(x, 1.0, 0.0),
        }
    }
}

/// Architecture descriptor. Parameters are stored separately so the
/// descriptor stays serializable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Arch {
    /// Fully-connected scalar energy: `dims` runs from state dim to 1.
    Mlp {
        dims: Vec<usize>,
        activation: Activation,
    },
    /// Periodic conv over a length-`n` field followed by pointwise dense
    /// layers and a spatial sum scaled by the mesh size, yielding an
    /// extensive, translation-equivariant energy.
    ConvEnergy {
        len: usize,
        hidden: usize,
        kernel: usize,
        dx: f64,
        /// Replace the pointwise dense layers with one dense layer over the
        /// flattened field (resolution-dependent compatibility mode).
        global_dense: bool,
    },
    /// Sum of a potential net over positions and a kinetic net over momenta.
    Separable {
        half: usize,
        q_dims: Vec<usize>,
        p_dims: Vec<usize>,
        activation: Activation,
    },
}

/// One step of a sequential network plan. Parameter references index into the
/// owning model's parameter list.
#[derive(Debug, Clone)]
pub enum PlanStep {
    Linear { w: usize, b: usize },
    Conv { kernel: usize, b: usize },
    Act(Activation),
    /// Per-sample spatial sum times a scale factor: `[1, B*n] → [1, B]`.
    SpatialSum { scale: f64 },
    /// `[c, B*n] → [c*n, B]` permutation for the global-dense variant.
    FieldsToCols,
}

/// Scalar-valued energy network with named parameters.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub arch: Arch,
    pub params: Vec<(String, Tensor)>,
    pub precision: Precision,
}

/// Derivative-field network: output shape equals input shape.
#[derive(Debug, Clone)]
pub struct NodeModel {
    pub arch: Arch,
    pub params: Vec<(String, Tensor)>,
    pub precision: Precision,
}

/// Draws a random matrix with orthonormal columns (`rows ≥ cols`) or
/// orthonormal rows (`rows < cols`), via Householder QR of a standard-normal
/// matrix with the R-diagonal sign correction.
pub fn orthogonal_init(rows: usize, cols: usize, precision: Precision, rng: &mut ChaCha8Rng) -> Tensor {
    if rows >= cols {
        let data = householder_q(rows, cols, rng);
        Tensor::from_raw(vec![rows, cols], data, precision)
    } else {
        // Orthonormal rows: QR the transpose and transpose back.
        let qt = householder_q(cols, rows, rng);
        let mut data = vec![0.0; rows * cols];
        for i in 0..cols {
            for j in 0..rows {
                data[j * cols + i] = qt[i * rows + j];
            }
        }
        Tensor::from_raw(vec![rows, cols], data, precision)
    }
}

/// Thin-Q factor of an `m×n` (`m ≥ n`) standard-normal matrix, row-major,
/// columns sign-corrected by the corresponding R diagonal entries.
fn householder_q(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(m >= n);
    let mut a: Vec<f64> = (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rdiag = vec![0.0; n];
    for j in 0..n {
        let mut norm = 0.0;
        for i in j..m {
            norm += a[i * n + j] * a[i * n + j];
        }
        let norm = norm.sqrt();
        let ajj = a[j * n + j];
        let alpha = if ajj >= 0.0 { -norm } else { norm };
        rdiag[j] = alpha;
        let mut v = vec![0.0; m - j];
        for i in j..m {
            v[i - j] = a[i * n + j];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply H = I − 2vvᵀ/vᵀv to the trailing columns.
            for c in j..n {
                let mut dot = 0.0;
                for i in j..m {
                    dot += v[i - j] * a[i * n + c];
                }
                let f = 2.0 * dot / vnorm2;
                for i in j..m {
                    a[i * n + c] -= f * v[i - j];
                }
            }
        }
        vs.push(v);
    }
    // Q = H_0 · … · H_{n-1} applied to the first n identity columns.
    let mut q = vec![0.0; m * n];
    for c in 0..n {
        q[c * n + c] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..n {
            let mut dot = 0.0;
            for i in j..m {
                dot += v[i - j] * q[i * n + c];
            }
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                q[i * n + c] -= f * v[i - j];
            }
        }
    }
    // Sign correction keeps the distribution Haar and the map deterministic.
    for c in 0..n {
        if rdiag[c] < 0.0 {
            for i in 0..m {
                q[i * n + c] = -q[i * n + c];
            }
        }
    }
    q
}

fn mlp_params(
    prefix: &str,
    dims: &[usize],
    precision: Precision,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, Tensor)> {
    let mut params = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let w = orthogonal_init(d_out, d_in, precision, rng);
        let b = Tensor::zeros(&[d_out], precision);
        params.push((format!("{prefix}fc{i}.weight"), w));
        params.push((format!("{prefix}fc{i}.bias"), b));
    }
    params
}

impl EnergyModel {
    /// Fully-connected energy with orthogonally initialized weights and zero
    /// biases. `dims` must end in 1.
    pub fn mlp(dims: &[usize], activation: Activation, precision: Precision, seed: u64) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 {
            return Err(TensorError::Invalid(format!(
                "mlp energy dims must end in 1, got {:?}",
                dims
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = mlp_params("", dims, precision, &mut rng);
        Ok(EnergyModel {
            arch: Arch::Mlp {
                dims: dims.to_vec(),
                activation,
            },
            params,
            precision,
        })
    }

    /// Conv energy over a periodic length-`len` field: conv (1→hidden, odd
    /// kernel) → tanh → pointwise dense → tanh → pointwise head → spatial sum
    /// scaled by `dx`.
    pub fn conv_energy(
        len: usize,
        hidden: usize,
        kernel: usize,
        dx: f64,
        global_dense: bool,
        precision: Precision,
        seed: u64,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(TensorError::Invalid("conv kernel must be odd".into()));
        }
        if dx <= 0.0 {
            return Err(TensorError::Invalid("dx must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        // Kernel [hidden, 1, k] initialized as an orthogonal [hidden, k] map.
        let kmat = orthogonal_init(hidden, kernel, precision, &mut rng);
        let kdata = kmat.to_vec();
        params.push((
            "conv.kernel".to_string(),
            Tensor::from_raw(vec![hidden, 1, kernel], kdata, precision),
        ));
        params.push(("conv.bias".to_string(), Tensor::zeros(&[hidden], precision)));
        if global_dense {
            let flat = hidden * len;
            params.extend(mlp_params("flat.", &[flat, hidden, 1], precision, &mut rng));
        } else {
            params.extend(mlp_params("point.", &[hidden, hidden, 1], precision, &mut rng));
        }
        Ok(EnergyModel {
            arch: Arch::ConvEnergy {
                len,
                hidden,
                kernel,
                dx,
                global_dense,
            },
            params,
            precision,
        })
    }

    /// Potential + kinetic pair of MLPs over the two halves of the state.
    pub fn separable(
        half: usize,
        hidden_dims: &[usize],
        activation: Activation,
        precision: Precision,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![half];
        dims.extend_from_slice(hidden_dims);
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = mlp_params("v.", &dims, precision, &mut rng);
        params.extend(mlp_params("t.", &dims, precision, &mut rng));
        Ok(EnergyModel {
            arch: Arch::Separable {
                half,
                q_dims: dims.clone(),
                p_dims: dims,
                activation,
            },
            params,
            precision,
        })
    }

    /// Dimension of a single state vector.
    pub fn state_dim(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims, .. } => dims[0],
            Arch::ConvEnergy { len, .. } => *len,
            Arch::Separable { half, .. } => 2 * half,
        }
    }

    /// True when states are periodic fields (conv architectures).
    pub fn is_field(&self) -> bool {
        matches!(self.arch, Arch::ConvEnergy { .. })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|(n, _)| n == name)
    }

    /// Registers every parameter as a tape leaf, in declaration order.
    pub fn register_params(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Sequential plan of the architecture (not defined for `Separable`,
    /// which is handled as two sub-plans).
    pub fn plan(&self) -> Option<Vec<PlanStep>> {
        plan_of(&self.arch, self)
    }

    pub(crate) fn sub_plans(&self) -> Option<(Vec<PlanStep>, Vec<PlanStep>)> {
        match &self.arch {
            Arch::Separable { q_dims, p_dims, activation, .. } => {
                let q = mlp_plan("v.", q_dims, *activation, self);
                let p = mlp_plan("t.", p_dims, *activation, self);
                Some((q, p))
            }
            _ => None,
        }
    }

    /// Forward pass over a packed batch, keeping per-step outputs so the
    /// discrete-differential rules can revisit each layer.
    ///
    /// Input layouts: `[dim, B]` for MLP/separable, `[1, B*len]` for conv.
    /// Returns per-sample energies as a `[1, B]` row (or `[B]` for plans
    /// ending in a spatial sum; callers treat both as a row of energies).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &[NodeId],
        batch: usize,
    ) -> Result<ForwardTrace> {
        match &self.arch {
            Arch::Separable { half, .. } => {
                let (q_plan, p_plan) = self.sub_plans().unwrap();
                let q = tape.slice_rows(x, 0, *half)?;
                let p = tape.slice_rows(x, *half, *half)?;
                let tq = run_plan(tape, &q_plan, params, q, batch)?;
                let tp = run_plan(tape, &p_plan, params, p, batch)?;
                let e = tape.add(tq.output, tp.output)?;
                Ok(ForwardTrace {
                    output: e,
                    steps: Vec::new(),
                    sub: Some(Box::new((tq, tp))),
                    input: x,
                })
            }
            _ => {
                let plan = self.plan().unwrap();
                run_plan(tape, &plan, params, x, batch)
            }
        }
    }

    /// Energy of one state.
    pub fn energy(&self, u: &Tensor) -> Result<f64> {
        let mut tape = Tape::new(self.precision);
        let params = self.register_params(&mut tape)?;
        let x = tape.leaf(self.batch_input(std::slice::from_ref(u))?)?;
        let trace = self.forward_batch(&mut tape, x, &params, 1)?;
        Ok(tape.value(trace.output).as_slice()[0])
    }

    /// Ordinary gradient `∇H(u)` via the reverse sweep.
    pub fn grad(&self, u: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(self.precision);
        let params = self.register_params(&mut tape)?;
        let x = tape.leaf(self.batch_input(std::slice::from_ref(u))?)?;
        let trace = self.forward_batch(&mut tape, x, &params, 1)?;
        let root = tape.reduce_sum(trace.output);
        let gmap = backward_for(&mut tape, root, &[x])?;
        let g = gmap.grad(&tape, x);
        g.reshaped(vec![self.state_dim()])
    }

    /// Packs single-state vectors into the model's batch layout.
    pub fn batch_input(&self, states: &[&Tensor]) -> Result<Tensor> {
        let b = states.len();
        let d = self.state_dim();
        for s in states {
            if s.numel() != d {
                return Err(TensorError::ShapeMismatch(format!(
                    "state has {} entries, model expects {}",
                    s.numel(),
                    d
                )));
            }
        }
        if self.is_field() {
            // [1, B*len], blocks in sample order.
            let mut data = Vec::with_capacity(b * d);
            for s in states {
                data.extend_from_slice(s.as_slice());
            }
            Ok(Tensor::from_raw(vec![1, b * d], data, self.precision))
        } else {
            // [d, B] columns.
            let mut data = vec![0.0; d * b];
            for (j, s) in states.iter().enumerate() {
                for (i, &v) in s.as_slice().iter().enumerate() {
                    data[i * b + j] = v;
                }
            }
            Ok(Tensor::from_raw(vec![d, b], data, self.precision))
        }
    }
}

/// Per-step outputs of a plan execution. `steps[i]` is the output of plan
/// step `i`; the pre-activation feeding step `i` is the previous output (or
/// the input for `i == 0`).
pub struct ForwardTrace {
    pub output: NodeId,
    pub steps: Vec<NodeId>,
    pub input: NodeId,
    /// Sub-traces for separable architectures: (potential, kinetic).
    pub sub: Option<Box<(ForwardTrace, ForwardTrace)>>,
}

fn mlp_plan(prefix: &str, dims: &[usize], activation: Activation, model: &EnergyModel) -> Vec<PlanStep> {
    let n_layers = dims.len() - 1;
    let mut steps = Vec::new();
    for i in 0..n_layers {
        let w = model.param_index(&format!("{prefix}fc{i}.weight")).unwrap();
        let b = model.param_index(&format!("{prefix}fc{i}.bias")).unwrap();
        steps.push(PlanStep::Linear { w, b });
        if i + 1 < n_layers {
            steps.push(PlanStep::Act(activation));
        }
    }
    steps
}

fn plan_of(arch: &Arch, model: &EnergyModel) -> Option<Vec<PlanStep>> {
    match arch {
        Arch::Mlp { dims, activation } => Some(mlp_plan("", dims, *activation, model)),
        Arch::ConvEnergy {
            dx, global_dense, ..
        } => {
            let mut steps = vec![
                PlanStep::Conv {
                    kernel: model.param_index("conv.kernel").unwrap(),
                    b: model.param_index("conv.bias").unwrap(),
                },
                PlanStep::Act(Activation::Tanh),
            ];
            let prefix = if *global_dense { "flat." } else { "point." };
            if *global_dense {
                steps.push(PlanStep::FieldsToCols);
            }
            for i in 0..2 {
                let w = model.param_index(&format!("{prefix}fc{i}.weight")).unwrap();
                let b = model.param_index(&format!("{prefix}fc{i}.bias")).unwrap();
                steps.push(PlanStep::Linear { w, b });
                if i == 0 {
                    steps.push(PlanStep::Act(Activation::Tanh));
                }
            }
            if !*global_dense {
                steps.push(PlanStep::SpatialSum { scale: *dx });
            } else {
                steps.push(PlanStep::SpatialSum { scale: *dx }); // [1,B] sums are per-sample already
            }
            Some(steps)
        }
        Arch::Separable { .. } => None,
    }
}

/// Executes a plan on the tape, recording each step's output.
pub(crate) fn run_plan(
    tape: &mut Tape,
    steps: &[PlanStep],
    params: &[NodeId],
    input: NodeId,
    batch: usize,
) -> Result<ForwardTrace> {
    let mut cur = input;
    let mut outs = Vec::with_capacity(steps.len());
    for step in steps {
        cur = match step {
            PlanStep::Linear { w, b } => {
                let z = tape.matmul(params[*w], cur)?;
                tape.add_col(z, params[*b])?
            }
            PlanStep::Conv { kernel, b } => {
                let z = tape.conv1d(params[*kernel], cur, batch)?;
                tape.add_col(z, params[*b])?
            }
            PlanStep::Act(a) => a.apply_on_tape(tape, cur),
            PlanStep::SpatialSum { scale } => {
                let shape = tape.value(cur).shape().to_vec();
                let fields = batch;
                let s = match shape.as_slice() {
                    // [1, B] (global-dense head output): already per-sample.
                    [1, b] if *b == batch => cur,
                    _ => tape.segment_sum(cur, fields)?,
                };
                tape.scale(s, *scale)
            }
            PlanStep::FieldsToCols => fields_to_cols(tape, cur, batch)?,
        };
        outs.push(cur);
    }
    Ok(ForwardTrace {
        output: cur,
        steps: outs,
        input,
        sub: None,
    })
}

/// `[c, B*n] → [c*n, B]` per-sample flatten, built from slices and reshapes.
fn fields_to_cols(tape: &mut Tape, x: NodeId, batch: usize) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (c, total) = match shape.as_slice() {
        [c, t] => (*c, *t),
        _ => return Err(TensorError::ShapeMismatch("fields_to_cols expects a matrix".into())),
    };
    let n = total / batch;
    // Build each sample's flattened column by slicing its block out of every
    // channel row. Column-assembly via concat over samples of [c*n, 1] blocks.
    let mut cols: Option<NodeId> = None;
    let _ = n;
    let _ = c;
    // One sample: select columns [b*n, (b+1)*n) of x.
    // Implemented as: reshape x to [c*batch? ...] — not expressible with row
    // ops alone; fall back to per-sample matmul with a constant selector.
    for b in 0..batch {
        let sel = selector_matrix(tape, total, b * n, n)?;
        let block = tape.matmul_nt(x, sel)?; // [c, total]·[n, total]ᵀ = [c, n]
        let flat = tape.reshape(block, vec![c * n, 1])?;
        cols = Some(match cols {
            Some(acc) => concat_cols(tape, acc, flat)?,
            None => flat,
        });
    }
    cols.ok_or_else(|| TensorError::Invalid("empty batch".into()))
}

/// Constant 0/1 matrix `[len, total]` picking columns `[start, start+len)`.
fn selector_matrix(tape: &mut Tape, total: usize, start: usize, len: usize) -> Result<NodeId> {
    let mut data = vec![0.0; len * total];
    for i in 0..len {
        data[i * total + start + i] = 1.0;
    }
    let t = Tensor::from_raw(vec![len, total], data, tape.precision());
    tape.leaf(t)
}

/// Concatenate matrices along columns via transposed row-concat.
fn concat_cols(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    // aᵀ and bᵀ stacked as rows, then transposed back. Transposition is
    // expressed through matmul with identity selectors; to keep this cheap we
    // instead require equal row counts and build the result directly.
    let (ra, ca) = mat_dims(tape, a)?;
    let (rb, cb) = mat_dims(tape, b)?;
    if ra != rb {
        return Err(TensorError::ShapeMismatch("concat_cols row mismatch".into()));
    }
    // [ra, ca+cb] = a·[I 0] + b·[0 I]
    let mut pa = vec![0.0; ca * (ca + cb)];
    for i in 0..ca {
        pa[i * (ca + cb) + i] = 1.0;
    }
    let mut pb = vec![0.0; cb * (ca + cb)];
    for i in 0..cb {
        pb[i * (ca + cb) + ca + i] = 1.0;
    }
    let pa = tape.leaf(Tensor::from_raw(vec![ca, ca + cb], pa, tape.precision()))?;
    let pb = tape.leaf(Tensor::from_raw(vec![cb, ca + cb], pb, tape.precision()))?;
    let left = tape.matmul(a, pa)?;
    let right = tape.matmul(b, pb)?;
    tape.add(left, right)
}

fn mat_dims(tape: &Tape, id: NodeId) -> Result<(usize, usize)> {
    match tape.value(id).shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch(format!("expected matrix, got {:?}", s))),
    }
}

impl NodeModel {
    /// Fully-connected derivative field: `dims` maps state dim to state dim.
    pub fn mlp(dims: &[usize], activation: Activation, precision: Precision, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims[0] != *dims.last().unwrap() {
            return Err(TensorError::Invalid(format!(
                "node dims must map state dim to itself, got {:?}",
                dims
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = mlp_params("", dims, precision, &mut rng);
        Ok(NodeModel {
            arch: Arch::Mlp {
                dims: dims.to_vec(),
                activation: activation,
            },
            params,
            precision,
        })
    }

    /// Conv derivative field over a periodic length-`len` field.
    pub fn conv_field(len: usize, hidden: usize, kernel: usize, precision: Precision, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let kmat = orthogonal_init(hidden, kernel, precision, &mut rng);
        params.push((
            "conv.kernel".to_string(),
            Tensor::from_raw(vec![hidden, 1, kernel], kmat.to_vec(), precision),
        ));
        params.push(("conv.bias".to_string(), Tensor::zeros(&[hidden], precision)));
        params.extend(mlp_params("point.", &[hidden, hidden, 1], precision, &mut rng));
        Ok(NodeModel {
            arch: Arch::ConvEnergy {
                len,
                hidden,
                kernel,
                dx: 1.0,
                global_dense: false,
            },
            params,
            precision,
        })
    }

    pub fn state_dim(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims, .. } => dims[0],
            Arch::ConvEnergy { len, .. } => *len,
            Arch::Separable { half, .. } => 2 * half,
        }
    }

    pub fn is_field(&self) -> bool {
        matches!(self.arch, Arch::ConvEnergy { .. })
    }

    pub fn register_params(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn plan(&self) -> Vec<PlanStep> {
        match &self.arch {
            Arch::Mlp { dims, activation } => {
                let shim = EnergyModel {
                    arch: self.arch.clone(),
                    params: self.params.clone(),
                    precision: self.precision,
                };
                mlp_plan("", dims, *activation, &shim)
            }
            Arch::ConvEnergy { .. } => {
                let shim = EnergyModel {
                    arch: self.arch.clone(),
                    params: self.params.clone(),
                    precision: self.precision,
                };
                let mut steps = vec![
                    PlanStep::Conv {
                        kernel: shim.param_index("conv.kernel").unwrap(),
                        b: shim.param_index("conv.bias").unwrap(),
                    },
                    PlanStep::Act(Activation::Tanh),
                ];
                for i in 0..2 {
                    let w = shim.param_index(&format!("point.fc{i}.weight")).unwrap();
                    let b = shim.param_index(&format!("point.fc{i}.bias")).unwrap();
                    steps.push(PlanStep::Linear { w, b });
                    if i == 0 {
                        steps.push(PlanStep::Act(Activation::Tanh));
                    }
                }
                steps
            }
            Arch::Separable { .. } => unreachable!("node models are never separable"),
        }
    }

    /// Batched forward: `[dim, B] → [dim, B]` or `[1, B*len] → [1, B*len]`.
    pub fn forward_batch(&self, tape: &mut Tape, x: NodeId, params: &[NodeId], batch: usize) -> Result<NodeId> {
        let plan = self.plan();
        let trace = run_plan(tape, &plan, params, x, batch)?;
        Ok(trace.output)
    }

    /// Derivative field at one state.
    pub fn rhs(&self, u: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(self.precision);
        let params = self.register_params(&mut tape)?;
        let x = tape.leaf(self.pack_single(u)?)?;
        let out = self.forward_batch(&mut tape, x, &params, 1)?;
        tape.value(out).reshaped(vec![self.state_dim()])
    }

    fn pack_single(&self, u: &Tensor) -> Result<Tensor> {
        let d = self.state_dim();
        if self.is_field() {
            Ok(Tensor::from_raw(vec![1, d], u.to_vec(), self.precision))
        } else {
            Ok(Tensor::from_raw(vec![d, 1], u.to_vec(), self.precision))
        }
    }
}
