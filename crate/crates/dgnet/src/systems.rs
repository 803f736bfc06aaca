//! Structure operators and analytic benchmark systems.
//!
//! A system is a pair of an energy `H` and a structure operator `G` driving
//! `du/dt = G ∇H(u)`. `G`'s declared algebraic laws determine the qualitative
//! behavior: skew-symmetry conserves `H`, negative semi-definiteness
//! dissipates it, and an all-ones left kernel conserves the total mass
//! `Σ uₖ`. Structured kinds are applied matrix-free: central differences as
//! periodic stencils, the canonical symplectic form as a block swap.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dg::{default_eps, itoh_abe_gradient, secant_slope};
use crate::models::{Activation, EnergyModel};
use crate::tape::{NodeId, Tape};
use crate::tensor::{stencil_periodic, Precision, Result, Tensor, TensorError};

/// Declared algebraic laws of a structure operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawFlags {
    pub skew: bool,
    pub neg_semidef: bool,
    pub mass_kernel: bool,
}

/// Operator kind. `half` counts position (= momentum) coordinates; `n` is
/// the number of spatial grid points.
#[derive(Debug, Clone)]
pub enum GKind {
    /// Canonical symplectic form: `(q, p) ↦ (p, −q)`.
    Symplectic { half: usize },
    /// Symplectic form minus momentum friction: `(q, p) ↦ (p, −q − g⊙p)`.
    Damped {
        half: usize,
        friction: Tensor,
        learnable: bool,
    },
    /// First-order periodic central difference.
    CentralDiff { n: usize, dx: f64 },
    /// Second-order periodic central difference.
    Laplacian { n: usize, dx: f64 },
    /// Arbitrary dense matrix with caller-declared laws.
    Custom { matrix: Tensor },
}

/// Structure operator with declared laws and a positive post-scale.
#[derive(Debug, Clone)]
pub struct GSpec {
    pub kind: GKind,
    pub scale: f64,
    pub laws: LawFlags,
}

/// `G = S`, the conservative canonical structure on `2*half` coordinates.
pub fn build_s(half: usize) -> GSpec {
    GSpec {
        kind: GKind::Symplectic { half },
        scale: 1.0,
        laws: LawFlags {
            skew: true,
            neg_semidef: false,
            mass_kernel: false,
        },
    }
}

/// `G = S − R` with per-momentum friction `g ≥ 0`.
pub fn build_s_minus_r(half: usize, friction: Tensor, learnable: bool) -> Result<GSpec> {
    if friction.numel() != half {
        return Err(TensorError::ShapeMismatch(format!(
            "friction needs {} entries, got {}",
            half,
            friction.numel()
        )));
    }
    if friction.as_slice().iter().any(|&g| g < 0.0) {
        return Err(TensorError::Invalid("friction entries must be ≥ 0".into()));
    }
    Ok(GSpec {
        kind: GKind::Damped {
            half,
            friction,
            learnable,
        },
        scale: 1.0,
        laws: LawFlags {
            skew: false,
            neg_semidef: true,
            mass_kernel: false,
        },
    })
}

/// `G = D`, the skew periodic first-difference operator on `n` points.
pub fn build_d(n: usize, dx: f64) -> Result<GSpec> {
    if n < 3 || dx <= 0.0 {
        return Err(TensorError::Invalid("need n ≥ 3 and dx > 0".into()));
    }
    Ok(GSpec {
        kind: GKind::CentralDiff { n, dx },
        scale: 1.0,
        laws: LawFlags {
            skew: true,
            neg_semidef: false,
            mass_kernel: true,
        },
    })
}

/// `G = D₂`, the negative semi-definite periodic Laplacian on `n` points.
pub fn build_d2(n: usize, dx: f64) -> Result<GSpec> {
    if n < 3 || dx <= 0.0 {
        return Err(TensorError::Invalid("need n ≥ 3 and dx > 0".into()));
    }
    Ok(GSpec {
        kind: GKind::Laplacian { n, dx },
        scale: 1.0,
        laws: LawFlags {
            skew: false,
            neg_semidef: true,
            mass_kernel: true,
        },
    })
}

/// Dense custom operator; laws are declared, not derived.
pub fn build_custom(matrix: Tensor, laws: LawFlags) -> Result<GSpec> {
    match matrix.shape() {
        [a, b] if a == b => Ok(GSpec {
            kind: GKind::Custom { matrix },
            scale: 1.0,
            laws,
        }),
        s => Err(TensorError::ShapeMismatch(format!(
            "custom operator must be square, got {:?}",
            s
        ))),
    }
}

impl GSpec {
    pub fn dim(&self) -> usize {
        match &self.kind {
            GKind::Symplectic { half } | GKind::Damped { half, .. } => 2 * half,
            GKind::CentralDiff { n, .. } | GKind::Laplacian { n, .. } => *n,
            GKind::Custom { matrix } => matrix.shape()[0],
        }
    }

    /// Rescaled copy. Positive factors preserve every declared law.
    pub fn scaled(mut self, factor: f64) -> Self {
        assert!(factor > 0.0, "scale must stay positive to preserve laws");
        self.scale *= factor;
        self
    }

    pub fn friction(&self) -> Option<&Tensor> {
        match &self.kind {
            GKind::Damped { friction, .. } => Some(friction),
            _ => None,
        }
    }

    pub fn friction_learnable(&self) -> bool {
        matches!(
            &self.kind,
            GKind::Damped {
                learnable: true,
                ..
            }
        )
    }

    pub fn set_friction(&mut self, new: Tensor) -> Result<()> {
        match &mut self.kind {
            GKind::Damped { half, friction, .. } => {
                if new.numel() != *half {
                    return Err(TensorError::ShapeMismatch("friction size".into()));
                }
                *friction = new;
                Ok(())
            }
            _ => Err(TensorError::Invalid("not a damped operator".into())),
        }
    }

    fn stencil_weights(&self) -> Option<Vec<f64>> {
        match &self.kind {
            GKind::CentralDiff { dx, .. } => Some(vec![-1.0 / (2.0 * dx), 0.0, 1.0 / (2.0 * dx)]),
            GKind::Laplacian { dx, .. } => {
                let c = 1.0 / (dx * dx);
                Some(vec![c, -2.0 * c, c])
            }
            _ => None,
        }
    }

    /// Applies the operator to one state vector.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() != self.dim() {
            return Err(TensorError::ShapeMismatch(format!(
                "operator dim {} vs state {}",
                self.dim(),
                x.numel()
            )));
        }
        let out = match &self.kind {
            GKind::Symplectic { half } => {
                let d = x.as_slice();
                let mut o = Vec::with_capacity(2 * half);
                o.extend_from_slice(&d[*half..]);
                o.extend(d[..*half].iter().map(|&q| -q));
                Tensor::from_raw(x.shape().to_vec(), o, x.precision())
            }
            GKind::Damped { half, friction, .. } => {
                let d = x.as_slice();
                let g = friction.as_slice();
                let mut o = Vec::with_capacity(2 * half);
                o.extend_from_slice(&d[*half..]);
                for i in 0..*half {
                    o.push(-d[i] - g[i] * d[*half + i]);
                }
                Tensor::from_raw(x.shape().to_vec(), o, x.precision())
            }
            GKind::CentralDiff { .. } | GKind::Laplacian { .. } => {
                let w = self.stencil_weights().unwrap();
                stencil_periodic(x, &w, false, 1)?
            }
            GKind::Custom { matrix } => matrix.matmul(x)?,
        };
        Ok(if self.scale == 1.0 {
            out
        } else {
            out.scale(self.scale)
        })
    }

    /// Tape form of [`GSpec::apply`] on batched layouts (`[dim, B]` columns
    /// or `[1, B*n]`/`[B*n]` fields). `friction_node` overrides the stored
    /// friction so it can be a trainable leaf.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        fields: usize,
        friction_node: Option<NodeId>,
    ) -> Result<NodeId> {
        let out = match &self.kind {
            GKind::Symplectic { half } => {
                let q = tape.slice_rows(x, 0, *half)?;
                let p = tape.slice_rows(x, *half, *half)?;
                let nq = tape.neg(q);
                tape.concat_rows(p, nq)?
            }
            GKind::Damped { half, .. } => {
                let q = tape.slice_rows(x, 0, *half)?;
                let p = tape.slice_rows(x, *half, *half)?;
                let g = match friction_node {
                    Some(n) => n,
                    None => tape.leaf(self.friction().unwrap().clone())?,
                };
                // Broadcast friction across batch columns when needed.
                let gp = match tape.value(p).shape() {
                    [_, b] => {
                        let gb = tape.broadcast_cols(g, *b)?;
                        tape.mul(gb, p)?
                    }
                    _ => tape.mul(g, p)?,
                };
                let nq = tape.neg(q);
                let lower = tape.sub(nq, gp)?;
                tape.concat_rows(p, lower)?
            }
            GKind::CentralDiff { .. } | GKind::Laplacian { .. } => {
                let w = Arc::new(self.stencil_weights().unwrap());
                tape.stencil(x, w, false, fields)?
            }
            GKind::Custom { matrix } => {
                let m = tape.leaf(matrix.clone())?;
                tape.matmul(m, x)?
            }
        };
        Ok(if self.scale == 1.0 {
            out
        } else {
            tape.scale(out, self.scale)
        })
    }

    /// Dense matrix form, assembled column-by-column through [`GSpec::apply`].
    /// Meant for tests and law checks, not production paths.
    pub fn dense(&self, precision: Precision) -> Result<Tensor> {
        let n = self.dim();
        let mut cols = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.apply(&Tensor::from_raw(vec![n], e, precision))?;
            for i in 0..n {
                cols[i * n + j] = col.as_slice()[i];
            }
        }
        Ok(Tensor::from_raw(vec![n, n], cols, precision))
    }
}

/// Empirical law-violation report from random probing.
#[derive(Debug, Clone, Serialize)]
pub struct LawReport {
    pub max_skew_rel: f64,
    pub max_posdef_rel: f64,
    pub mass_kernel_inf: f64,
    pub violations: Vec<String>,
}

/// Probes the declared laws on `trials` random vectors. Reports worst
/// violations; declared-but-violated laws are listed by name.
pub fn check_laws(g: &GSpec, trials: usize, seed: u64) -> Result<LawReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = g.dim();
    let mut max_skew_rel: f64 = 0.0;
    let mut max_posdef_rel: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let x = Tensor::from_raw(
            vec![n],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            Precision::Double,
        );
        let gx = g.apply(&x)?;
        let quad = x.dot(&gx)?;
        let denom = (x.norm2() * gx.norm2()).max(f64::MIN_POSITIVE);
        max_skew_rel = max_skew_rel.max(quad.abs() / denom);
        let rel = quad / x.norm2().powi(2);
        max_posdef_rel = max_posdef_rel.max(rel);
    }
    // ‖1ᵀG‖∞ from the dense form (kept out of hot paths).
    let dense = g.dense(Precision::Double)?;
    let mut mass_kernel_inf: f64 = 0.0;
    for j in 0..n {
        let mut colsum = 0.0;
        for i in 0..n {
            colsum += dense.as_slice()[i * n + j];
        }
        mass_kernel_inf = mass_kernel_inf.max(colsum.abs());
    }
    let mut violations = Vec::new();
    if g.laws.skew && max_skew_rel > 1e-12 {
        violations.push(format!("skew violated: {max_skew_rel:.3e}"));
    }
    if g.laws.neg_semidef && max_posdef_rel > 1e-12 {
        violations.push(format!("neg_semidef violated: {max_posdef_rel:.3e}"));
    }
    if g.laws.mass_kernel && mass_kernel_inf > 1e-13 {
        violations.push(format!("mass_kernel violated: {mass_kernel_inf:.3e}"));
    }
    Ok(LawReport {
        max_skew_rel,
        max_posdef_rel,
        mass_kernel_inf,
        violations,
    })
}

/// Symmetric/antisymmetric split of a square matrix:
/// `(A + Aᵀ)/2` and `(A − Aᵀ)/2`.
pub fn split_operator(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = match m.shape() {
        [a, b] if a == b => *a,
        s => {
            return Err(TensorError::ShapeMismatch(format!(
                "split_operator needs a square matrix, got {:?}",
                s
            )))
        }
    };
    let d = m.as_slice();
    let mut sym = vec![0.0; n * n];
    let mut anti = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = d[i * n + j];
            let at = d[j * n + i];
            sym[i * n + j] = 0.5 * (a + at);
            anti[i * n + j] = 0.5 * (a - at);
        }
    }
    Ok((
        Tensor::from_raw(vec![n, n], sym, m.precision()),
        Tensor::from_raw(vec![n, n], anti, m.precision()),
    ))
}

/// Extra constants a benchmark system carries into manifests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SystemExtras {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub dx: Option<f64>,
    pub friction: Option<f64>,
    pub masses: Option<Vec<f64>>,
}

type EnergyFn = Box<dyn Fn(&Tensor) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&Tensor) -> Tensor + Send + Sync>;
type DgFn = Box<dyn Fn(&Tensor, &Tensor) -> Tensor + Send + Sync>;

/// Benchmark system with closed-form energy, gradient, and right-hand side.
pub struct AnalyticSystem {
    pub name: String,
    pub state_dim: usize,
    pub gspec: GSpec,
    pub extras: SystemExtras,
    energy: EnergyFn,
    grad: GradFn,
    rhs: RhsFn,
    dgrad: Option<DgFn>,
}

type RhsFn = Box<dyn Fn(&Tensor) -> Tensor + Send + Sync>;

impl AnalyticSystem {
    pub fn energy(&self, u: &Tensor) -> f64 {
        (self.energy)(u)
    }

    pub fn grad(&self, u: &Tensor) -> Tensor {
        (self.grad)(u)
    }

    pub fn rhs(&self, u: &Tensor) -> Tensor {
        (self.rhs)(u)
    }

    /// Closed-form discrete gradient when available, otherwise the
    /// coordinate-wise oracle.
    pub fn discrete_grad(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        match &self.dgrad {
            Some(f) => Ok(f(a, b)),
            None => {
                let eps = default_eps(a.precision());
                itoh_abe_gradient(&|x| self.energy(x), a, b, eps)
            }
        }
    }
}

fn forward_diff_energy(u: &[f64], dx: f64) -> f64 {
    // Σ ((u_{k+1} − u_k)/dx)² with periodic wrap.
    let n = u.len();
    let mut s = 0.0;
    for k in 0..n {
        let d = (u[(k + 1) % n] - u[k]) / dx;
        s += d * d;
    }
    s
}

fn laplacian(u: &Tensor, dx: f64) -> Tensor {
    let c = 1.0 / (dx * dx);
    stencil_periodic(u, &[c, -2.0 * c, c], false, 1).expect("laplacian stencil")
}

/// Discretized KdV equation on a periodic grid:
/// `H(u) = Δx Σ (−α/6 u³ − β/2 (δ⁺u)²)`, `du/dt = D(−α/2 u⊙u + β D₂u)`.
///
/// The squared-difference term uses the forward difference so that the
/// stated right-hand side is exactly the structure operator applied to the
/// gradient of `H`; the operator carries the `1/Δx` factor that converts the
/// extensive gradient into the grid form.
pub fn kdv_system(n: usize, dx: f64, alpha: f64, beta: f64) -> Result<AnalyticSystem> {
    if n < 5 {
        return Err(TensorError::Invalid("kdv needs n ≥ 5".into()));
    }
    let gspec = build_d(n, dx)?.scaled(1.0 / dx);
    let energy: EnergyFn = Box::new(move |u: &Tensor| {
        let d = u.as_slice();
        let cubic: f64 = d.iter().map(|&x| x * x * x).sum();
        dx * (-alpha / 6.0 * cubic - beta / 2.0 * forward_diff_energy(d, dx))
    });
    let grad: GradFn = Box::new(move |u: &Tensor| {
        let lap = laplacian(u, dx);
        let sq = u.mul(u).unwrap();
        sq.scale(-alpha / 2.0)
            .add(&lap.scale(beta))
            .unwrap()
            .scale(dx)
    });
    let rhs: RhsFn = Box::new(move |u: &Tensor| {
        let lap = laplacian(u, dx);
        let sq = u.mul(u).unwrap();
        let inner = sq.scale(-alpha / 2.0).add(&lap.scale(beta)).unwrap();
        // rhs = D(inner); the gradient's Δx and the operator's 1/Δx cancel.
        stencil_periodic(
            &inner,
            &[-1.0 / (2.0 * dx), 0.0, 1.0 / (2.0 * dx)],
            false,
            1,
        )
        .unwrap()
    });
    let dgrad: DgFn = Box::new(move |a: &Tensor, b: &Tensor| {
        // Cubic term: (a³−b³)/(a−b) = a² + ab + b² entrywise; quadratic
        // difference term: average of the two gradients.
        let aa = a.mul(a).unwrap();
        let bb = b.mul(b).unwrap();
        let ab = a.mul(b).unwrap();
        let cubic = aa.add(&ab).unwrap().add(&bb).unwrap().scale(-alpha / 6.0);
        let avg = a.add(b).unwrap().scale(0.5);
        let quad = laplacian(&avg, dx).scale(beta);
        cubic.add(&quad).unwrap().scale(dx)
    });
    Ok(AnalyticSystem {
        name: "kdv".to_string(),
        state_dim: n,
        gspec,
        extras: SystemExtras {
            alpha: Some(alpha),
            beta: Some(beta),
            dx: Some(dx),
            ..Default::default()
        },
        energy,
        grad,
        rhs,
        dgrad: Some(dgrad),
    })
}

/// Discretized Cahn–Hilliard equation:
/// `H(u) = Δx Σ (¼(u²−1)² + γ/2 (δ⁺u)²)`,
/// `du/dt = D₂((u⊙u−1)⊙u − γ D₂u)`.
pub fn ch_system(n: usize, dx: f64, gamma: f64) -> Result<AnalyticSystem> {
    if n < 5 || gamma <= 0.0 {
        return Err(TensorError::Invalid("ch needs n ≥ 5 and γ > 0".into()));
    }
    let gspec = build_d2(n, dx)?.scaled(1.0 / dx);
    let energy: EnergyFn = Box::new(move |u: &Tensor| {
        let d = u.as_slice();
        let bulk: f64 = d.iter().map(|&x| (x * x - 1.0).powi(2) / 4.0).sum();
        dx * (bulk + gamma / 2.0 * forward_diff_energy(d, dx))
    });
    let grad: GradFn = Box::new(move |u: &Tensor| {
        let cubic = u.map(|x| (x * x - 1.0) * x);
        let lap = laplacian(u, dx);
        cubic.add(&lap.scale(-gamma)).unwrap().scale(dx)
    });
    let rhs: RhsFn = Box::new(move |u: &Tensor| {
        let cubic = u.map(|x| (x * x - 1.0) * x);
        let lap = laplacian(u, dx);
        let inner = cubic.add(&lap.scale(-gamma)).unwrap();
        laplacian(&inner, dx)
    });
    let dgrad: DgFn = Box::new(move |a: &Tensor, b: &Tensor| {
        // ¼((a²−1)² − (b²−1)²)/(a−b) = ¼(a² + b² − 2)(a + b) entrywise.
        let sum_sq = a.mul(a).unwrap().add(&b.mul(b).unwrap()).unwrap();
        let bulk = sum_sq
            .affine(1.0, -2.0)
            .mul(&a.add(b).unwrap())
            .unwrap()
            .scale(0.25);
        let avg = a.add(b).unwrap().scale(0.5);
        let quad = laplacian(&avg, dx).scale(-gamma);
        bulk.add(&quad).unwrap().scale(dx)
    });
    Ok(AnalyticSystem {
        name: "ch".to_string(),
        state_dim: n,
        gspec,
        extras: SystemExtras {
            gamma: Some(gamma),
            dx: Some(dx),
            ..Default::default()
        },
        energy,
        grad,
        rhs,
        dgrad: Some(dgrad),
    })
}

/// Named canonical Hamiltonian benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeName {
    MassSpring,
    Pendulum,
    TwoBody,
}

impl std::str::FromStr for OdeName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mass_spring" | "spring" => Ok(OdeName::MassSpring),
            "pendulum" => Ok(OdeName::Pendulum),
            "twobody" | "2body" | "two_body" => Ok(OdeName::TwoBody),
            other => Err(format!("unknown system '{other}'")),
        }
    }
}

/// Canonical benchmark systems with `G = S`.
///
/// Mass-spring: `H = (q² + p²)/2`. Pendulum: `H = 2(1 − cos q) + p²/2`
/// (unit mass, length, gravity). Two-body: unit masses, unit gravitational
/// constant, state `(q₁, q₂, p₁, p₂) ∈ ℝ⁸`.
pub fn ode_system(name: OdeName) -> AnalyticSystem {
    match name {
        OdeName::MassSpring => {
            let gspec = build_s(1);
            AnalyticSystem {
                name: "mass_spring".into(),
                state_dim: 2,
                gspec,
                extras: SystemExtras::default(),
                energy: Box::new(|u| {
                    let d = u.as_slice();
                    0.5 * (d[0] * d[0] + d[1] * d[1])
                }),
                grad: Box::new(|u| u.clone()),
                rhs: Box::new(|u| {
                    let d = u.as_slice();
                    Tensor::from_raw(vec![2], vec![d[1], -d[0]], u.precision())
                }),
                // Quadratic energy: the average of the endpoints is exact.
                dgrad: Some(Box::new(|a, b| a.add(b).unwrap().scale(0.5))),
            }
        }
        OdeName::Pendulum => {
            let gspec = build_s(1);
            AnalyticSystem {
                name: "pendulum".into(),
                state_dim: 2,
                gspec,
                extras: SystemExtras::default(),
                energy: Box::new(|u| {
                    let d = u.as_slice();
                    2.0 * (1.0 - d[0].cos()) + 0.5 * d[1] * d[1]
                }),
                grad: Box::new(|u| {
                    let d = u.as_slice();
                    Tensor::from_raw(vec![2], vec![2.0 * d[0].sin(), d[1]], u.precision())
                }),
                rhs: Box::new(|u| {
                    let d = u.as_slice();
                    Tensor::from_raw(vec![2], vec![d[1], -2.0 * d[0].sin()], u.precision())
                }),
                dgrad: Some(Box::new(|a, b| {
                    let eps = default_eps(a.precision());
                    let ad = a.as_slice();
                    let bd = b.as_slice();
                    let dq = if (ad[0] - bd[0]).abs() > eps {
                        2.0 * (bd[0].cos() - ad[0].cos()) / (ad[0] - bd[0])
                    } else {
                        2.0 * (0.5 * (ad[0] + bd[0])).sin()
                    };
                    let dp = 0.5 * (ad[1] + bd[1]);
                    Tensor::from_raw(vec![2], vec![dq, dp], a.precision())
                })),
            }
        }
        OdeName::TwoBody => {
            let gspec = build_s(4);
            let energy = |u: &Tensor| -> f64 {
                let d = u.as_slice();
                let kinetic = 0.5 * (d[4] * d[4] + d[5] * d[5] + d[6] * d[6] + d[7] * d[7]);
                let rx = d[0] - d[2];
                let ry = d[1] - d[3];
                let r = (rx * rx + ry * ry).sqrt();
                kinetic - 1.0 / r
            };
            let grad = |u: &Tensor| -> Tensor {
                let d = u.as_slice();
                let rx = d[0] - d[2];
                let ry = d[1] - d[3];
                let r3 = (rx * rx + ry * ry).sqrt().powi(3);
                Tensor::from_raw(
                    vec![8],
                    vec![
                        rx / r3,
                        ry / r3,
                        -rx / r3,
                        -ry / r3,
                        d[4],
                        d[5],
                        d[6],
                        d[7],
                    ],
                    u.precision(),
                )
            };
            AnalyticSystem {
                name: "twobody".into(),
                state_dim: 8,
                gspec,
                extras: SystemExtras {
                    masses: Some(vec![1.0, 1.0]),
                    ..Default::default()
                },
                energy: Box::new(energy),
                grad: Box::new(grad),
                rhs: Box::new(move |u| {
                    let g = grad(u);
                    let d = g.as_slice();
                    let mut o = Vec::with_capacity(8);
                    o.extend_from_slice(&d[4..]);
                    o.extend(d[..4].iter().map(|&x| -x));
                    Tensor::from_raw(vec![8], o, u.precision())
                }),
                dgrad: None, // falls back to the coordinate-wise oracle
            }
        }
    }
}

/// Mass-spring oscillator with momentum friction `g ≥ 0` and `G = S − R`.
pub fn damped_oscillator(g: f64, learnable: bool) -> Result<AnalyticSystem> {
    let friction = Tensor::from_raw(vec![1], vec![g], Precision::Double);
    let gspec = build_s_minus_r(1, friction, learnable)?;
    Ok(AnalyticSystem {
        name: "damped_spring".into(),
        state_dim: 2,
        gspec,
        extras: SystemExtras {
            friction: Some(g),
            ..Default::default()
        },
        energy: Box::new(|u| {
            let d = u.as_slice();
            0.5 * (d[0] * d[0] + d[1] * d[1])
        }),
        grad: Box::new(|u| u.clone()),
        rhs: Box::new(move |u| {
            let d = u.as_slice();
            Tensor::from_raw(vec![2], vec![d[1], -d[0] - g * d[1]], u.precision())
        }),
        dgrad: Some(Box::new(|a, b| a.add(b).unwrap().scale(0.5))),
    })
}

/// Common stepper-facing view of analytic and learned systems.
pub trait System {
    fn dim(&self) -> usize;
    fn precision(&self) -> Precision;
    /// Time derivative `G ∇H(u)` (or the direct network output for
    /// derivative-field models).
    fn rhs(&self, u: &Tensor) -> Result<Tensor>;
    fn energy(&self, u: &Tensor) -> Result<f64>;
    fn grad(&self, u: &Tensor) -> Result<Tensor>;
    fn discrete_grad(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
    fn gspec(&self) -> Option<&GSpec>;
}

impl System for AnalyticSystem {
    fn dim(&self) -> usize {
        self.state_dim
    }
    fn precision(&self) -> Precision {
        Precision::Double
    }
    fn rhs(&self, u: &Tensor) -> Result<Tensor> {
        Ok(AnalyticSystem::rhs(self, u))
    }
    fn energy(&self, u: &Tensor) -> Result<f64> {
        Ok(AnalyticSystem::energy(self, u))
    }
    fn grad(&self, u: &Tensor) -> Result<Tensor> {
        Ok(AnalyticSystem::grad(self, u))
    }
    fn discrete_grad(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        AnalyticSystem::discrete_grad(self, a, b)
    }
    fn gspec(&self) -> Option<&GSpec> {
        Some(&self.gspec)
    }
}

/// A trained energy model paired with a known structure operator.
pub struct LearnedSystem {
    pub model: EnergyModel,
    pub gspec: GSpec,
    pub eps: Option<f64>,
}

impl System for LearnedSystem {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn precision(&self) -> Precision {
        self.model.precision
    }
    fn rhs(&self, u: &Tensor) -> Result<Tensor> {
        let g = self.model.grad(u)?;
        self.gspec.apply(&g)
    }
    fn energy(&self, u: &Tensor) -> Result<f64> {
        self.model.energy(u)
    }
    fn grad(&self, u: &Tensor) -> Result<Tensor> {
        self.model.grad(u)
    }
    fn discrete_grad(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(crate::dg::discrete_gradient(&self.model, a, b, self.eps)?.dg)
    }
    fn gspec(&self) -> Option<&GSpec> {
        Some(&self.gspec)
    }
}

/// Derivative-field model (no energy, no structure operator).
pub struct NodeSystem {
    pub model: crate::models::NodeModel,
}

impl System for NodeSystem {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn precision(&self) -> Precision {
        self.model.precision
    }
    fn rhs(&self, u: &Tensor) -> Result<Tensor> {
        self.model.rhs(u)
    }
    fn energy(&self, _u: &Tensor) -> Result<f64> {
        Err(TensorError::Invalid(
            "derivative-field models have no energy".into(),
        ))
    }
    fn grad(&self, _u: &Tensor) -> Result<Tensor> {
        Err(TensorError::Invalid(
            "derivative-field models have no energy gradient".into(),
        ))
    }
    fn discrete_grad(&self, _a: &Tensor, _b: &Tensor) -> Result<Tensor> {
        Err(TensorError::Invalid(
            "derivative-field models have no discrete gradient".into(),
        ))
    }
    fn gspec(&self) -> Option<&GSpec> {
        None
    }
}

/// Secant-based discrete gradient of a scalar function of one variable,
/// exposed for analytic systems assembled from elementwise pieces.
pub fn scalar_secant(h: f64, k: f64, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, eps: f64) -> f64 {
    if (h - k).abs() > eps {
        (f(h) - f(k)) / (h - k)
    } else {
        df(0.5 * (h + k))
    }
}

/// Convenience wrapper for tests: entrywise tanh secant slope.
pub fn tanh_secant(h: &Tensor, k: &Tensor, eps: f64) -> Result<Tensor> {
    secant_slope(h, k, Activation::Tanh, eps)
}
