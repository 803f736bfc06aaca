//! Dataset generation, serialization, and ingestion.
//!
//! A dataset directory holds a JSON manifest plus one binary blob per split
//! (`train.bin`, `test.bin`, `long_term.bin`). Blob layout, little-endian:
//!
//! ```text
//! magic  b"DGDS"
//! u32    format version (1)
//! u8     precision (0 = single, 1 = double)
//! u64    trajectory count
//! per trajectory:
//!   u64  observation count
//!   u64  state dimension
//!   f64 × observations            times
//!   f64|f32 × observations·dim    states, row-major
//! u64    FNV-1a checksum of all preceding bytes
//! ```
//!
//! Regeneration from the same manifest seed is bitwise deterministic:
//! per-trajectory seeds are split off the manifest seed, so scheduling never
//! enters the stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrators::{
    rollout, DgSolverConfig, IntegratorError, SolverKind, StepperConfig,
};
use crate::systems::{ch_system, kdv_system, ode_system, AnalyticSystem, OdeName, System};
use crate::tensor::{Precision, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
    #[error("generation self-check failed: {0}")]
    GenerationCheck(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Time-indexed state sequence with generation metadata.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Tensor>) -> Self {
        debug_assert_eq!(times.len(), states.len());
        Trajectory { times, states }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map(|s| s.numel()).unwrap_or(0)
    }

    /// Uniform spacing when the grid is uniform to 1e-12.
    pub fn uniform_dt(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = self.times[1] - self.times[0];
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-12 {
                return None;
            }
        }
        Some(dt)
    }

    /// Consecutive state pairs with their spacing.
    pub fn pairs(&self) -> impl Iterator<Item = (&Tensor, &Tensor, f64)> {
        self.times
            .windows(2)
            .zip(self.states.windows(2))
            .map(|(t, s)| (&s[0], &s[1], t[1] - t[0]))
    }
}

/// Split sizes and grid info recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitInfo {
    pub n_traj: usize,
    pub n_obs: usize,
    pub dt: f64,
}

/// Generation record; identical manifests regenerate identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub system: String,
    pub precision: Precision,
    pub seed: u64,
    pub params: serde_json::Value,
    pub noise_sigma: f64,
    pub train: SplitInfo,
    pub test: SplitInfo,
    pub long_term: Option<SplitInfo>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub checksums: BTreeMap<String, u64>,
}

/// Train/test/long-term trajectory collections plus their manifest.
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub long_term: Vec<Trajectory>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[Trajectory] {
        match name {
            "train" => &self.train,
            "test" => &self.test,
            "long_term" => &self.long_term,
            _ => &[],
        }
    }
}

/// SplitMix64, used to derive independent per-trajectory seeds.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn uniform_times(n_obs: usize, dt: f64) -> Vec<f64> {
    (0..n_obs).map(|i| i as f64 * dt).collect()
}

/// Two-soliton initial profile on a periodic domain of length `n·dx`:
/// a sum of `−12/α·κ² sech²(κ·dist(x, d))` bumps with `κ ~ U(0.5, 2)` and
/// centers kept at least 2 space units apart (circular distance).
fn kdv_initial(n: usize, dx: f64, alpha: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let length = n as f64 * dx;
    let kappa1: f64 = rng.gen_range(0.5..2.0);
    let kappa2: f64 = rng.gen_range(0.5..2.0);
    let d1: f64 = rng.gen_range(0.0..length);
    let d2 = loop {
        let c: f64 = rng.gen_range(0.0..length);
        let mut dist = (c - d1).abs() % length;
        if dist > length / 2.0 {
            dist = length - dist;
        }
        if dist >= 2.0 {
            break c;
        }
    };
    let bump = |x: f64, center: f64, kappa: f64| {
        let mut d = (x - center).abs() % length;
        if d > length / 2.0 {
            d = length - d;
        }
        let s = 1.0 / (kappa * d).cosh();
        -12.0 / alpha * kappa * kappa * s * s
    };
    let data = (0..n)
        .map(|k| {
            let x = k as f64 * dx;
            bump(x, d1, kappa1) + bump(x, d2, kappa2)
        })
        .collect();
    Tensor::from_raw(vec![n], data, Precision::Double)
}

fn dg_generation_stepper(dt: f64) -> StepperConfig {
    StepperConfig::DiscreteGradient {
        dt,
        solver: DgSolverConfig {
            kind: SolverKind::NewtonFd,
            tol: 1e-13,
            max_iter: 50,
        },
    }
}

/// KdV two-soliton dataset generated with the discrete-gradient stepper, so
/// the data itself satisfies the discrete conservation laws. 90/10 split.
#[allow(clippy::too_many_arguments)]
pub fn gen_kdv(
    n_series: usize,
    steps: usize,
    dt: f64,
    n: usize,
    dx: f64,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<Dataset> {
    let system = kdv_system(n, dx, alpha, beta)?;
    let times = uniform_times(steps + 1, dt);
    let stepper = dg_generation_stepper(dt);
    let mut all = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
        let u0 = kdv_initial(n, dx, alpha, &mut rng);
        let r = rollout(&stepper, &system, &u0, &times)?;
        // Self-checks: the generator refuses data violating its own laws.
        let h0 = system.energy(&r.trajectory.states[0]);
        let m0: f64 = r.trajectory.states[0].sum() * dx;
        for s in &r.trajectory.states {
            let drift = (system.energy(s) - h0).abs();
            if drift > 1e-8 {
                return Err(DataError::GenerationCheck(format!(
                    "kdv energy drift {drift:.3e} on series {i}"
                )));
            }
            let mass_dev = (s.sum() * dx - m0).abs();
            if mass_dev > 1e-10 {
                return Err(DataError::GenerationCheck(format!(
                    "kdv mass deviation {mass_dev:.3e} on series {i}"
                )));
            }
        }
        all.push(r.trajectory);
    }
    let n_test = (n_series / 10).max(1).min(n_series);
    let n_train = n_series - n_test;
    let test = all.split_off(n_train);
    let manifest = Manifest {
        format_version: 1,
        system: "kdv".into(),
        precision: Precision::Double,
        seed,
        params: serde_json::json!({
            "n": n, "dx": dx, "alpha": alpha, "beta": beta,
            "steps": steps, "dt": dt, "n_series": n_series,
            "generator": "discrete_gradient",
        }),
        noise_sigma: 0.0,
        train: SplitInfo {
            n_traj: n_train,
            n_obs: steps + 1,
            dt,
        },
        test: SplitInfo {
            n_traj: n_test,
            n_obs: steps + 1,
            dt,
        },
        long_term: None,
        notes: vec![],
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train: all,
        test,
        long_term: Vec::new(),
    })
}

/// Cahn–Hilliard dataset from near-uniform random initial mixtures,
/// generated with the discrete-gradient stepper (dissipative branch).
#[allow(clippy::too_many_arguments)]
pub fn gen_ch(
    n_series: usize,
    steps: usize,
    dt: f64,
    n: usize,
    dx: f64,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    let system = ch_system(n, dx, gamma)?;
    let times = uniform_times(steps + 1, dt);
    let stepper = dg_generation_stepper(dt);
    let mut all = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
        let u0 = Tensor::from_raw(
            vec![n],
            (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            Precision::Double,
        );
        let r = rollout(&stepper, &system, &u0, &times)?;
        let m0: f64 = r.trajectory.states[0].sum() * dx;
        let mut prev = system.energy(&r.trajectory.states[0]);
        for (si, s) in r.trajectory.states.iter().enumerate().skip(1) {
            let h = system.energy(s);
            if h > prev + 1e-9 {
                return Err(DataError::GenerationCheck(format!(
                    "ch energy increased by {:.3e} at step {si} of series {i}",
                    h - prev
                )));
            }
            prev = h;
            let mass_dev = (s.sum() * dx - m0).abs();
            if mass_dev > 1e-10 {
                return Err(DataError::GenerationCheck(format!(
                    "ch mass deviation {mass_dev:.3e} on series {i}"
                )));
            }
        }
        all.push(r.trajectory);
    }
    let n_test = (n_series / 10).max(1).min(n_series);
    let n_train = n_series - n_test;
    let test = all.split_off(n_train);
    let manifest = Manifest {
        format_version: 1,
        system: "ch".into(),
        precision: Precision::Double,
        seed,
        params: serde_json::json!({
            "n": n, "dx": dx, "gamma": gamma,
            "steps": steps, "dt": dt, "n_series": n_series,
            "generator": "discrete_gradient",
        }),
        noise_sigma: 0.0,
        train: SplitInfo {
            n_traj: n_train,
            n_obs: steps + 1,
            dt,
        },
        test: SplitInfo {
            n_traj: n_test,
            n_obs: steps + 1,
            dt,
        },
        long_term: None,
        notes: vec!["energy monotone non-increasing verified per series".into()],
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train: all,
        test,
        long_term: Vec::new(),
    })
}

/// Per-system dataset schedule: trajectory counts, observation counts, and
/// durations for the train/test and long-term splits, plus the observation
/// noise level. The defaults mirror the reference benchmark suite; the
/// initial-condition radii are external conventions kept visible here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeGenSpec {
    pub train_traj: usize,
    pub test_traj: usize,
    pub obs: usize,
    pub duration: f64,
    pub lt_traj: usize,
    pub lt_obs: usize,
    pub lt_duration: f64,
    pub noise_sigma: f64,
    /// Use the long-term grid spacing for the train/test splits as well.
    pub unify_dt: bool,
}

impl OdeGenSpec {
    pub fn defaults(name: OdeName) -> Self {
        match name {
            OdeName::MassSpring => OdeGenSpec {
                train_traj: 25,
                test_traj: 25,
                obs: 30,
                duration: 3.0,
                lt_traj: 15,
                lt_obs: 100,
                lt_duration: 20.0,
                noise_sigma: 0.1,
                unify_dt: true,
            },
            OdeName::Pendulum => OdeGenSpec {
                train_traj: 25,
                test_traj: 25,
                obs: 45,
                duration: 3.0,
                lt_traj: 15,
                lt_obs: 100,
                lt_duration: 20.0,
                noise_sigma: 0.1,
                unify_dt: true,
            },
            OdeName::TwoBody => OdeGenSpec {
                train_traj: 800,
                test_traj: 200,
                obs: 50,
                duration: 20.0,
                lt_traj: 15,
                lt_obs: 500,
                lt_duration: 25.0,
                noise_sigma: 0.0,
                unify_dt: false,
            },
        }
    }
}

fn ode_initial(name: OdeName, rng: &mut ChaCha8Rng) -> Tensor {
    match name {
        OdeName::MassSpring => {
            // Direction uniform on the circle, radius in [0.1, 1.0].
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius: f64 = rng.gen_range(0.1..1.0);
            Tensor::from_raw(
                vec![2],
                vec![radius * angle.cos(), radius * angle.sin()],
                Precision::Double,
            )
        }
        OdeName::Pendulum => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius: f64 = rng.gen_range(1.3..2.3);
            Tensor::from_raw(
                vec![2],
                vec![radius * angle.cos(), radius * angle.sin()],
                Precision::Double,
            )
        }
        OdeName::TwoBody => {
            // Near-circular orbit of unit masses about the barycenter:
            // separation r in [1.0, 3.0], tangential speed perturbed ±10%.
            let r: f64 = rng.gen_range(0.5..1.5) * 2.0;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let v_circ = (1.0 / (2.0 * r)).sqrt();
            let v = v_circ * rng.gen_range(0.9..1.1);
            let (c, s) = (phase.cos(), phase.sin());
            let q1 = [0.5 * r * c, 0.5 * r * s];
            let q2 = [-q1[0], -q1[1]];
            let p1 = [-v * s, v * c];
            let p2 = [v * s, -v * c];
            Tensor::from_raw(
                vec![8],
                vec![q1[0], q1[1], q2[0], q2[1], p1[0], p1[1], p2[0], p2[1]],
                Precision::Double,
            )
        }
    }
}

/// Benchmark ODE dataset: high-accuracy adaptive reference rollouts sampled
/// on a uniform grid, with Gaussian observation noise added to the train and
/// test splits (never to the long-term split's initial states' source
/// trajectories' clean checks).
pub fn gen_ode(name: OdeName, spec: &OdeGenSpec, seed: u64) -> Result<Dataset> {
    let system = ode_system(name);
    let reference = StepperConfig::DopriAdaptive {
        rtol: 1e-10,
        atol: 1e-10,
        min_step: 1e-14,
        max_step: f64::INFINITY,
    };
    let lt_dt = spec.lt_duration / (spec.lt_obs as f64 - 1.0);
    let (dt, n_obs) = if spec.unify_dt {
        (lt_dt, spec.obs)
    } else {
        (spec.duration / (spec.obs as f64 - 1.0), spec.obs)
    };

    let mut gen_split = |count: usize,
                         n_obs: usize,
                         dt: f64,
                         noise: f64,
                         salt: u64|
     -> Result<Vec<Trajectory>> {
        let times = uniform_times(n_obs, dt);
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, salt.wrapping_add(i as u64)));
            let u0 = ode_initial(name, &mut rng);
            let r = rollout(&reference, &system, &u0, &times)?;
            let mut traj = r.trajectory;
            // Clean-rollout self-check: conservative systems stay on-shell.
            let h0 = system.energy(&traj.states[0]);
            for s in &traj.states {
                if (system.energy(s) - h0).abs() > 1e-6 {
                    return Err(DataError::GenerationCheck(format!(
                        "reference rollout drifted {:.3e} on {name:?} series {i}",
                        (system.energy(s) - h0).abs()
                    )));
                }
            }
            if noise > 0.0 {
                for s in traj.states.iter_mut() {
                    let d = s.as_mut_slice();
                    for x in d.iter_mut() {
                        *x += noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            out.push(traj);
        }
        Ok(out)
    };

    let train = gen_split(spec.train_traj, n_obs, dt, spec.noise_sigma, 0)?;
    let test = gen_split(spec.test_traj, n_obs, dt, spec.noise_sigma, 1_000_000)?;
    let long_term = gen_split(spec.lt_traj, spec.lt_obs, lt_dt, 0.0, 2_000_000)?;

    let sys_name = match name {
        OdeName::MassSpring => "mass_spring",
        OdeName::Pendulum => "pendulum",
        OdeName::TwoBody => "twobody",
    };
    let manifest = Manifest {
        format_version: 1,
        system: sys_name.into(),
        precision: Precision::Double,
        seed,
        params: serde_json::to_value(spec)?,
        noise_sigma: spec.noise_sigma,
        train: SplitInfo {
            n_traj: spec.train_traj,
            n_obs,
            dt,
        },
        test: SplitInfo {
            n_traj: spec.test_traj,
            n_obs,
            dt,
        },
        long_term: Some(SplitInfo {
            n_traj: spec.lt_traj,
            n_obs: spec.lt_obs,
            dt: lt_dt,
        }),
        notes: vec![format!(
            "reference integrator: adaptive dopri rtol=atol=1e-10; unify_dt={}",
            spec.unify_dt
        )],
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train,
        test,
        long_term,
    })
}

/// Synthetic damped-oscillator dataset (`G = S − R`, known friction) for the
/// friction-recovery path.
pub fn gen_damped_spring(
    friction: f64,
    n_traj: usize,
    n_obs: usize,
    dt: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let system = crate::systems::damped_oscillator(friction, false)?;
    let reference = StepperConfig::DopriAdaptive {
        rtol: 1e-10,
        atol: 1e-10,
        min_step: 1e-14,
        max_step: f64::INFINITY,
    };
    let times = uniform_times(n_obs, dt);
    let mut train = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius: f64 = rng.gen_range(0.5..1.5);
        let u0 = Tensor::from_raw(
            vec![2],
            vec![radius * angle.cos(), radius * angle.sin()],
            Precision::Double,
        );
        let r = rollout(&reference, &system, &u0, &times)?;
        let mut traj = r.trajectory;
        if noise_sigma > 0.0 {
            for s in traj.states.iter_mut() {
                for x in s.as_mut_slice().iter_mut() {
                    *x += noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        train.push(traj);
    }
    let test = train.split_off(n_traj - (n_traj / 5).max(1));
    let manifest = Manifest {
        format_version: 1,
        system: "damped_spring".into(),
        precision: Precision::Double,
        seed,
        params: serde_json::json!({
            "friction": friction, "n_traj": n_traj, "n_obs": n_obs, "dt": dt,
        }),
        noise_sigma,
        train: SplitInfo {
            n_traj: n_traj - test.len(),
            n_obs,
            dt,
        },
        test: SplitInfo {
            n_traj: test.len(),
            n_obs,
            dt,
        },
        long_term: None,
        notes: vec![],
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train,
        test,
        long_term: Vec::new(),
    })
}

/// Reads a delimited text file with a header naming `time, q, p` columns
/// (comma or whitespace separated) into a single-series dataset, split in
/// half into train and test along the time axis.
pub fn load_real_pendulum(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| DataError::Format("empty file".into()))?;
    let cols: Vec<String> = header
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().to_lowercase())
        .collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::Format(format!("missing column '{name}'")))
    };
    let (ti, qi, pi) = (find("time")?, find("q")?, find("p")?);
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() < cols.len() {
            return Err(DataError::Format(format!(
                "row {} has {} fields, expected {}",
                ln + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse = |idx: usize| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .map_err(|e| DataError::Format(format!("row {}: {e}", ln + 2)))
        };
        times.push(parse(ti)?);
        states.push(Tensor::from_raw(
            vec![2],
            vec![parse(qi)?, parse(pi)?],
            Precision::Double,
        ));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DataError::Format("time column is not increasing".into()));
    }
    let n = times.len();
    let half = n / 2;
    let dt = if n >= 2 { times[1] - times[0] } else { 0.0 };
    let train = Trajectory::new(times[..half].to_vec(), states[..half].to_vec());
    let test = Trajectory::new(times[half..].to_vec(), states[half..].to_vec());
    let manifest = Manifest {
        format_version: 1,
        system: "real_pendulum".into(),
        precision: Precision::Double,
        seed: 0,
        params: serde_json::json!({ "source": path.display().to_string() }),
        noise_sigma: 0.0,
        train: SplitInfo {
            n_traj: 1,
            n_obs: half,
            dt,
        },
        test: SplitInfo {
            n_traj: 1,
            n_obs: n - half,
            dt,
        },
        long_term: None,
        notes: vec![
            "single measured series split in half along time: first half train, second half test"
                .into(),
            "momentum readings passed through untransformed".into(),
        ],
        checksums: BTreeMap::new(),
    };
    Ok(Dataset {
        manifest,
        train: vec![train],
        test: vec![test.clone()],
        long_term: vec![test],
    })
}

const BLOB_MAGIC: &[u8; 4] = b"DGDS";
const BLOB_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn encode_split(trajectories: &[Trajectory], precision: Precision) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.push(match precision {
        Precision::Single => 0,
        Precision::Double => 1,
    });
    buf.extend_from_slice(&(trajectories.len() as u64).to_le_bytes());
    for t in trajectories {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.dim() as u64).to_le_bytes());
        for &tv in &t.times {
            buf.extend_from_slice(&tv.to_le_bytes());
        }
        for s in &t.states {
            for &x in s.as_slice() {
                match precision {
                    Precision::Single => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::Double => buf.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

fn decode_split(bytes: &[u8], what: &str) -> Result<Vec<Trajectory>> {
    if bytes.len() < 4 + 4 + 1 + 8 + 8 {
        return Err(DataError::Format(format!("{what}: truncated blob")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(DataError::ChecksumMismatch(what.into()));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(DataError::Format(format!("{what}: truncated blob")));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != BLOB_MAGIC {
        return Err(DataError::VersionMismatch(0));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(DataError::VersionMismatch(version));
    }
    let precision = match take(&mut pos, 1)?[0] {
        0 => Precision::Single,
        1 => Precision::Double,
        p => return Err(DataError::Format(format!("{what}: bad precision tag {p}"))),
    };
    let n_traj = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let n_obs = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut times = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            times.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut states = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let mut data = Vec::with_capacity(dim);
            for _ in 0..dim {
                let x = match precision {
                    Precision::Single => {
                        f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64
                    }
                    Precision::Double => {
                        f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap())
                    }
                };
                data.push(x);
            }
            states.push(Tensor::from_raw(vec![dim], data, precision));
        }
        out.push(Trajectory::new(times, states));
    }
    if pos != body.len() {
        return Err(DataError::Format(format!("{what}: trailing bytes")));
    }
    Ok(out)
}

/// Writes `manifest.json` plus one blob per split into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = dataset.manifest.clone();
    manifest.checksums.clear();
    for (name, split) in [
        ("train", &dataset.train),
        ("test", &dataset.test),
        ("long_term", &dataset.long_term),
    ] {
        if split.is_empty() && name == "long_term" {
            continue;
        }
        let blob = encode_split(split, manifest.precision);
        manifest.checksums.insert(name.to_string(), fnv1a(&blob));
        let mut f = fs::File::create(dir.join(format!("{name}.bin")))?;
        f.write_all(&blob)?;
    }
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Loads a dataset directory, verifying versions and checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(DataError::VersionMismatch(manifest.format_version));
    }
    let read_split = |name: &str| -> Result<Vec<Trajectory>> {
        let path = dir.join(format!("{name}.bin"));
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        decode_split(&bytes, name)
    };
    Ok(Dataset {
        train: read_split("train")?,
        test: read_split("test")?,
        long_term: read_split("long_term")?,
        manifest,
    })
}
