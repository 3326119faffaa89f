//! Stochastic dynamical systems and their numerical integration.
//!
//! Trajectories are produced with the Stratonovich–Heun predictor-corrector
//! scheme. Diffusion is additive and isotropic, so the Stratonovich and Itô
//! integrals coincide; the noise scale is calibrated relative to the
//! root-mean-square amplitude of the noiseless system.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::rng;

/// Steps discarded at the start of every integration so trajectories start
/// on (or near) the system's attractor.
pub const BURN_IN: usize = 200;

/// Any state coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Initial conditions are redrawn at most this many times on divergence.
pub const MAX_REDRAWS: usize = 5;

/// Dynamical-system family with its named parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FamilyParams {
    Lorenz {
        s: f64,
        rho: f64,
        beta: f64,
    },
    Thomas {
        b: f64,
    },
    HindmarshRose {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        r: f64,
        s: f64,
        x_r: f64,
        i_ext: f64,
    },
    /// dy/dt = −y. Scalar reference system used for integrator
    /// verification (closed-form solution available).
    ExpDecay,
    /// dy/dt = 0. Scalar reference system used for noise-statistics
    /// checks.
    ZeroDrift,
}

impl FamilyParams {
    pub fn dims(&self) -> usize {
        match self {
            FamilyParams::Lorenz { .. }
            | FamilyParams::Thomas { .. }
            | FamilyParams::HindmarshRose { .. } => 3,
            FamilyParams::ExpDecay | FamilyParams::ZeroDrift => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyParams::Lorenz { .. } => "lorenz",
            FamilyParams::Thomas { .. } => "thomas",
            FamilyParams::HindmarshRose { .. } => "hindmarsh-rose",
            FamilyParams::ExpDecay => "exp-decay",
            FamilyParams::ZeroDrift => "zero-drift",
        }
    }

    /// The swept parameter value identifying this configuration.
    pub fn swept_value(&self) -> f64 {
        match *self {
            FamilyParams::Lorenz { rho, .. } => rho,
            FamilyParams::Thomas { b } => b,
            FamilyParams::HindmarshRose { i_ext, .. } => i_ext,
            FamilyParams::ExpDecay | FamilyParams::ZeroDrift => 0.0,
        }
    }
}

/// A parameterized stochastic system plus integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub params: FamilyParams,
    /// Dimensionless noise level; the diffusion coefficient is
    /// `sigma * rms(noiseless system)`.
    pub sigma: f64,
    pub dt: f64,
}

impl SystemSpec {
    pub fn new(params: FamilyParams, sigma: f64, dt: f64) -> Result<SystemSpec> {
        if !(dt > 0.0) {
            return Err(PulseError::Parameter(format!("dt must be positive, got {dt}")));
        }
        if !(sigma >= 0.0) {
            return Err(PulseError::Parameter(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        Ok(SystemSpec { params, sigma, dt })
    }

    /// Lorenz with the fixed constants of the benchmark; `rho` is swept.
    pub fn lorenz(rho: f64, sigma: f64, dt: f64) -> Result<SystemSpec> {
        SystemSpec::new(
            FamilyParams::Lorenz {
                s: 28.0,
                rho,
                beta: 8.0 / 3.0,
            },
            sigma,
            dt,
        )
    }

    /// Thomas cyclically symmetric system; `b` is swept.
    pub fn thomas(b: f64, sigma: f64, dt: f64) -> Result<SystemSpec> {
        SystemSpec::new(FamilyParams::Thomas { b }, sigma, dt)
    }

    /// Hindmarsh-Rose in the standard bursting regime; the external
    /// current `i_ext` is swept.
    pub fn hindmarsh_rose(i_ext: f64, sigma: f64, dt: f64) -> Result<SystemSpec> {
        SystemSpec::new(
            FamilyParams::HindmarshRose {
                a: 1.0,
                b: 3.0,
                c: 1.0,
                d: 5.0,
                r: 0.006,
                s: 4.0,
                x_r: -1.6,
                i_ext,
            },
            sigma,
            dt,
        )
    }

    pub fn dims(&self) -> usize {
        self.params.dims()
    }
}

/// The ten swept values per family, in sweep order.
pub fn parameter_grid(family: &str) -> Result<Vec<f64>> {
    match family {
        "lorenz" => Ok(vec![
            28.0, 41.0, 55.0, 69.0, 83.0, 96.0, 110.0, 124.0, 138.0, 152.0,
        ]),
        "thomas" => Ok((1..=10).map(|k| 0.025 * k as f64).collect()),
        "hindmarsh-rose" => Ok(vec![
            1.0, 1.33, 1.66, 2.0, 2.33, 2.66, 3.0, 3.33, 3.66, 4.0,
        ]),
        other => Err(PulseError::Parameter(format!("unknown family '{other}'"))),
    }
}

/// Build the spec for one grid entry of a named family.
pub fn spec_for(family: &str, value: f64, sigma: f64, dt: f64) -> Result<SystemSpec> {
    match family {
        "lorenz" => SystemSpec::lorenz(value, sigma, dt),
        "thomas" => SystemSpec::thomas(value, sigma, dt),
        "hindmarsh-rose" => SystemSpec::hindmarsh_rose(value, sigma, dt),
        other => Err(PulseError::Parameter(format!("unknown family '{other}'"))),
    }
}

/// Deterministic right-hand side f(y) of the system's ODE.
pub fn drift(spec: &SystemSpec, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != spec.dims() {
        return Err(PulseError::Dimension(format!(
            "drift: state has {} dims, system expects {}",
            y.len(),
            spec.dims()
        )));
    }
    Ok(match spec.params {
        FamilyParams::Lorenz { s, rho, beta } => vec![
            s * (y[1] - y[0]),
            y[0] * (rho - y[2]) - y[1],
            y[0] * y[1] - beta * y[2],
        ],
        FamilyParams::Thomas { b } => vec![
            y[1].sin() - b * y[0],
            y[2].sin() - b * y[1],
            y[0].sin() - b * y[2],
        ],
        FamilyParams::HindmarshRose {
            a,
            b,
            c,
            d,
            r,
            s,
            x_r,
            i_ext,
        } => vec![
            y[1] - a * y[0].powi(3) + b * y[0].powi(2) - y[2] + i_ext,
            c - d * y[0].powi(2) - y[1],
            r * (s * (y[0] - x_r) - y[2]),
        ],
        FamilyParams::ExpDecay => vec![-y[0]],
        FamilyParams::ZeroDrift => vec![0.0],
    })
}

/// An integrated sample path, burn-in already discarded. Values are
/// row-major `[t_len, dims]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub t_len: usize,
    pub dims: usize,
    pub spec: SystemSpec,
    pub seed: u64,
    pub burn_in_dropped: usize,
}

impl Trajectory {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }
}

/// Integrate with an explicit diffusion coefficient and burn-in.
///
/// Each step draws a shared increment ΔB ~ Normal(0, dt·I), forms the
/// predictor ŷ = y + f(y)dt + σ̃ΔB, then corrects
/// y' = y + ½(f(y) + f(ŷ))dt + σ̃ΔB. States after the first `burn_in`
/// steps are recorded, giving `steps - burn_in` rows.
pub fn integrate_raw(
    spec: &SystemSpec,
    y0: &[f64],
    steps: usize,
    burn_in: usize,
    sigma_tilde: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let m = spec.dims();
    if y0.len() != m {
        return Err(PulseError::Dimension(format!(
            "integrate: y0 has {} dims, system expects {}",
            y0.len(),
            m
        )));
    }
    if steps <= burn_in {
        return Err(PulseError::Parameter(format!(
            "integrate: steps ({steps}) must exceed burn-in ({burn_in})"
        )));
    }
    let dt = spec.dt;
    let sqrt_dt = dt.sqrt();
    let mut y = y0.to_vec();
    let mut values = Vec::with_capacity((steps - burn_in) * m);
    let mut db = vec![0.0; m];
    let mut yhat = vec![0.0; m];
    for step in 0..steps {
        if sigma_tilde > 0.0 {
            for v in db.iter_mut() {
                *v = rng::normal(rng) * sqrt_dt;
            }
        }
        let fy = drift(spec, &y)?;
        for k in 0..m {
            yhat[k] = y[k] + fy[k] * dt + sigma_tilde * db[k];
        }
        let fh = drift(spec, &yhat)?;
        for k in 0..m {
            y[k] += 0.5 * (fy[k] + fh[k]) * dt + sigma_tilde * db[k];
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(PulseError::IntegrationDiverged {
                step,
                detail: format!("state left the bounded region: {:?}", y),
            });
        }
        if step >= burn_in {
            values.extend_from_slice(&y);
        }
    }
    Ok(Trajectory {
        values,
        t_len: steps - burn_in,
        dims: m,
        spec: *spec,
        seed: 0,
        burn_in_dropped: burn_in,
    })
}

/// Root-mean-square amplitude of the noiseless system, estimated from
/// three reference trajectories of 2e4 steps with standard-normal initial
/// conditions (divergent draws are retried).
pub fn estimate_rms(spec: &SystemSpec, rng_seed: u64) -> Result<f64> {
    let noiseless = SystemSpec {
        sigma: 0.0,
        ..*spec
    };
    let m = spec.dims();
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for k in 0..3 {
        let mut rng = rng::stream(rng_seed, &format!("rms/{}/{}", spec.params.name(), k));
        let mut done = false;
        for _attempt in 0..=MAX_REDRAWS {
            let y0: Vec<f64> = (0..m).map(|_| rng::normal(&mut rng)).collect();
            match integrate_raw(&noiseless, &y0, 20_000, BURN_IN, 0.0, &mut rng) {
                Ok(traj) => {
                    sum_sq += traj.values.iter().map(|v| v * v).sum::<f64>();
                    count += traj.values.len();
                    done = true;
                    break;
                }
                Err(PulseError::IntegrationDiverged { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            return Err(PulseError::IntegrationDiverged {
                step: 0,
                detail: format!(
                    "reference trajectory diverged on {} consecutive initial conditions",
                    MAX_REDRAWS + 1
                ),
            });
        }
    }
    Ok((sum_sq / count as f64).sqrt())
}

/// Root-mean-square of an explicit value list (reference for tests and
/// diagnostics).
pub fn rms_of(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Integrate one trajectory at the calibrated noise scale
/// `sigma_tilde = sigma * estimate_rms(spec)`, discarding the standard
/// burn-in. Pass the precomputed RMS to avoid re-estimating it per call.
pub fn integrate(
    spec: &SystemSpec,
    y0: &[f64],
    steps: usize,
    rms: f64,
    rng_seed: u64,
) -> Result<Trajectory> {
    let mut rng = rng::stream(rng_seed, "integrate");
    let sigma_tilde = spec.sigma * rms;
    let mut traj = integrate_raw(spec, y0, steps, BURN_IN, sigma_tilde, &mut rng)?;
    traj.seed = rng_seed;
    Ok(traj)
}
