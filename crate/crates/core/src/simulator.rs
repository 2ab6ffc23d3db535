//! Time stepping: predictive Euler integration, network position
//! correction, position-based velocity update and rollout generation.

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::network::{network_forward, ArchitectureConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParticleType {
    Fluid,
    Boundary,
}

/// Positions, velocities and input features of all particles at one instant.
///
/// Boundary particles are static: zero velocity, unit surface normal.
/// Accelerations carry the external force per unit mass as an input feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub positions: Matrix,
    pub velocities: Matrix,
    pub accelerations: Matrix,
    pub masses: Vec<f64>,
    pub types: Vec<ParticleType>,
    pub normals: Matrix,
}

impl ParticleState {
    pub fn new(
        positions: Matrix,
        velocities: Matrix,
        types: Vec<ParticleType>,
        normals: Matrix,
    ) -> Result<Self> {
        let n = positions.rows();
        let d = positions.cols();
        let state = ParticleState {
            accelerations: Matrix::zeros(n, d),
            masses: vec![1.0; n],
            positions,
            velocities,
            types,
            normals,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn fluid_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.types[i] == ParticleType::Fluid)
            .collect()
    }

    pub fn boundary_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.types[i] == ParticleType::Boundary)
            .collect()
    }

    pub fn fluid_count(&self) -> usize {
        self.types.iter().filter(|t| **t == ParticleType::Fluid).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.dim();
        if !(1..=3).contains(&d) {
            return Err(Error::input(format!("dimension must be 1..=3, got {d}")));
        }
        for (name, m) in [
            ("velocities", &self.velocities),
            ("accelerations", &self.accelerations),
            ("normals", &self.normals),
        ] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::input(format!(
                    "{name} shape {}x{} does not match positions {}x{}",
                    m.rows(),
                    m.cols(),
                    n,
                    d
                )));
            }
        }
        if self.types.len() != n || self.masses.len() != n {
            return Err(Error::input("types/masses length mismatch"));
        }
        if !self.positions.all_finite()
            || !self.velocities.all_finite()
            || !self.accelerations.all_finite()
            || !self.normals.all_finite()
            || !self.masses.iter().all(|m| m.is_finite())
        {
            return Err(Error::input("non-finite state value"));
        }
        for i in 0..n {
            if self.types[i] == ParticleType::Boundary {
                if self.velocities.row(i).iter().any(|v| *v != 0.0) {
                    return Err(Error::input(format!("boundary particle {i} has velocity")));
                }
                let norm: f64 = self.normals.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::input(format!(
                        "boundary normal {i} has length {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.positions.all_finite() && self.velocities.all_finite()
    }
}

/// Time step, external force per unit mass and the data particle radius.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub gravity: Vec<f64>,
    pub particle_radius: f64,
}

impl SimulationConfig {
    pub fn new(dt: f64, gravity: Vec<f64>, particle_radius: f64) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        if particle_radius <= 0.0 {
            return Err(Error::config("particle radius must be positive"));
        }
        if !(1..=3).contains(&gravity.len()) {
            return Err(Error::config("gravity must be 1-3 dimensional"));
        }
        Ok(SimulationConfig {
            dt,
            gravity,
            particle_radius,
        })
    }
}

/// Explicit Euler prediction: `v' = v + dt g`, `x' = x + dt v'` for fluid
/// particles; boundary particles are static. The acceleration feature is
/// set to the external force per unit mass.
pub fn euler_predict(state: &ParticleState, config: &SimulationConfig) -> ParticleState {
    let mut out = state.clone();
    let d = state.dim();
    for i in 0..state.len() {
        if state.types[i] != ParticleType::Fluid {
            out.accelerations.row_mut(i).fill(0.0);
            continue;
        }
        for a in 0..d {
            let v = state.velocities.get(i, a) + config.dt * config.gravity[a];
            out.velocities.set(i, a, v);
            out.positions.set(i, a, state.positions.get(i, a) + config.dt * v);
            out.accelerations.set(i, a, config.gravity[a]);
        }
    }
    out
}

/// One full step: predictive Euler, network residual applied to fluid
/// positions, velocities recomputed from positions. Boundary untouched.
pub fn step(
    state: &ParticleState,
    params: &ModelParams,
    arch: &ArchitectureConfig,
    config: &SimulationConfig,
) -> Result<ParticleState> {
    let provisional = euler_predict(state, config);
    let out = network_forward(&provisional, params, arch)?;
    let mut next = provisional;
    for (row, &i) in state.fluid_indices().iter().enumerate() {
        for a in 0..state.dim() {
            let x = next.positions.get(i, a) + out.delta_x.get(row, a);
            next.positions.set(i, a, x);
            next.velocities
                .set(i, a, (x - state.positions.get(i, a)) / config.dt);
        }
    }
    Ok(next)
}

/// Repeated stepping; returns all states including the initial one
/// (`steps + 1` frames). Detects divergence before a non-finite state can
/// propagate into the returned sequence.
pub fn rollout(
    state0: &ParticleState,
    params: &ModelParams,
    arch: &ArchitectureConfig,
    config: &SimulationConfig,
    steps: usize,
) -> Result<Vec<ParticleState>> {
    if steps == 0 {
        return Err(Error::input("rollout needs at least one step"));
    }
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(state0.clone());
    let mut current = state0.clone();
    for s in 1..=steps {
        current = step(&current, params, arch, config)?;
        if !current.all_finite() {
            return Err(Error::Diverged { step: s });
        }
        frames.push(current.clone());
    }
    Ok(frames)
}
