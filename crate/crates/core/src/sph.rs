//! Reference ground-truth generation: SPH density, an explicit weakly
//! compressible solver, an iterative density-relaxation solver for the 1D
//! column scenes, and the scene builders (liquid column, free fall,
//! colliding drops).
//!
//! Unit conventions: particles carry unit mass, the rest density is
//! calibrated from the uniform rest lattice at spacing `2 * particle
//! radius`, and the pressure stiffness multiplies the absolute density
//! deviation `rho - rho0` (the relative form with stiffness 10 would put
//! the speed of sound below the flow speed).

use crate::error::{Error, Result};
use crate::geometry::{fixed_radius_neighbors, PointSet};
use crate::mat::Matrix;
use crate::simulator::{ParticleState, ParticleType};

/// Reference solver parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Particle radius (m); rest spacing is twice this.
    pub particle_radius: f64,
    /// Kernel support radius as a multiple of the particle radius.
    pub support_scale: f64,
    /// Frame time step of the iterative solver (s).
    pub dt: f64,
    /// Sub-step of the explicit solver (s).
    pub dt_explicit: f64,
    /// Pressure stiffness (m^2/s^2): p = stiffness * (rho - rho0).
    pub stiffness: f64,
    pub viscosity: f64,
    pub gravity_magnitude: f64,
    /// Density-error tolerance of the iterative solver.
    pub density_tolerance: f64,
    pub max_pressure_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            particle_radius: 0.005,
            support_scale: 4.0,
            dt: 0.0025,
            dt_explicit: 0.00025,
            stiffness: 10.0,
            viscosity: 1e-4,
            gravity_magnitude: 9.81,
            density_tolerance: 0.01,
            max_pressure_iters: 500,
        }
    }
}

impl SolverConfig {
    pub fn support_radius(&self) -> f64 {
        self.support_scale * self.particle_radius
    }

    pub fn rest_spacing(&self) -> f64 {
        2.0 * self.particle_radius
    }
}

/// Scene descriptor used by the data-generation commands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Column,
    FreeFall,
    Drops2d,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub min_count: usize,
    pub max_count: usize,
    pub frames: usize,
    /// Free-fall release height above the rest position (m).
    pub height: f64,
    /// Half-width of each drop in lattice points.
    pub drop_lattice_radius: usize,
    /// Initial speed of each drop toward the other (m/s).
    pub drop_speed: f64,
}

impl SceneSpec {
    pub fn column() -> Self {
        SceneSpec {
            kind: SceneKind::Column,
            min_count: 1,
            max_count: 40,
            frames: 100,
            height: 0.01,
            drop_lattice_radius: 3,
            drop_speed: 0.5,
        }
    }

    pub fn free_fall() -> Self {
        SceneSpec {
            kind: SceneKind::FreeFall,
            min_count: 1,
            max_count: 5,
            frames: 100,
            height: 0.01,
            drop_lattice_radius: 3,
            drop_speed: 0.5,
        }
    }

    pub fn drops2d() -> Self {
        SceneSpec {
            kind: SceneKind::Drops2d,
            min_count: 1,
            max_count: 1,
            frames: 60,
            height: 0.01,
            drop_lattice_radius: 3,
            drop_speed: 0.5,
        }
    }
}

/// One recorded time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub positions: Matrix,
    pub velocities: Matrix,
}

/// A simulated sequence with its static particle attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub dt: f64,
    pub gravity: Vec<f64>,
    pub particle_radius: f64,
    pub types: Vec<ParticleType>,
    pub normals: Matrix,
    pub masses: Vec<f64>,
    pub frames: Vec<Frame>,
    /// Frames where the iterative solver hit its iteration cap.
    pub flagged_frames: Vec<usize>,
}

impl Scene {
    pub fn dim(&self) -> usize {
        self.gravity.len()
    }

    pub fn particle_count(&self) -> usize {
        self.types.len()
    }

    pub fn fluid_count(&self) -> usize {
        self.types.iter().filter(|t| **t == ParticleType::Fluid).count()
    }

    /// Assemble the particle state of frame `t`.
    pub fn state_at(&self, t: usize) -> ParticleState {
        let f = &self.frames[t];
        ParticleState {
            positions: f.positions.clone(),
            velocities: f.velocities.clone(),
            accelerations: Matrix::zeros(f.positions.rows(), self.dim()),
            masses: self.masses.clone(),
            types: self.types.clone(),
            normals: self.normals.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub scenes: Vec<Scene>,
}

impl TrajectoryDataset {
    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// poly6 smoothing kernel with a dimension-correct normalization so that
/// the kernel integrates to one over its support.
pub fn poly6_kernel(dist: f64, h: f64, dim: usize) -> f64 {
    if dist >= h {
        return 0.0;
    }
    let x = h * h - dist * dist;
    poly6_norm(h, dim) * x * x * x
}

fn poly6_norm(h: f64, dim: usize) -> f64 {
    match dim {
        1 => 35.0 / (32.0 * h.powi(7)),
        2 => 4.0 / (std::f64::consts::PI * h.powi(8)),
        3 => 315.0 / (64.0 * std::f64::consts::PI * h.powi(9)),
        _ => panic!("dimension must be 1..=3"),
    }
}

/// Magnitude of the spiky kernel gradient, `|dW/dr| = 3 C (h - r)^2`.
fn spiky_grad_coeff(h: f64, dim: usize) -> f64 {
    match dim {
        1 => 2.0 / h.powi(4),
        2 => 10.0 / (std::f64::consts::PI * h.powi(5)),
        3 => 15.0 / (std::f64::consts::PI * h.powi(6)),
        _ => panic!("dimension must be 1..=3"),
    }
}

/// dW_spiky/dr at distance `r` (negative inside the support).
fn spiky_grad(dist: f64, h: f64, dim: usize) -> f64 {
    if dist >= h {
        return 0.0;
    }
    let t = h - dist;
    -3.0 * spiky_grad_coeff(h, dim) * t * t
}

/// Viscosity Laplacian, linear in `h - r`, normalized so its integral over
/// the support is `15 / h^2` in every dimension.
fn visc_laplacian(dist: f64, h: f64, dim: usize) -> f64 {
    if dist >= h {
        return 0.0;
    }
    let c = match dim {
        1 => 15.0 / h.powi(4),
        2 => 45.0 / (std::f64::consts::PI * h.powi(5)),
        3 => 45.0 / (std::f64::consts::PI * h.powi(6)),
        _ => panic!("dimension must be 1..=3"),
    };
    c * (h - dist)
}

/// SPH density: `rho_i = sum_j m_j W(|x_i - x_j|, h)` (self included).
pub fn sph_density(points: &PointSet, masses: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::input("support radius must be positive"));
    }
    if masses.len() != points.len() {
        return Err(Error::input("masses length mismatch"));
    }
    let dim = points.dim();
    let nl = fixed_radius_neighbors(points, points, h)?;
    let mut rho = vec![0.0; points.len()];
    for i in 0..points.len() {
        let mut acc = 0.0;
        for &j in nl.neighbors(i) {
            let mut d2 = 0.0;
            for (a, b) in points.point(i).iter().zip(points.point(j)) {
                d2 += (a - b) * (a - b);
            }
            acc += masses[j] * poly6_kernel(d2.sqrt(), h, dim);
        }
        rho[i] = acc;
    }
    Ok(rho)
}

/// Rest density of a uniform lattice at the given spacing: the density an
/// interior particle of an infinite lattice would see.
pub fn rest_density(dim: usize, spacing: f64, mass: f64, h: f64) -> f64 {
    let reach = (h / spacing).ceil() as i64 + 1;
    let mut rho = 0.0;
    let cells: Vec<i64> = (-reach..=reach).collect();
    match dim {
        1 => {
            for &i in &cells {
                let r = (i as f64 * spacing).abs();
                rho += mass * poly6_kernel(r, h, 1);
            }
        }
        2 => {
            for &i in &cells {
                for &j in &cells {
                    let r = ((i * i + j * j) as f64).sqrt() * spacing;
                    rho += mass * poly6_kernel(r, h, 2);
                }
            }
        }
        3 => {
            for &i in &cells {
                for &j in &cells {
                    for &k in &cells {
                        let r = ((i * i + j * j + k * k) as f64).sqrt() * spacing;
                        rho += mass * poly6_kernel(r, h, 3);
                    }
                }
            }
        }
        _ => panic!("dimension must be 1..=3"),
    }
    rho
}

fn viscosity_accel(
    state: &ParticleState,
    nl: &crate::geometry::NeighborList,
    rho: &[f64],
    cfg: &SolverConfig,
) -> Matrix {
    let d = state.dim();
    let h = cfg.support_radius();
    let mut acc = Matrix::zeros(state.len(), d);
    if cfg.viscosity == 0.0 {
        return acc;
    }
    for i in 0..state.len() {
        if state.types[i] != ParticleType::Fluid {
            continue;
        }
        for &j in nl.neighbors(i) {
            if j == i {
                continue;
            }
            let mut d2 = 0.0;
            for (a, b) in state.positions.row(i).iter().zip(state.positions.row(j)) {
                d2 += (a - b) * (a - b);
            }
            let dist = d2.sqrt();
            let lap = visc_laplacian(dist, h, d);
            if lap == 0.0 {
                continue;
            }
            // Symmetric in (i, j), so viscosity exchanges momentum exactly.
            let coef = cfg.viscosity * state.masses[j] * lap / (rho[i] * rho[j]);
            for a in 0..d {
                let dv = state.velocities.get(j, a) - state.velocities.get(i, a);
                let v = acc.get(i, a) + coef * dv;
                acc.set(i, a, v);
            }
        }
    }
    acc
}

/// One explicit weakly compressible SPH step (semi-implicit Euler).
/// Boundary particles contribute to density and pressure but do not move.
pub fn explicit_wcsph_step(state: &ParticleState, cfg: &SolverConfig) -> Result<ParticleState> {
    explicit_step_dt(state, cfg, cfg.dt_explicit)
}

fn explicit_step_dt(state: &ParticleState, cfg: &SolverConfig, dt: f64) -> Result<ParticleState> {
    let d = state.dim();
    let h = cfg.support_radius();
    let pts = PointSet::new(state.positions.clone())?;
    let nl = fixed_radius_neighbors(&pts, &pts, h)?;
    let rho = sph_density(&pts, &state.masses, h)?;
    let rho0 = rest_density(d, cfg.rest_spacing(), 1.0, h);
    // p = stiffness * (rho - rho0), clamped so free surfaces exert no pull.
    let pressure: Vec<f64> = rho
        .iter()
        .map(|r| (cfg.stiffness * (r - rho0)).max(0.0))
        .collect();
    let visc = viscosity_accel(state, &nl, &rho, cfg);

    let mut gravity = vec![0.0; d];
    let down = if d == 1 { 0 } else { 1 };
    gravity[down] = -cfg.gravity_magnitude;

    let mut next = state.clone();
    for i in 0..state.len() {
        if state.types[i] != ParticleType::Fluid {
            continue;
        }
        let mut accel = vec![0.0; d];
        for &j in nl.neighbors(i) {
            if j == i {
                continue;
            }
            let mut d2 = 0.0;
            for (a, b) in state.positions.row(i).iter().zip(state.positions.row(j)) {
                d2 += (a - b) * (a - b);
            }
            let dist = d2.sqrt();
            if dist <= 0.0 || dist >= h {
                continue;
            }
            let dw = spiky_grad(dist, h, d);
            let coef = -state.masses[j]
                * (pressure[i] / (rho[i] * rho[i]) + pressure[j] / (rho[j] * rho[j]))
                * dw
                / dist;
            for a in 0..d {
                accel[a] += coef * (state.positions.get(i, a) - state.positions.get(j, a));
            }
        }
        for a in 0..d {
            accel[a] += visc.get(i, a) + gravity[a];
            let v = state.velocities.get(i, a) + dt * accel[a];
            next.velocities.set(i, a, v);
            next.positions.set(i, a, state.positions.get(i, a) + dt * v);
        }
    }
    if !next.all_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok(next)
}

/// One iterative solver step: gravity/viscosity prediction followed by
/// Jacobi density-relaxation sweeps that move particles until the maximum
/// compression error drops below the tolerance (and the sweep displacement
/// has converged), or the iteration cap is reached.
///
/// Returns the new state and whether the relaxation converged.
pub fn iterative_column_step(state: &ParticleState, cfg: &SolverConfig) -> Result<(ParticleState, bool)> {
    let d = state.dim();
    let h = cfg.support_radius();
    let dt = cfg.dt;
    let rho0 = rest_density(d, cfg.rest_spacing(), 1.0, h);

    let mut gravity = vec![0.0; d];
    let down = if d == 1 { 0 } else { 1 };
    gravity[down] = -cfg.gravity_magnitude;

    // Predictor: gravity + viscosity.
    let pts0 = PointSet::new(state.positions.clone())?;
    let nl0 = fixed_radius_neighbors(&pts0, &pts0, h)?;
    let rho_pred = sph_density(&pts0, &state.masses, h)?;
    let visc = viscosity_accel(state, &nl0, &rho_pred, cfg);

    let mut next = state.clone();
    for i in 0..state.len() {
        if state.types[i] != ParticleType::Fluid {
            continue;
        }
        for a in 0..d {
            let v = state.velocities.get(i, a) + dt * (gravity[a] + visc.get(i, a));
            next.velocities.set(i, a, v);
            next.positions.set(i, a, state.positions.get(i, a) + dt * v);
        }
    }

    // Relaxation sweeps (position-based, Jacobi style). Corrections are
    // over-relaxed; vertical error transport in tall columns is otherwise
    // diffusion-limited.
    let n = state.len();
    let mut converged = false;
    let displacement_tol = 1e-8;
    let omega = 1.5;
    for _sweep in 0..cfg.max_pressure_iters {
        let pts = PointSet::new(next.positions.clone())?;
        let nl = fixed_radius_neighbors(&pts, &pts, h)?;
        let rho = sph_density(&pts, &state.masses, h)?;
        let max_err = (0..n)
            .filter(|&i| state.types[i] == ParticleType::Fluid)
            .map(|i| (rho[i] / rho0 - 1.0).max(0.0))
            .fold(0.0f64, f64::max);

        // Pseudo-pressure per particle from the clamped density error.
        let mut lambda = vec![0.0; n];
        for i in 0..n {
            let c = (rho[i] / rho0 - 1.0).max(0.0);
            if c == 0.0 {
                continue;
            }
            let mut grad_i = vec![0.0; d];
            let mut sum2 = 0.0;
            for &j in nl.neighbors(i) {
                if j == i {
                    continue;
                }
                let mut d2 = 0.0;
                for (a, b) in pts.point(i).iter().zip(pts.point(j)) {
                    d2 += (a - b) * (a - b);
                }
                let dist = d2.sqrt();
                if dist <= 0.0 {
                    continue;
                }
                let dw = spiky_grad(dist, h, d) / rho0;
                let mut g2 = 0.0;
                for a in 0..d {
                    let g = dw * (pts.point(i)[a] - pts.point(j)[a]) / dist;
                    grad_i[a] += g;
                    g2 += g * g;
                }
                sum2 += g2;
            }
            sum2 += grad_i.iter().map(|g| g * g).sum::<f64>();
            lambda[i] = -c / (sum2 + 1e-12);
        }

        // Move fluid particles; track the largest displacement.
        let mut max_disp = 0.0f64;
        let mut moved = next.positions.clone();
        for i in 0..n {
            if state.types[i] != ParticleType::Fluid {
                continue;
            }
            for &j in nl.neighbors(i) {
                if j == i {
                    continue;
                }
                let mut d2 = 0.0;
                for (a, b) in pts.point(i).iter().zip(pts.point(j)) {
                    d2 += (a - b) * (a - b);
                }
                let dist = d2.sqrt();
                if dist <= 0.0 {
                    continue;
                }
                let dw = spiky_grad(dist, h, d) / rho0;
                let coef = omega * (lambda[i] + lambda[j]) * dw / dist;
                for a in 0..d {
                    let dx = coef * (pts.point(i)[a] - pts.point(j)[a]);
                    let v = moved.get(i, a) + dx;
                    moved.set(i, a, v);
                    max_disp = max_disp.max(dx.abs());
                }
            }
        }
        next.positions = moved;

        if max_err < cfg.density_tolerance && max_disp < displacement_tol {
            converged = true;
            break;
        }
    }

    // Position-based velocity update.
    for i in 0..n {
        if state.types[i] != ParticleType::Fluid {
            continue;
        }
        for a in 0..d {
            let v = (next.positions.get(i, a) - state.positions.get(i, a)) / dt;
            next.velocities.set(i, a, v);
        }
    }
    if !next.all_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((next, converged))
}

fn down_gravity(d: usize, magnitude: f64) -> Vec<f64> {
    let mut g = vec![0.0; d];
    let down = if d == 1 { 0 } else { 1 };
    g[down] = -magnitude;
    g
}

/// Build the initial 1D column state: `count` fluid particles stacked at
/// rest spacing above a two-particle static floor, with `gap` extra
/// clearance between the floor top and the first fluid particle.
fn column_initial_state(count: usize, gap: f64, cfg: &SolverConfig) -> ParticleState {
    let s = cfg.rest_spacing();
    let n = count + 2;
    let mut xs = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    // Floor: two boundary particles at 0 and -s, normals pointing up.
    xs.push(0.0);
    types.push(ParticleType::Boundary);
    xs.push(-s);
    types.push(ParticleType::Boundary);
    for i in 0..count {
        xs.push(gap + s * (i + 1) as f64);
        types.push(ParticleType::Fluid);
    }
    let mut normals = Matrix::zeros(n, 1);
    normals.set(0, 0, 1.0);
    normals.set(1, 0, 1.0);
    ParticleState::new(
        Matrix::from_vec(n, 1, xs),
        Matrix::zeros(n, 1),
        types,
        normals,
    )
    .expect("valid column state")
}

fn simulate_iterative(
    name: String,
    state0: ParticleState,
    frames: usize,
    cfg: &SolverConfig,
) -> Result<Scene> {
    let d = state0.dim();
    let mut scene = Scene {
        name,
        dt: cfg.dt,
        gravity: down_gravity(d, cfg.gravity_magnitude),
        particle_radius: cfg.particle_radius,
        types: state0.types.clone(),
        normals: state0.normals.clone(),
        masses: state0.masses.clone(),
        frames: vec![Frame {
            positions: state0.positions.clone(),
            velocities: state0.velocities.clone(),
        }],
        flagged_frames: Vec::new(),
    };
    let mut current = state0;
    for t in 1..=frames {
        let (next, converged) = iterative_column_step(&current, cfg)?;
        if !converged {
            scene.flagged_frames.push(t);
        }
        scene.frames.push(Frame {
            positions: next.positions.clone(),
            velocities: next.velocities.clone(),
        });
        current = next;
    }
    Ok(scene)
}

/// Liquid-column training data: one scene per particle count, stacked on a
/// two-particle floor, simulated with the iterative solver.
pub fn gen_column_dataset(
    min_count: usize,
    max_count: usize,
    frames: usize,
    cfg: &SolverConfig,
) -> Result<TrajectoryDataset> {
    if min_count == 0 || max_count < min_count {
        return Err(Error::input("invalid column count range"));
    }
    let mut scenes = Vec::new();
    for count in min_count..=max_count {
        let state0 = column_initial_state(count, 0.0, cfg);
        scenes.push(simulate_iterative(
            format!("column_{count:02}"),
            state0,
            frames,
            cfg,
        )?);
    }
    Ok(TrajectoryDataset { scenes })
}

/// Free-fall generalization scenes: fluid blocks released `height` meters
/// above their rest position over the same two-particle floor.
pub fn gen_freefall_dataset(
    min_count: usize,
    max_count: usize,
    height: f64,
    frames: usize,
    cfg: &SolverConfig,
) -> Result<TrajectoryDataset> {
    if min_count == 0 || max_count < min_count {
        return Err(Error::input("invalid free-fall count range"));
    }
    let mut scenes = Vec::new();
    for count in min_count..=max_count {
        let state0 = column_initial_state(count, height, cfg);
        scenes.push(simulate_iterative(
            format!("freefall_{count:02}"),
            state0,
            frames,
            cfg,
        )?);
    }
    Ok(TrajectoryDataset { scenes })
}

/// Square-lattice disc of points around a center.
fn drop_points(center: [f64; 2], lattice_radius: usize, spacing: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    let r = lattice_radius as i64;
    let max_r2 = (lattice_radius as f64 + 0.25) * (lattice_radius as f64 + 0.25);
    for i in -r..=r {
        for j in -r..=r {
            let d2 = (i * i + j * j) as f64;
            if d2 <= max_r2 {
                pts.push([
                    center[0] + i as f64 * spacing,
                    center[1] + j as f64 * spacing,
                ]);
            }
        }
    }
    pts
}

/// Two colliding drops in an open 2D domain, simulated with the explicit
/// solver; generated once with gravity and once without.
pub fn gen_drops2d_dataset(spec: &SceneSpec, cfg: &SolverConfig) -> Result<TrajectoryDataset> {
    let spacing = cfg.rest_spacing();
    let gap = 4.0 * spacing;
    let offset = spec.drop_lattice_radius as f64 * spacing + gap / 2.0;
    let left = drop_points([-offset, 0.0], spec.drop_lattice_radius, spacing);
    let right = drop_points([offset, 0.0], spec.drop_lattice_radius, spacing);
    let n = left.len() + right.len();
    let mut pos = Matrix::zeros(n, 2);
    let mut vel = Matrix::zeros(n, 2);
    for (i, p) in left.iter().enumerate() {
        pos.row_mut(i).copy_from_slice(p);
        vel.set(i, 0, spec.drop_speed);
    }
    for (i, p) in right.iter().enumerate() {
        pos.row_mut(left.len() + i).copy_from_slice(p);
        vel.set(left.len() + i, 0, -spec.drop_speed);
    }
    let state0 = ParticleState::new(
        pos,
        vel,
        vec![ParticleType::Fluid; n],
        Matrix::zeros(n, 2),
    )?;

    let substeps = (cfg.dt / cfg.dt_explicit).round().max(1.0) as usize;
    let mut scenes = Vec::new();
    for (name, g_mag) in [("drops2d_gravity", cfg.gravity_magnitude), ("drops2d_zero_g", 0.0)] {
        let mut sub_cfg = cfg.clone();
        sub_cfg.gravity_magnitude = g_mag;
        let mut scene = Scene {
            name: name.to_string(),
            dt: cfg.dt,
            gravity: down_gravity(2, g_mag),
            particle_radius: cfg.particle_radius,
            types: state0.types.clone(),
            normals: state0.normals.clone(),
            masses: state0.masses.clone(),
            frames: vec![Frame {
                positions: state0.positions.clone(),
                velocities: state0.velocities.clone(),
            }],
            flagged_frames: Vec::new(),
        };
        let mut current = state0.clone();
        for _ in 1..=spec.frames {
            for _ in 0..substeps {
                current = explicit_step_dt(&current, &sub_cfg, sub_cfg.dt_explicit)?;
            }
            scene.frames.push(Frame {
                positions: current.positions.clone(),
                velocities: current.velocities.clone(),
            });
        }
        scenes.push(scene);
    }
    Ok(TrajectoryDataset { scenes })
}
