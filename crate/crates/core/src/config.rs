//! Flat `key = value` run configuration shared by all CLI commands.
//!
//! Every key has a documented default (printable via `dump_defaults`);
//! unknown keys are rejected so typos cannot silently fall back to
//! defaults. `#` starts a comment.

use crate::error::{Error, Result};
use crate::network::{ArchitectureConfig, HeadKind, SamplerKind};
use crate::sph::{SceneKind, SceneSpec, SolverConfig};
use crate::training::TrainConfig;

/// Model variants, ordered roughly by how much of the full method they
/// enable. `Base` swaps the antisymmetric head for a plain convolution and
/// disables everything else; `Ours` is the full method; `NoSym` is the full
/// method with a plain convolution head (the column-experiment baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    Ascc,
    MultiscaleFps,
    Voxelize,
    Preprocess,
    Ours,
    NoSym,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "base" => Variant::Base,
            "ascc" => Variant::Ascc,
            "multiscale_fps" => Variant::MultiscaleFps,
            "voxelize" => Variant::Voxelize,
            "preprocess" => Variant::Preprocess,
            "ours" => Variant::Ours,
            "nosym" => Variant::NoSym,
            other => {
                return Err(Error::config(format!(
                    "unknown variant '{other}' (base|ascc|multiscale_fps|voxelize|preprocess|ours|nosym)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Ascc => "ascc",
            Variant::MultiscaleFps => "multiscale_fps",
            Variant::Voxelize => "voxelize",
            Variant::Preprocess => "preprocess",
            Variant::Ours => "ours",
            Variant::NoSym => "nosym",
        }
    }

    fn multiscale(&self) -> bool {
        !matches!(self, Variant::Base | Variant::Ascc)
    }

    fn head(&self) -> HeadKind {
        match self {
            Variant::Base | Variant::NoSym => HeadKind::CConv,
            _ => HeadKind::Ascc,
        }
    }

    fn sampler(&self) -> SamplerKind {
        match self {
            Variant::MultiscaleFps => SamplerKind::Fps,
            _ => SamplerKind::Voxel,
        }
    }

    pub fn warmup(&self) -> bool {
        matches!(self, Variant::Preprocess | Variant::Ours | Variant::NoSym)
    }

    fn full_processing(&self) -> bool {
        matches!(self, Variant::Ours | Variant::NoSym)
    }
}

/// The complete run configuration with all defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub scene_kind: SceneKind,
    pub scene_min_count: usize,
    pub scene_max_count: usize,
    pub scene_frames: usize,
    pub scene_height: f64,
    pub scene_drop_lattice_radius: usize,
    pub scene_drop_speed: f64,
    pub solver_particle_radius: f64,
    pub solver_support_scale: f64,
    pub solver_dt: f64,
    pub solver_dt_explicit: f64,
    pub solver_stiffness: f64,
    pub solver_viscosity: f64,
    pub solver_gravity: f64,
    pub solver_density_tolerance: f64,
    pub solver_max_pressure_iters: usize,
    /// Architecture interaction radius as a multiple of the data particle
    /// radius (the reference solvers interact at four particle radii).
    pub arch_radius_scale: f64,
    /// Branch count override; 0 keeps the dimension default (4 in 2D,
    /// 2 in 1D). Smaller values drop the lowest-resolution branches.
    pub arch_branches: usize,
    pub arch_kernel_size: usize,
    pub arch_ascc_kernel_size: usize,
    pub arch_kernel_scale: f64,
    pub train_iterations: usize,
    pub train_batch_size: usize,
    pub train_lr0: f64,
    /// Position-noise standard deviation as a multiple of the data
    /// particle radius.
    pub train_noise_scale: f64,
    pub train_warmup_threshold: f64,
    pub train_log_every: usize,
    pub train_checkpoint_every: usize,
    pub eval_noise_ratio: f64,
    pub eval_sampling_ratio: f64,
    pub eval_bins: usize,
    pub eval_emd_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Ours,
            scene_kind: SceneKind::Column,
            scene_min_count: 1,
            scene_max_count: 40,
            scene_frames: 100,
            scene_height: 0.01,
            scene_drop_lattice_radius: 3,
            scene_drop_speed: 0.5,
            solver_particle_radius: 0.005,
            solver_support_scale: 4.0,
            solver_dt: 0.0025,
            solver_dt_explicit: 0.00025,
            solver_stiffness: 10.0,
            solver_viscosity: 1e-4,
            solver_gravity: 9.81,
            solver_density_tolerance: 0.01,
            solver_max_pressure_iters: 500,
            arch_radius_scale: 4.0,
            arch_branches: 0,
            arch_kernel_size: 8,
            arch_ascc_kernel_size: 8,
            arch_kernel_scale: 1.0,
            train_iterations: 50_000,
            train_batch_size: 2,
            train_lr0: 0.001,
            train_noise_scale: 0.1,
            train_warmup_threshold: 0.05,
            train_log_every: 100,
            train_checkpoint_every: 0,
            eval_noise_ratio: 0.0,
            eval_sampling_ratio: 1.0,
            eval_bins: 64,
            eval_emd_cap: 512,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident, $doc:literal;)*) => {
        impl RunConfig {
            /// Parse a flat key=value document. Unknown keys are errors.
            pub fn parse(text: &str) -> Result<RunConfig> {
                let mut cfg = RunConfig::default();
                for (lineno, raw) in text.lines().enumerate() {
                    let line = raw.split('#').next().unwrap_or("").trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (key, value) = line.split_once('=').ok_or_else(|| {
                        Error::config(format!("line {}: expected 'key = value'", lineno + 1))
                    })?;
                    let key = key.trim();
                    let value = value.trim();
                    match key {
                        $($key => cfg.$field = parse_value!($kind, key, value)?,)*
                        other => {
                            return Err(Error::config(format!(
                                "line {}: unknown key '{}'",
                                lineno + 1,
                                other
                            )))
                        }
                    }
                }
                cfg.validate()?;
                Ok(cfg)
            }

            /// All keys with their current values and documentation.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(&format!("# {}\n{} = {}\n", $doc, $key, dump_value!($kind, self.$field)));
                )*
                out
            }
        }
    };
}

macro_rules! parse_value {
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>()
            .map_err(|_| Error::config(format!("{}: expected integer, got '{}'", $key, $v)))
    };
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>()
            .map_err(|_| Error::config(format!("{}: expected integer, got '{}'", $key, $v)))
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>()
            .map_err(|_| Error::config(format!("{}: expected number, got '{}'", $key, $v)))
    };
    (variant, $key:expr, $v:expr) => {
        Variant::parse($v)
    };
    (scene, $key:expr, $v:expr) => {
        match $v {
            "column" => Ok(SceneKind::Column),
            "freefall" => Ok(SceneKind::FreeFall),
            "drops2d" => Ok(SceneKind::Drops2d),
            other => Err(Error::config(format!(
                "{}: unknown scene kind '{}' (column|freefall|drops2d)",
                $key, other
            ))),
        }
    };
}

macro_rules! dump_value {
    (variant, $v:expr) => {
        $v.name().to_string()
    };
    (scene, $v:expr) => {
        match $v {
            SceneKind::Column => "column".to_string(),
            SceneKind::FreeFall => "freefall".to_string(),
            SceneKind::Drops2d => "drops2d".to_string(),
        }
    };
    ($kind:ident, $v:expr) => {
        $v.to_string()
    };
}

config_keys! {
    "seed" => seed: u64, "master seed; all randomness flows from it";
    "variant" => variant: variant, "model variant: base|ascc|multiscale_fps|voxelize|preprocess|ours|nosym";
    "scene.kind" => scene_kind: scene, "scene family: column|freefall|drops2d";
    "scene.min_count" => scene_min_count: usize, "smallest particle count (column/freefall)";
    "scene.max_count" => scene_max_count: usize, "largest particle count (column/freefall)";
    "scene.frames" => scene_frames: usize, "simulated steps per scene (frames = steps + 1)";
    "scene.height" => scene_height: f64, "free-fall release height above rest (m)";
    "scene.drop_lattice_radius" => scene_drop_lattice_radius: usize, "drop radius in lattice points (drops2d)";
    "scene.drop_speed" => scene_drop_speed: f64, "initial speed of each drop (m/s, drops2d)";
    "solver.particle_radius" => solver_particle_radius: f64, "data particle radius (m); rest spacing is twice this";
    "solver.support_scale" => solver_support_scale: f64, "kernel support as a multiple of the particle radius";
    "solver.dt" => solver_dt: f64, "frame time step of the iterative solver (s)";
    "solver.dt_explicit" => solver_dt_explicit: f64, "sub-step of the explicit solver (s)";
    "solver.stiffness" => solver_stiffness: f64, "pressure stiffness";
    "solver.viscosity" => solver_viscosity: f64, "viscosity coefficient";
    "solver.gravity" => solver_gravity: f64, "gravity magnitude (m/s^2), canonical down axis";
    "solver.density_tolerance" => solver_density_tolerance: f64, "iterative solver density-error threshold";
    "solver.max_pressure_iters" => solver_max_pressure_iters: usize, "iteration cap of the relaxation loop";
    "arch.radius_scale" => arch_radius_scale: f64, "main-branch radius as a multiple of the particle radius";
    "arch.branches" => arch_branches: usize, "branch count (0 = dimension default; lower drops coarse branches)";
    "arch.kernel_size" => arch_kernel_size: usize, "kernel grid nodes per axis";
    "arch.ascc_kernel_size" => arch_ascc_kernel_size: usize, "output-head kernel nodes per axis (even)";
    "arch.kernel_scale" => arch_kernel_scale: f64, "kernel multiplier (sampling-ratio compensation)";
    "train.iterations" => train_iterations: usize, "training iterations; schedules scale with iterations/50000";
    "train.batch_size" => train_batch_size: usize, "scenes per gradient step";
    "train.lr0" => train_lr0: f64, "initial learning rate";
    "train.noise_scale" => train_noise_scale: f64, "input position noise std as a multiple of the particle radius";
    "train.warmup_threshold" => train_warmup_threshold: f64, "max-density error that stops warmup stepping";
    "train.log_every" => train_log_every: usize, "log period in iterations";
    "train.checkpoint_every" => train_checkpoint_every: usize, "checkpoint period in iterations (0 = final only)";
    "eval.noise_ratio" => eval_noise_ratio: f64, "perturb predictions before metrics, std = ratio * radius";
    "eval.sampling_ratio" => eval_sampling_ratio: f64, "keep this fraction of particles at simulate time";
    "eval.bins" => eval_bins: usize, "speed-histogram bins for the distribution divergence";
    "eval.emd_cap" => eval_emd_cap: usize, "particle cap of the exact assignment solver";
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scene_min_count == 0 || self.scene_max_count < self.scene_min_count {
            return Err(Error::config("invalid scene count range"));
        }
        if self.eval_sampling_ratio <= 0.0 || self.eval_sampling_ratio > 1.0 {
            return Err(Error::config("eval.sampling_ratio must be in (0, 1]"));
        }
        if self.eval_noise_ratio < 0.0 {
            return Err(Error::config("eval.noise_ratio must be >= 0"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            particle_radius: self.solver_particle_radius,
            support_scale: self.solver_support_scale,
            dt: self.solver_dt,
            dt_explicit: self.solver_dt_explicit,
            stiffness: self.solver_stiffness,
            viscosity: self.solver_viscosity,
            gravity_magnitude: self.solver_gravity,
            density_tolerance: self.solver_density_tolerance,
            max_pressure_iters: self.solver_max_pressure_iters,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            kind: self.scene_kind.clone(),
            min_count: self.scene_min_count,
            max_count: self.scene_max_count,
            frames: self.scene_frames,
            height: self.scene_height,
            drop_lattice_radius: self.scene_drop_lattice_radius,
            drop_speed: self.scene_drop_speed,
        }
    }

    /// Architecture for data of the given dimension, with the variant's
    /// toggles applied.
    pub fn arch_for_dim(&self, dim: usize, data_particle_radius: f64) -> Result<ArchitectureConfig> {
        let radius = self.arch_radius_scale * data_particle_radius;
        let mut arch = match dim {
            1 => ArchitectureConfig::default_1d(radius),
            2 => ArchitectureConfig::default_2d(radius),
            other => return Err(Error::config(format!("unsupported dimension {other}"))),
        };
        arch.kernel_size = self.arch_kernel_size;
        arch.ascc_kernel_size = self.arch_ascc_kernel_size;
        arch.kernel_scale = self.arch_kernel_scale;
        arch.fps_seed = self.seed;
        if self.arch_branches > 0 {
            let b = self.arch_branches;
            if b > arch.branches {
                return Err(Error::config(format!(
                    "arch.branches = {b} exceeds the dimension default {}",
                    arch.branches
                )));
            }
            // Removing branches drops the lowest resolutions.
            arch.branches = b;
            arch.scales.truncate(b);
            arch.l1_channels.truncate(b);
            arch.l2_channels.truncate(b);
            arch.l3_channels.truncate(b);
        }
        let v = self.variant;
        arch.head = v.head();
        arch.sampler = v.sampler();
        arch.gravity_normalization = v.full_processing();
        arch.boundary_all_layers = v.full_processing();
        if !v.multiscale() {
            // Single-branch stack at main-branch channels.
            arch.branches = 1;
            arch.scales = vec![1.0];
            arch.l1_channels = vec![arch.l1_channels[0]];
            arch.l2_channels = vec![arch.l2_channels[0]];
            if !arch.l3_channels.is_empty() {
                arch.l3_channels = vec![arch.l3_channels[0]];
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train_iterations,
            batch_size: self.train_batch_size,
            lr0: self.train_lr0,
            noise_std: self.train_noise_scale * self.solver_particle_radius,
            warmup_enabled: self.variant.warmup(),
            warmup_threshold: self.train_warmup_threshold,
            seed: self.seed,
            log_every: self.train_log_every,
            checkpoint_every: self.train_checkpoint_every,
            threads: 1,
        }
    }
}
