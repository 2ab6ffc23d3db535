//! The full particle network: type-aware preprocessing, multi-scale feature
//! aggregation across branches, and an antisymmetric convolution head that
//! makes the summed position residual vanish over all particles.
//!
//! Layer hierarchy (default): L1 splits the preprocessed features into B
//! branches at decreasing sampling density, L2/L3 exchange features between
//! all branch pairs with summed merges, L4 merges everything back into the
//! main branch, and the head turns the accumulated channels into a
//! d-dimensional position residual. Every cross-branch convolution uses the
//! radius of its input branch, so coarser branches see wider neighborhoods.
//!
//! Boundary particles are processed in all layers (they carry the reaction
//! impulse), but only fluid rows of the head output are integrated.

use crate::error::{Error, Result};
use crate::geometry::{
    fixed_radius_neighbors, gravity_rotation, voxel_sample_anchored, NeighborList, PointSet,
    Rotation,
};
use crate::layers::{
    ascc_backward_scaled, ascc_forward_scaled, cconv_backward_scaled, cconv_forward_scaled,
    relu, relu_backward, AntisymmetricKernel, KernelGrid, Window,
};
use crate::mat::Matrix;
use crate::simulator::ParticleState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Antisymmetric output layer (momentum-conserving).
    Ascc,
    /// Plain convolution output layer ("no symmetry" baseline).
    CConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    /// Occupied-voxel centers, anchored at the cloud minimum. Linear time.
    Voxel,
    /// Farthest-point sampling of round(N * scale) points.
    Fps,
}

/// Branch/scale/channel topology and all model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    pub dim: usize,
    /// Interaction radius of the main branch (meters). Branch radii grow as
    /// `radius / scale`. Defaults to four data particle radii, the support
    /// scale of the reference solvers, so that neighborhoods at rest
    /// spacing are non-degenerate.
    pub particle_radius: f64,
    pub branches: usize,
    /// Strictly decreasing, `scales[0] == 1`.
    pub scales: Vec<f64>,
    /// Output channels of each per-type preprocessing convolution.
    pub preprocess_channels: usize,
    pub l1_channels: Vec<usize>,
    pub l2_channels: Vec<usize>,
    /// Empty disables the third exchange layer (used by the 1D config).
    pub l3_channels: Vec<usize>,
    pub l4_channels: usize,
    pub kernel_size: usize,
    pub ascc_kernel_size: usize,
    pub head: HeadKind,
    pub sampler: SamplerKind,
    pub gravity_normalization: bool,
    /// Process boundary particles in every layer (not only at the head).
    pub boundary_all_layers: bool,
    /// Multiplier applied to all kernel values at evaluation time
    /// (sampling-ratio compensation). 1.0 for normal operation.
    pub kernel_scale: f64,
    /// Seed for farthest-point sampling when `sampler == Fps`.
    pub fps_seed: u64,
}

impl ArchitectureConfig {
    /// Default 2D configuration: 4 branches at scales 1, 1/2, 1/4, 1/8,
    /// preprocessing 8+8, L1 (16, 8, 4, 4), L2/L3 (32, 16, 8, 4), L4 32.
    /// 514,704 parameters in total.
    pub fn default_2d(particle_radius: f64) -> Self {
        ArchitectureConfig {
            dim: 2,
            particle_radius,
            branches: 4,
            scales: vec![1.0, 0.5, 0.25, 0.125],
            preprocess_channels: 8,
            l1_channels: vec![16, 8, 4, 4],
            l2_channels: vec![32, 16, 8, 4],
            l3_channels: vec![32, 16, 8, 4],
            l4_channels: 32,
            kernel_size: 8,
            ascc_kernel_size: 8,
            head: HeadKind::Ascc,
            sampler: SamplerKind::Voxel,
            gravity_normalization: true,
            boundary_all_layers: true,
            kernel_scale: 1.0,
            fps_seed: 0,
        }
    }

    /// Compact two-branch configuration for 1D columns: preprocessing 8+8,
    /// L1 (16, 8), L2 (32, 16), no L3, L4 32. 25,096 parameters.
    pub fn default_1d(particle_radius: f64) -> Self {
        ArchitectureConfig {
            dim: 1,
            particle_radius,
            branches: 2,
            scales: vec![1.0, 0.5],
            preprocess_channels: 8,
            l1_channels: vec![16, 8],
            l2_channels: vec![32, 16],
            l3_channels: vec![],
            l4_channels: 32,
            kernel_size: 8,
            ascc_kernel_size: 8,
            head: HeadKind::Ascc,
            sampler: SamplerKind::Voxel,
            gravity_normalization: true,
            boundary_all_layers: true,
            kernel_scale: 1.0,
            fps_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::config("dimension must be 1..=3"));
        }
        if self.particle_radius <= 0.0 {
            return Err(Error::config("particle radius must be positive"));
        }
        if self.branches == 0 || self.scales.len() != self.branches {
            return Err(Error::config("scales length must equal branch count"));
        }
        if self.scales[0] != 1.0 {
            return Err(Error::config("main branch scale must be 1"));
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("scales must be strictly decreasing"));
        }
        if self.l1_channels.len() != self.branches || self.l2_channels.len() != self.branches {
            return Err(Error::config("channel lists must have one entry per branch"));
        }
        if !self.l3_channels.is_empty() && self.l3_channels.len() != self.branches {
            return Err(Error::config("l3 channels must be empty or one per branch"));
        }
        if self.kernel_size < 2 {
            return Err(Error::config("kernel size must be at least 2"));
        }
        if matches!(self.head, HeadKind::Ascc) && !self.ascc_kernel_size.is_multiple_of(2) {
            return Err(Error::config("antisymmetric head needs an even kernel size"));
        }
        if self.kernel_scale <= 0.0 || !self.kernel_scale.is_finite() {
            return Err(Error::config("kernel scale must be positive"));
        }
        Ok(())
    }

    pub fn branch_radius(&self, branch: usize) -> f64 {
        self.particle_radius / self.scales[branch]
    }

    pub fn voxel_size(&self, branch: usize) -> f64 {
        (self.particle_radius / 2.0) / self.scales[branch]
    }

    /// Channel count entering L4 from each branch.
    fn trunk_out_channels(&self) -> &[usize] {
        if self.l3_channels.is_empty() {
            &self.l2_channels
        } else {
            &self.l3_channels
        }
    }
}

/// All trainable tensors, addressed by (layer, branch-in, branch-out).
/// Also reused as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub pre_fluid: KernelGrid,
    pub pre_boundary: KernelGrid,
    pub l1: Vec<KernelGrid>,
    /// `l2[j][k]`: input branch k, output branch j.
    pub l2: Vec<Vec<KernelGrid>>,
    pub l3: Vec<Vec<KernelGrid>>,
    pub l4: Vec<KernelGrid>,
    pub head: HeadParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Ascc(AntisymmetricKernel),
    CConv(KernelGrid),
}

impl ModelParams {
    /// Zero-initialized parameters with shapes matching the configuration.
    pub fn new(cfg: &ArchitectureConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let k = cfg.kernel_size;
        let r0 = cfg.branch_radius(0);
        let pc = cfg.preprocess_channels;
        let pre_fluid = KernelGrid::new(d, k, 2 * d, pc, r0, Window::Poly6)?;
        let pre_boundary = KernelGrid::new(d, k, d, pc, r0, Window::Poly6)?;
        let mut l1 = Vec::new();
        for j in 0..cfg.branches {
            l1.push(KernelGrid::new(d, k, 2 * pc, cfg.l1_channels[j], r0, Window::Poly6)?);
        }
        let mut l2 = Vec::new();
        for j in 0..cfg.branches {
            let mut row = Vec::new();
            for kin in 0..cfg.branches {
                row.push(KernelGrid::new(
                    d,
                    k,
                    cfg.l1_channels[kin],
                    cfg.l2_channels[j],
                    cfg.branch_radius(kin),
                    Window::Poly6,
                )?);
            }
            l2.push(row);
        }
        let mut l3 = Vec::new();
        if !cfg.l3_channels.is_empty() {
            for j in 0..cfg.branches {
                let mut row = Vec::new();
                for kin in 0..cfg.branches {
                    row.push(KernelGrid::new(
                        d,
                        k,
                        cfg.l2_channels[kin],
                        cfg.l3_channels[j],
                        cfg.branch_radius(kin),
                        Window::Poly6,
                    )?);
                }
                l3.push(row);
            }
        }
        let trunk_out = cfg.trunk_out_channels().to_vec();
        let mut l4 = Vec::new();
        for kin in 0..cfg.branches {
            l4.push(KernelGrid::new(
                d,
                k,
                trunk_out[kin],
                cfg.l4_channels,
                cfg.branch_radius(kin),
                Window::Poly6,
            )?);
        }
        let head = match cfg.head {
            HeadKind::Ascc => HeadParams::Ascc(AntisymmetricKernel::new(
                d,
                cfg.ascc_kernel_size,
                cfg.l4_channels,
                d,
                r0,
            )?),
            HeadKind::CConv => HeadParams::CConv(KernelGrid::new(
                d,
                cfg.ascc_kernel_size,
                cfg.l4_channels,
                d,
                r0,
                Window::Poly6,
            )?),
        };
        Ok(ModelParams {
            pre_fluid,
            pre_boundary,
            l1,
            l2,
            l3,
            l4,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Visit every parameter tensor in a fixed order. Checkpoints and the
    /// optimizer state rely on this order being stable.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        f("pre_fluid.kernel", &self.pre_fluid.values);
        f("pre_fluid.bias", &self.pre_fluid.bias);
        f("pre_boundary.kernel", &self.pre_boundary.values);
        f("pre_boundary.bias", &self.pre_boundary.bias);
        for (j, kg) in self.l1.iter().enumerate() {
            f(&format!("l1.{j}.kernel"), &kg.values);
            f(&format!("l1.{j}.bias"), &kg.bias);
        }
        for (j, row) in self.l2.iter().enumerate() {
            for (k, kg) in row.iter().enumerate() {
                f(&format!("l2.{j}.{k}.kernel"), &kg.values);
                f(&format!("l2.{j}.{k}.bias"), &kg.bias);
            }
        }
        for (j, row) in self.l3.iter().enumerate() {
            for (k, kg) in row.iter().enumerate() {
                f(&format!("l3.{j}.{k}.kernel"), &kg.values);
                f(&format!("l3.{j}.{k}.bias"), &kg.bias);
            }
        }
        for (k, kg) in self.l4.iter().enumerate() {
            f(&format!("l4.{k}.kernel"), &kg.values);
            f(&format!("l4.{k}.bias"), &kg.bias);
        }
        match &self.head {
            HeadParams::Ascc(a) => f("head.half", &a.half_values),
            HeadParams::CConv(kg) => {
                f("head.kernel", &kg.values);
                f("head.bias", &kg.bias);
            }
        }
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("pre_fluid.kernel", &mut self.pre_fluid.values);
        f("pre_fluid.bias", &mut self.pre_fluid.bias);
        f("pre_boundary.kernel", &mut self.pre_boundary.values);
        f("pre_boundary.bias", &mut self.pre_boundary.bias);
        for (j, kg) in self.l1.iter_mut().enumerate() {
            f(&format!("l1.{j}.kernel"), &mut kg.values);
            f(&format!("l1.{j}.bias"), &mut kg.bias);
        }
        for (j, row) in self.l2.iter_mut().enumerate() {
            for (k, kg) in row.iter_mut().enumerate() {
                f(&format!("l2.{j}.{k}.kernel"), &mut kg.values);
                f(&format!("l2.{j}.{k}.bias"), &mut kg.bias);
            }
        }
        for (j, row) in self.l3.iter_mut().enumerate() {
            for (k, kg) in row.iter_mut().enumerate() {
                f(&format!("l3.{j}.{k}.kernel"), &mut kg.values);
                f(&format!("l3.{j}.{k}.bias"), &mut kg.bias);
            }
        }
        for (k, kg) in self.l4.iter_mut().enumerate() {
            f(&format!("l4.{k}.kernel"), &mut kg.values);
            f(&format!("l4.{k}.bias"), &mut kg.bias);
        }
        match &mut self.head {
            HeadParams::Ascc(a) => f("head.half", &mut a.half_values),
            HeadParams::CConv(kg) => {
                f("head.kernel", &mut kg.values);
                f("head.bias", &mut kg.bias);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Random-uniform initialization of all kernel weights on [-0.05, 0.05];
/// biases start at zero. Deterministic given the seed. Values are drawn in
/// f32 so checkpoints (which store f32) round-trip the initialization
/// exactly.
pub fn init_params(cfg: &ArchitectureConfig, rng_seed: u64) -> ModelParams {
    let mut params = ModelParams::new(cfg).expect("invalid architecture config");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    params.for_each_tensor_mut(|name, t| {
        if name.ends_with(".bias") {
            return;
        }
        for v in t {
            let w: f32 = rng.random_range(-0.05f32..=0.05f32);
            *v = w as f64;
        }
    });
    params
}

/// Everything the backward pass needs from a forward evaluation.
pub struct NetworkCache {
    rotation: Rotation,
    /// All particle positions, rotated into the canonical frame.
    union_pts: PointSet,
    fluid_rows: Vec<usize>,
    /// Rows the trunk processes (all rows, or fluid rows only).
    active_rows: Vec<usize>,
    fluid_pts: PointSet,
    boundary_pts: PointSet,
    active_pts: PointSet,
    fluid_in: Matrix,
    boundary_in: Matrix,
    branch_pts: Vec<PointSet>,
    /// Source indices into the active set for FPS-sampled branches.
    branch_src: Vec<Option<Vec<usize>>>,
    nl_pre_fluid: NeighborList,
    nl_pre_boundary: NeighborList,
    nl_l1: Vec<NeighborList>,
    /// `nl_cross[j][k]`: data = branch k, query = branch j, radius of k.
    nl_cross: Vec<Vec<NeighborList>>,
    nl_l4: Vec<NeighborList>,
    nl_head: NeighborList,
    pre_concat: Matrix,
    f0: Matrix,
    l1_pre: Vec<Matrix>,
    f1: Vec<Matrix>,
    l2_pre: Vec<Matrix>,
    f2: Vec<Matrix>,
    l3_pre: Vec<Matrix>,
    f3: Vec<Matrix>,
    l4_pre: Matrix,
    head_in: Matrix,
}

/// Network output: position residual for fluid rows plus the raw head
/// output over the full particle union (boundary rows carry the reaction
/// share of the momentum balance).
pub struct NetworkOutput {
    pub delta_x: Matrix,
    pub raw_union: Matrix,
}

/// Gradients produced by [`network_backward`].
pub struct NetworkGrads {
    pub params: ModelParams,
    /// d loss / d fluid positions (original frame), fluid row order.
    pub positions: Matrix,
    /// d loss / d fluid velocities (original frame), fluid row order.
    pub velocities: Matrix,
}

fn split_columns(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    let mut left = Matrix::zeros(m.rows(), at);
    let mut right = Matrix::zeros(m.rows(), m.cols() - at);
    for i in 0..m.rows() {
        left.row_mut(i).copy_from_slice(&m.row(i)[..at]);
        right.row_mut(i).copy_from_slice(&m.row(i)[at..]);
    }
    (left, right)
}

fn concat_columns(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows());
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        out.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
        out.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

struct GeomCtx {
    union_pts: PointSet,
    fluid_rows: Vec<usize>,
    active_rows: Vec<usize>,
    fluid_pts: PointSet,
    boundary_pts: PointSet,
    active_pts: PointSet,
    fluid_in: Matrix,
    boundary_in: Matrix,
}

fn build_geometry(
    state: &ParticleState,
    cfg: &ArchitectureConfig,
    rot: &Rotation,
) -> Result<GeomCtx> {
    let d = state.dim();
    if d != cfg.dim {
        return Err(Error::input(format!(
            "state dimension {d} does not match architecture dimension {}",
            cfg.dim
        )));
    }
    state.validate()?;
    let positions_rot = rot.apply_rows(&state.positions);
    let union_pts = PointSet::new(positions_rot)?;
    let fluid_rows = state.fluid_indices();
    let boundary_rows = state.boundary_indices();
    let active_rows: Vec<usize> = if cfg.boundary_all_layers {
        (0..state.len()).collect()
    } else {
        fluid_rows.clone()
    };
    let fluid_pts = PointSet::new(union_pts.coords().select_rows(&fluid_rows))?;
    let boundary_pts = PointSet::new(union_pts.coords().select_rows(&boundary_rows))?;
    let active_pts = PointSet::new(union_pts.coords().select_rows(&active_rows))?;
    // Fluid features: rotated velocity and acceleration, side by side.
    let vel_rot = rot.apply_rows(&state.velocities.select_rows(&fluid_rows));
    let acc_rot = rot.apply_rows(&state.accelerations.select_rows(&fluid_rows));
    let fluid_in = concat_columns(&vel_rot, &acc_rot);
    let boundary_in = rot.apply_rows(&state.normals.select_rows(&boundary_rows));
    Ok(GeomCtx {
        union_pts,
        fluid_rows,
        active_rows,
        fluid_pts,
        boundary_pts,
        active_pts,
        fluid_in,
        boundary_in,
    })
}

fn preprocess_stage(
    ctx: &GeomCtx,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<(Matrix, NeighborList, NeighborList)> {
    let nl_f = fixed_radius_neighbors(&ctx.fluid_pts, &ctx.active_pts, params.pre_fluid.radius)?;
    let nl_b = fixed_radius_neighbors(
        &ctx.boundary_pts,
        &ctx.active_pts,
        params.pre_boundary.radius,
    )?;
    let out_f = cconv_forward_scaled(
        &ctx.fluid_in,
        &ctx.fluid_pts,
        &ctx.active_pts,
        &params.pre_fluid,
        &nl_f,
        cfg.kernel_scale,
    )?;
    let out_b = cconv_forward_scaled(
        &ctx.boundary_in,
        &ctx.boundary_pts,
        &ctx.active_pts,
        &params.pre_boundary,
        &nl_b,
        cfg.kernel_scale,
    )?;
    Ok((concat_columns(&out_f, &out_b), nl_f, nl_b))
}

/// Per-type preprocessing: one convolution per particle type, each queried
/// at all processed points, outputs concatenated (fluid channels first).
/// Fluid features are (velocity, acceleration); boundary features are the
/// surface normals.
pub fn type_aware_preprocess(
    state: &ParticleState,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<Matrix> {
    let ctx = build_geometry(state, cfg, &Rotation::identity(state.dim()))?;
    preprocess_stage(&ctx, params, cfg).map(|(concat, _, _)| concat)
}

/// Branch query sets plus, for FPS sampling, the source index of each
/// sampled point (voxel centers have no source particle).
type BranchSets = (Vec<PointSet>, Vec<Option<Vec<usize>>>);

fn sample_branches(active_pts: &PointSet, cfg: &ArchitectureConfig) -> Result<BranchSets> {
    let mut branch_pts = vec![active_pts.clone()];
    let mut branch_src: Vec<Option<Vec<usize>>> = vec![None];
    let anchor = active_pts.min_corner();
    for i in 1..cfg.branches {
        match cfg.sampler {
            SamplerKind::Voxel => {
                branch_pts.push(voxel_sample_anchored(active_pts, cfg.voxel_size(i), &anchor)?);
                branch_src.push(None);
            }
            SamplerKind::Fps => {
                if active_pts.is_empty() {
                    branch_pts.push(PointSet::empty(cfg.dim));
                    branch_src.push(None);
                    continue;
                }
                let count = ((active_pts.len() as f64 * cfg.scales[i]).round() as usize)
                    .clamp(1, active_pts.len());
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.fps_seed ^ (i as u64));
                let first = rng.random_range(0..active_pts.len());
                let (pts, src) =
                    crate::geometry::farthest_point_sample_from(active_pts, count, first)?;
                branch_pts.push(pts);
                branch_src.push(Some(src));
            }
        }
    }
    Ok((branch_pts, branch_src))
}

struct TrunkCache {
    nl_l1: Vec<NeighborList>,
    nl_cross: Vec<Vec<NeighborList>>,
    nl_l4: Vec<NeighborList>,
    l1_pre: Vec<Matrix>,
    f1: Vec<Matrix>,
    l2_pre: Vec<Matrix>,
    f2: Vec<Matrix>,
    l3_pre: Vec<Matrix>,
    f3: Vec<Matrix>,
    l4_pre: Matrix,
    f4: Matrix,
}

fn multiscale_stage(
    f0: &Matrix,
    active_pts: &PointSet,
    branch_pts: &[PointSet],
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<TrunkCache> {
    let b = cfg.branches;
    let scale = cfg.kernel_scale;

    let mut nl_l1 = Vec::with_capacity(b);
    for j in 0..b {
        nl_l1.push(fixed_radius_neighbors(active_pts, &branch_pts[j], params.l1[j].radius)?);
    }
    let mut l1_pre = Vec::with_capacity(b);
    let mut f1 = Vec::with_capacity(b);
    for j in 0..b {
        let pre =
            cconv_forward_scaled(f0, active_pts, &branch_pts[j], &params.l1[j], &nl_l1[j], scale)?;
        f1.push(relu(&pre));
        l1_pre.push(pre);
    }

    // Cross-branch neighbor lists are shared by L2 and L3: the radius is a
    // function of the input branch only.
    let mut nl_cross = Vec::with_capacity(b);
    for j in 0..b {
        let mut row = Vec::with_capacity(b);
        for k in 0..b {
            row.push(fixed_radius_neighbors(
                &branch_pts[k],
                &branch_pts[j],
                cfg.branch_radius(k),
            )?);
        }
        nl_cross.push(row);
    }

    let exchange = |inputs: &[Matrix],
                    kernels: &[Vec<KernelGrid>]|
     -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let mut pre_out = Vec::with_capacity(b);
        let mut post_out = Vec::with_capacity(b);
        for j in 0..b {
            let mut acc: Option<Matrix> = None;
            for k in 0..b {
                let part = cconv_forward_scaled(
                    &inputs[k],
                    &branch_pts[k],
                    &branch_pts[j],
                    &kernels[j][k],
                    &nl_cross[j][k],
                    scale,
                )?;
                match &mut acc {
                    None => acc = Some(part),
                    Some(m) => m.add_assign(&part),
                }
            }
            let pre = acc.expect("at least one branch");
            post_out.push(relu(&pre));
            pre_out.push(pre);
        }
        Ok((pre_out, post_out))
    };

    let (l2_pre, f2) = exchange(&f1, &params.l2)?;
    let (l3_pre, f3) = if params.l3.is_empty() {
        (Vec::new(), f2.clone())
    } else {
        exchange(&f2, &params.l3)?
    };

    let mut nl_l4 = Vec::with_capacity(b);
    for k in 0..b {
        nl_l4.push(fixed_radius_neighbors(&branch_pts[k], active_pts, params.l4[k].radius)?);
    }
    let mut l4_acc: Option<Matrix> = None;
    for k in 0..b {
        let part = cconv_forward_scaled(
            &f3[k],
            &branch_pts[k],
            active_pts,
            &params.l4[k],
            &nl_l4[k],
            scale,
        )?;
        match &mut l4_acc {
            None => l4_acc = Some(part),
            Some(m) => m.add_assign(&part),
        }
    }
    let l4_pre = l4_acc.expect("at least one branch");
    let f4 = relu(&l4_pre);

    Ok(TrunkCache {
        nl_l1,
        nl_cross,
        nl_l4,
        l1_pre,
        f1,
        l2_pre,
        f2,
        l3_pre,
        f3,
        l4_pre,
        f4,
    })
}

/// Multi-scale feature aggregation given preprocessed features `f0` on
/// `points`. Returns features on `points` (L4 resamples every branch back
/// to the main branch).
pub fn multiscale_forward(
    f0: &Matrix,
    points: &PointSet,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<Matrix> {
    let (branch_pts, _) = sample_branches(points, cfg)?;
    multiscale_stage(f0, points, &branch_pts, params, cfg).map(|t| t.f4)
}

/// Forward pass returning the output together with the cache needed by
/// [`network_backward`].
pub fn forward_cached(
    state: &ParticleState,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<(NetworkOutput, NetworkCache)> {
    cfg.validate()?;
    let d = state.dim();
    let rot = if cfg.gravity_normalization {
        let fluid = state.fluid_indices();
        if let Some(&i) = fluid.first() {
            gravity_rotation(state.accelerations.row(i))
        } else {
            Rotation::identity(d)
        }
    } else {
        Rotation::identity(d)
    };
    let ctx = build_geometry(state, cfg, &rot)?;
    let (pre_concat, nl_pre_fluid, nl_pre_boundary) = preprocess_stage(&ctx, params, cfg)?;
    let f0 = relu(&pre_concat);
    let (branch_pts, branch_src) = sample_branches(&ctx.active_pts, cfg)?;
    let trunk = multiscale_stage(&f0, &ctx.active_pts, &branch_pts, params, cfg)?;

    // Head input lives on the full union; when the trunk is fluid-only the
    // boundary rows enter with zero features.
    let n = state.len();
    let head_in = if cfg.boundary_all_layers {
        trunk.f4.clone()
    } else {
        let mut m = Matrix::zeros(n, trunk.f4.cols());
        for (row, &i) in ctx.active_rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(trunk.f4.row(row));
        }
        m
    };
    let (nl_head, raw_rot) = match &params.head {
        HeadParams::Ascc(kern) => {
            let nl = fixed_radius_neighbors(&ctx.union_pts, &ctx.union_pts, kern.radius)?;
            let out = ascc_forward_scaled(&head_in, &ctx.union_pts, kern, &nl, cfg.kernel_scale)?;
            (nl, out)
        }
        HeadParams::CConv(kern) => {
            let nl = fixed_radius_neighbors(&ctx.union_pts, &ctx.union_pts, kern.radius)?;
            let out = cconv_forward_scaled(
                &head_in,
                &ctx.union_pts,
                &ctx.union_pts,
                kern,
                &nl,
                cfg.kernel_scale,
            )?;
            (nl, out)
        }
    };

    let inv = rot.inverse();
    let raw_union = inv.apply_rows(&raw_rot);
    let delta_x = raw_union.select_rows(&ctx.fluid_rows);

    let cache = NetworkCache {
        rotation: rot,
        union_pts: ctx.union_pts,
        fluid_rows: ctx.fluid_rows,
        active_rows: ctx.active_rows,
        fluid_pts: ctx.fluid_pts,
        boundary_pts: ctx.boundary_pts,
        active_pts: ctx.active_pts,
        fluid_in: ctx.fluid_in,
        boundary_in: ctx.boundary_in,
        branch_pts,
        branch_src,
        nl_pre_fluid,
        nl_pre_boundary,
        nl_l1: trunk.nl_l1,
        nl_cross: trunk.nl_cross,
        nl_l4: trunk.nl_l4,
        nl_head,
        pre_concat,
        f0,
        l1_pre: trunk.l1_pre,
        f1: trunk.f1,
        l2_pre: trunk.l2_pre,
        f2: trunk.f2,
        l3_pre: trunk.l3_pre,
        f3: trunk.f3,
        l4_pre: trunk.l4_pre,
        head_in,
    };
    Ok((NetworkOutput { delta_x, raw_union }, cache))
}

/// The model `G(x', v', params)`: position residuals for fluid particles.
pub fn network_forward(
    state: &ParticleState,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<NetworkOutput> {
    forward_cached(state, params, cfg).map(|(out, _)| out)
}

/// Exact adjoint of [`forward_cached`] with respect to parameters, fluid
/// positions and fluid velocities. `grad_dx` is the cotangent of
/// `NetworkOutput::delta_x` (fluid rows, original frame).
pub fn network_backward(
    grad_dx: &Matrix,
    cache: &NetworkCache,
    params: &ModelParams,
    cfg: &ArchitectureConfig,
) -> Result<NetworkGrads> {
    let d = cfg.dim;
    let n = cache.union_pts.len();
    let nf = cache.fluid_rows.len();
    if grad_dx.rows() != nf || grad_dx.cols() != d {
        return Err(Error::contract(format!(
            "grad_dx shape {}x{} does not match fluid output {}x{}",
            grad_dx.rows(),
            grad_dx.cols(),
            nf,
            d
        )));
    }
    let mut grads = ModelParams::new(cfg)?;
    let scale = cfg.kernel_scale;
    let rot = &cache.rotation;
    let b = cfg.branches;

    // delta_x = R^T raw_rot, so raw_rot_bar = R delta_x_bar (fluid rows).
    let mut grad_raw_rot = Matrix::zeros(n, d);
    for (row, &i) in cache.fluid_rows.iter().enumerate() {
        let g = rot.apply(grad_dx.row(row));
        grad_raw_rot.row_mut(i).copy_from_slice(&g);
    }

    // Position gradients accumulate in the rotated frame on union rows.
    let mut grad_pos_rot = Matrix::zeros(n, d);

    // Head backward.
    let grad_head_in = match (&params.head, &mut grads.head) {
        (HeadParams::Ascc(kern), HeadParams::Ascc(gk)) => {
            let g = ascc_backward_scaled(
                &grad_raw_rot,
                &cache.head_in,
                &cache.union_pts,
                kern,
                &cache.nl_head,
                scale,
            )?;
            gk.half_values.copy_from_slice(&g.half_values);
            grad_pos_rot.add_assign(&g.positions);
            g.f
        }
        (HeadParams::CConv(kern), HeadParams::CConv(gk)) => {
            let g = cconv_backward_scaled(
                &grad_raw_rot,
                &cache.head_in,
                &cache.union_pts,
                &cache.union_pts,
                kern,
                &cache.nl_head,
                scale,
            )?;
            gk.values.copy_from_slice(&g.values);
            gk.bias.copy_from_slice(&g.bias);
            grad_pos_rot.add_assign(&g.data_positions);
            grad_pos_rot.add_assign(&g.query_positions);
            g.f
        }
        _ => return Err(Error::contract("head parameter/gradient kind mismatch")),
    };

    // Gather head-input gradient onto the active rows.
    let grad_f4 = if cfg.boundary_all_layers {
        grad_head_in
    } else {
        grad_head_in.select_rows(&cache.active_rows)
    };

    // Scatter position gradients from a branch point set back onto union
    // rows. Voxel centers do not move with the particles, so their
    // gradients vanish; FPS picks real points, so theirs flow back.
    let active_rows = &cache.active_rows;
    let scatter_branch_pos =
        |grad_pos_rot: &mut Matrix, branch: usize, grad: &Matrix, cache: &NetworkCache| {
            match &cache.branch_src[branch] {
                None if branch == 0 => {
                    for (row, &i) in active_rows.iter().enumerate() {
                        for a in 0..d {
                            let v = grad_pos_rot.get(i, a) + grad.get(row, a);
                            grad_pos_rot.set(i, a, v);
                        }
                    }
                }
                None => {}
                Some(src) => {
                    for (row, &s) in src.iter().enumerate() {
                        let i = active_rows[s];
                        for a in 0..d {
                            let v = grad_pos_rot.get(i, a) + grad.get(row, a);
                            grad_pos_rot.set(i, a, v);
                        }
                    }
                }
            }
        };

    // L4 backward.
    let grad_l4_pre = relu_backward(&grad_f4, &cache.l4_pre);
    let trunk_in = &cache.f3;
    let mut grad_f3: Vec<Matrix> = (0..b)
        .map(|k| Matrix::zeros(trunk_in[k].rows(), trunk_in[k].cols()))
        .collect();
    for k in 0..b {
        let g = cconv_backward_scaled(
            &grad_l4_pre,
            &trunk_in[k],
            &cache.branch_pts[k],
            &cache.active_pts,
            &params.l4[k],
            &cache.nl_l4[k],
            scale,
        )?;
        grads.l4[k].values.copy_from_slice(&g.values);
        grads.l4[k].bias.copy_from_slice(&g.bias);
        grad_f3[k].add_assign(&g.f);
        scatter_branch_pos(&mut grad_pos_rot, k, &g.data_positions, cache);
        scatter_branch_pos(&mut grad_pos_rot, 0, &g.query_positions, cache);
    }

    // Exchange layers backward (L3 then L2).
    let backward_exchange = |grad_out: Vec<Matrix>,
                                 pre: &[Matrix],
                                 inputs: &[Matrix],
                                 kernels: &[Vec<KernelGrid>],
                                 grad_kernels: &mut Vec<Vec<KernelGrid>>,
                                 grad_pos_rot: &mut Matrix|
     -> Result<Vec<Matrix>> {
        let mut grad_in: Vec<Matrix> = (0..b)
            .map(|k| Matrix::zeros(inputs[k].rows(), inputs[k].cols()))
            .collect();
        for j in 0..b {
            let g_pre = relu_backward(&grad_out[j], &pre[j]);
            for k in 0..b {
                let g = cconv_backward_scaled(
                    &g_pre,
                    &inputs[k],
                    &cache.branch_pts[k],
                    &cache.branch_pts[j],
                    &kernels[j][k],
                    &cache.nl_cross[j][k],
                    scale,
                )?;
                grad_kernels[j][k].values.copy_from_slice(&g.values);
                grad_kernels[j][k].bias.copy_from_slice(&g.bias);
                grad_in[k].add_assign(&g.f);
                scatter_branch_pos(grad_pos_rot, k, &g.data_positions, cache);
                scatter_branch_pos(grad_pos_rot, j, &g.query_positions, cache);
            }
        }
        Ok(grad_in)
    };

    let grad_f2 = if params.l3.is_empty() {
        grad_f3
    } else {
        backward_exchange(
            grad_f3,
            &cache.l3_pre,
            &cache.f2,
            &params.l3,
            &mut grads.l3,
            &mut grad_pos_rot,
        )?
    };
    let grad_f1 = backward_exchange(
        grad_f2,
        &cache.l2_pre,
        &cache.f1,
        &params.l2,
        &mut grads.l2,
        &mut grad_pos_rot,
    )?;

    // L1 backward.
    let na = cache.active_pts.len();
    let mut grad_f0 = Matrix::zeros(na, cache.f0.cols());
    for j in 0..b {
        let g_pre = relu_backward(&grad_f1[j], &cache.l1_pre[j]);
        let g = cconv_backward_scaled(
            &g_pre,
            &cache.f0,
            &cache.active_pts,
            &cache.branch_pts[j],
            &params.l1[j],
            &cache.nl_l1[j],
            scale,
        )?;
        grads.l1[j].values.copy_from_slice(&g.values);
        grads.l1[j].bias.copy_from_slice(&g.bias);
        grad_f0.add_assign(&g.f);
        scatter_branch_pos(&mut grad_pos_rot, 0, &g.data_positions, cache);
        scatter_branch_pos(&mut grad_pos_rot, j, &g.query_positions, cache);
    }

    // Preprocessing backward.
    let grad_pre_concat = relu_backward(&grad_f0, &cache.pre_concat);
    let pc = cfg.preprocess_channels;
    let (grad_pre_f, grad_pre_b) = split_columns(&grad_pre_concat, pc);
    let gf = cconv_backward_scaled(
        &grad_pre_f,
        &cache.fluid_in,
        &cache.fluid_pts,
        &cache.active_pts,
        &params.pre_fluid,
        &cache.nl_pre_fluid,
        scale,
    )?;
    grads.pre_fluid.values.copy_from_slice(&gf.values);
    grads.pre_fluid.bias.copy_from_slice(&gf.bias);
    let gb = cconv_backward_scaled(
        &grad_pre_b,
        &cache.boundary_in,
        &cache.boundary_pts,
        &cache.active_pts,
        &params.pre_boundary,
        &cache.nl_pre_boundary,
        scale,
    )?;
    grads.pre_boundary.values.copy_from_slice(&gb.values);
    grads.pre_boundary.bias.copy_from_slice(&gb.bias);

    // Fluid data positions from the fluid-type conv; boundary data
    // positions are static and dropped.
    for (row, &i) in cache.fluid_rows.iter().enumerate() {
        for a in 0..d {
            let v = grad_pos_rot.get(i, a) + gf.data_positions.get(row, a);
            grad_pos_rot.set(i, a, v);
        }
    }
    for (row, &i) in cache.active_rows.iter().enumerate() {
        for a in 0..d {
            let v = grad_pos_rot.get(i, a)
                + gf.query_positions.get(row, a)
                + gb.query_positions.get(row, a);
            grad_pos_rot.set(i, a, v);
        }
    }

    // Rotate gradients back into the original frame: positions_rot = R x
    // and features_rot = R v, so the adjoints pick up R^T.
    let inv = rot.inverse();
    let mut positions = Matrix::zeros(nf, d);
    for (row, &i) in cache.fluid_rows.iter().enumerate() {
        let g = inv.apply(grad_pos_rot.row(i));
        positions.row_mut(row).copy_from_slice(&g);
    }
    let (grad_vel_rot, _grad_acc_rot) = split_columns(&gf.f, d);
    let velocities = inv.apply_rows(&grad_vel_rot);

    Ok(NetworkGrads {
        params: grads,
        positions,
        velocities,
    })
}
