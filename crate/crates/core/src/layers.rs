//! Continuous convolutions on point sets.
//!
//! `cconv_forward` implements the classic continuous convolution: neighbor
//! features are weighted by a window function and a learnable kernel grid
//! sampled with multilinear interpolation at the relative offset.
//!
//! `ascc_forward` is the antisymmetric variant: the kernel grid is stored as
//! a half grid and materialized by point reflection with negation, the
//! feature term is reflexive (`f(x) + f(x_k)`), there is no bias, and data
//! and query sets must coincide. Under those rules every pairwise
//! contribution has an equal and opposite partner, so the column sums of the
//! output vanish — a hard conservation constraint that holds for any kernel
//! values.
//!
//! Backward passes produce exact adjoints for features, kernel values,
//! biases and particle positions; position adjoints matter because training
//! backpropagates through time and positions feed the next step.

use crate::error::{Error, Result};
use crate::geometry::{NeighborList, PointSet};
use crate::mat::Matrix;
use num_traits::{Float, NumCast};

/// Radially decaying window multiplying interpolated kernel values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Poly6,
    Peak,
}

/// Scalar type the convolution kernels run in (f32 or f64).
pub trait ConvScalar: Float + NumCast + Copy + std::fmt::Debug {
    /// Power-of-two grid that normalized offsets snap to. Snapping makes the
    /// grid coordinate of `-v` the exact mirror of the coordinate of `v`,
    /// which the antisymmetry of the kernel relies on.
    fn snap() -> Self;
}

impl ConvScalar for f64 {
    fn snap() -> f64 {
        (1u64 << 40) as f64
    }
}

impl ConvScalar for f32 {
    fn snap() -> f32 {
        (1u32 << 10) as f32
    }
}

#[inline]
fn window_value<T: ConvScalar>(window: Window, q: T) -> T {
    let one = T::one();
    if q >= one {
        return T::zero();
    }
    match window {
        Window::Poly6 => {
            let t = one - q * q;
            t * t * t
        }
        Window::Peak => {
            let t = one - q;
            t * t * t
        }
    }
}

#[inline]
fn window_deriv(window: Window, q: f64) -> f64 {
    match window {
        Window::Poly6 => crate::geometry::poly6_window_deriv(q),
        Window::Peak => crate::geometry::peak_window_deriv(q),
    }
}

#[inline]
fn coord_axis<T: ConvScalar>(offset: T, radius: T, k: usize) -> T {
    let one = T::one();
    let half = T::from((k - 1) as f64).unwrap() / T::from(2.0).unwrap();
    let s = (offset / radius).max(-one).min(one);
    let snapped = (s * T::snap()).round() / T::snap();
    half + snapped * half
}

/// Per-axis interpolation stencil: lower node index and fractional weight.
#[inline]
fn stencil_axis<T: ConvScalar>(c: T, k: usize) -> (usize, T) {
    let mut i0 = c.floor().to_usize().unwrap_or(0);
    if i0 > k - 2 {
        i0 = k - 2;
    }
    let t = c - T::from(i0).unwrap();
    (i0, t)
}

/// Learnable convolution kernel on a regular grid with `k` nodes per axis.
///
/// `values` is laid out `[cell][c_in][c_out]` with cells row-major over the
/// axes. Carries a per-output-channel bias (initialized to zero).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrid {
    pub dim: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub radius: f64,
    pub window: Window,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelGrid {
    pub fn new(
        dim: usize,
        k: usize,
        c_in: usize,
        c_out: usize,
        radius: f64,
        window: Window,
    ) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::config(format!("kernel dim must be 1..=3, got {dim}")));
        }
        if k < 2 {
            return Err(Error::config("kernel size must be at least 2"));
        }
        if radius <= 0.0 {
            return Err(Error::config("kernel radius must be positive"));
        }
        let cells = k.pow(dim as u32);
        Ok(KernelGrid {
            dim,
            k,
            c_in,
            c_out,
            radius,
            window,
            values: vec![0.0; cells * c_in * c_out],
            bias: vec![0.0; c_out],
        })
    }

    pub fn cells(&self) -> usize {
        self.k.pow(self.dim as u32)
    }

    pub fn param_count(&self) -> usize {
        self.values.len() + self.bias.len()
    }
}

/// Antisymmetric kernel: only the half of the grid with mirror-axis index
/// `< k/2` is stored. The full grid satisfies
/// `g[idx] == -g[(k-1) - idx]` (reflection through the center on all axes).
///
/// The mirror axis is fixed: the canonical y axis in 2D/3D, axis 0 in 1D.
#[derive(Clone, Debug, PartialEq)]
pub struct AntisymmetricKernel {
    pub dim: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub radius: f64,
    pub window: Window,
    pub half_values: Vec<f64>,
}

impl AntisymmetricKernel {
    pub fn new(dim: usize, k: usize, c_in: usize, c_out: usize, radius: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::config(format!("kernel dim must be 1..=3, got {dim}")));
        }
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "antisymmetric kernel size must be even and >= 2, got {k}"
            )));
        }
        if radius <= 0.0 {
            return Err(Error::config("kernel radius must be positive"));
        }
        let half_cells = k.pow(dim as u32) / 2;
        Ok(AntisymmetricKernel {
            dim,
            k,
            c_in,
            c_out,
            radius,
            window: Window::Peak,
            half_values: vec![0.0; half_cells * c_in * c_out],
        })
    }

    pub fn mirror_axis(&self) -> usize {
        if self.dim == 1 {
            0
        } else {
            1
        }
    }

    pub fn half_cells(&self) -> usize {
        self.k.pow(self.dim as u32) / 2
    }

    pub fn param_count(&self) -> usize {
        self.half_values.len()
    }

    /// Materialize the full grid: the stored half is copied, the mirrored
    /// half is the negated value at the point-reflected index.
    pub fn materialize(&self) -> Vec<f64> {
        materialize_antisymmetric_t::<f64>(
            &self.half_values,
            self.dim,
            self.k,
            self.c_in * self.c_out,
            self.mirror_axis(),
        )
    }
}

/// Extents of the full grid per axis (row-major, axis 0 slowest).
fn full_strides(dim: usize, k: usize) -> [usize; 3] {
    let mut strides = [1usize; 3];
    for a in (0..dim.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * k;
    }
    strides
}

/// Iterate multi-indices of the half grid, yielding (full cell, mirrored
/// full cell) linear indices. The half grid restricts the mirror axis to
/// indices `< k/2`.
fn for_each_half_cell(
    dim: usize,
    k: usize,
    mirror_axis: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let strides = full_strides(dim, k);
    let extent = |a: usize| if a == mirror_axis { k / 2 } else { k };
    let mut half = 0usize;
    let e0 = if dim > 0 { extent(0) } else { 1 };
    let e1 = if dim > 1 { extent(1) } else { 1 };
    let e2 = if dim > 2 { extent(2) } else { 1 };
    for i0 in 0..e0 {
        for i1 in 0..e1 {
            for i2 in 0..e2 {
                let idx = [i0, i1, i2];
                let mut cell = 0usize;
                let mut mirror = 0usize;
                for a in 0..dim {
                    cell += idx[a] * strides[a];
                    mirror += (k - 1 - idx[a]) * strides[a];
                }
                f(half, cell, mirror);
                half += 1;
            }
        }
    }
}

pub(crate) fn materialize_antisymmetric_t<T: ConvScalar>(
    half: &[T],
    dim: usize,
    k: usize,
    block: usize,
    mirror_axis: usize,
) -> Vec<T> {
    let cells = k.pow(dim as u32);
    let mut full = vec![T::zero(); cells * block];
    for_each_half_cell(dim, k, mirror_axis, |h, cell, mirror| {
        for b in 0..block {
            let v = half[h * block + b];
            full[cell * block + b] = v;
            full[mirror * block + b] = -v;
        }
    });
    full
}

/// Materialize an antisymmetric kernel's full grid (see
/// [`AntisymmetricKernel::materialize`]).
pub fn materialize_antisymmetric(kernel: &AntisymmetricKernel) -> Vec<f64> {
    kernel.materialize()
}

/// Order neighbors by their relative offset (lexicographic). The output of
/// a convolution is then bit-identical under any permutation of the point
/// numbering, because the per-query accumulation order depends only on
/// geometry.
fn geometric_order<T: ConvScalar>(
    order: &mut Vec<usize>,
    offsets: &mut Vec<T>,
    dim: usize,
    data: &[T],
    qp: &[T],
    neighbors: &[usize],
) {
    order.clear();
    order.extend(0..neighbors.len());
    offsets.clear();
    for &k in neighbors {
        for a in 0..dim {
            offsets.push(data[k * dim + a] - qp[a]);
        }
    }
    order.sort_unstable_by(|&x, &y| {
        let ox = &offsets[x * dim..x * dim + dim];
        let oy = &offsets[y * dim..y * dim + dim];
        ox.partial_cmp(oy).unwrap_or(std::cmp::Ordering::Equal)
    });
}

struct ConvGeom<T> {
    /// Window value already multiplied by the kernel scale.
    w: T,
    /// Raw distance and offset (needed by backward only).
    dist: T,
    /// Per-axis stencil: lower node and fraction.
    nodes: [usize; 3],
    fracs: [T; 3],
    /// Whether each axis was clamped (zero coordinate slope).
    clamped: [bool; 3],
}

#[inline]
fn pair_geometry<T: ConvScalar>(
    offset: &[T],
    dim: usize,
    radius: T,
    k: usize,
    window: Window,
    scale: T,
) -> (ConvGeom<T>, T) {
    let mut dist2 = T::zero();
    for &o in offset.iter().take(dim) {
        dist2 = dist2 + o * o;
    }
    let dist = dist2.sqrt();
    let q = dist / radius;
    let w = window_value(window, q) * scale;
    let mut geom = ConvGeom {
        w,
        dist,
        nodes: [0; 3],
        fracs: [T::zero(); 3],
        clamped: [false; 3],
    };
    for a in 0..dim {
        let c = coord_axis(offset[a], radius, k);
        let (i0, t) = stencil_axis(c, k);
        geom.nodes[a] = i0;
        geom.fracs[a] = t;
        geom.clamped[a] = (offset[a] / radius).abs() >= T::one();
    }
    (geom, q)
}

/// Visit the 2^d interpolation corners: linear cell index and weight.
#[inline]
fn for_each_corner<T: ConvScalar>(
    dim: usize,
    k: usize,
    geom: &ConvGeom<T>,
    mut f: impl FnMut(usize, T, usize),
) {
    let strides = full_strides(dim, k);
    let one = T::one();
    for bits in 0..(1usize << dim) {
        let mut cell = 0usize;
        let mut w = geom.w;
        for a in 0..dim {
            let hi = (bits >> a) & 1 == 1;
            cell += (geom.nodes[a] + hi as usize) * strides[a];
            w = w * if hi { geom.fracs[a] } else { one - geom.fracs[a] };
        }
        f(cell, w, bits);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_core<T: ConvScalar>(
    out: &mut [T],
    feats: &[T],
    c_in: usize,
    data_coords: &[T],
    query_coords: &[T],
    dim: usize,
    grid: &[T],
    k: usize,
    c_out: usize,
    radius: T,
    window: Window,
    scale: T,
    neighbors: &NeighborList,
    reflexive: bool,
) {
    let nq = query_coords.len() / dim.max(1);
    let mut order: Vec<usize> = Vec::new();
    let mut offsets: Vec<T> = Vec::new();
    let mut fsum: Vec<T> = vec![T::zero(); c_in];
    for qi in 0..nq {
        let qp = &query_coords[qi * dim..qi * dim + dim];
        let list = neighbors.neighbors(qi);
        geometric_order(&mut order, &mut offsets, dim, data_coords, qp, list);
        let out_row = &mut out[qi * c_out..(qi + 1) * c_out];
        for &oi in order.iter() {
            let ki = list[oi];
            let offset = &offsets[oi * dim..oi * dim + dim];
            let (geom, _) = pair_geometry(offset, dim, radius, k, window, scale);
            if geom.w == T::zero() {
                continue;
            }
            let fk = &feats[ki * c_in..(ki + 1) * c_in];
            let f_row: &[T] = if reflexive {
                let fq = &feats[qi * c_in..(qi + 1) * c_in];
                for ((s, a), b) in fsum.iter_mut().zip(fq).zip(fk) {
                    *s = *a + *b;
                }
                &fsum
            } else {
                fk
            };
            for_each_corner(dim, k, &geom, |cell, cw, _| {
                let base = cell * c_in * c_out;
                for (ci, &fv) in f_row.iter().enumerate() {
                    let coef = cw * fv;
                    if coef == T::zero() {
                        continue;
                    }
                    let gseg = &grid[base + ci * c_out..base + (ci + 1) * c_out];
                    for (o, &g) in out_row.iter_mut().zip(gseg) {
                        *o = *o + coef * g;
                    }
                }
            });
        }
    }
}

fn check_cconv_args(
    f: &Matrix,
    data: &PointSet,
    query: &PointSet,
    kernel: &KernelGrid,
    neighbors: &NeighborList,
) -> Result<()> {
    if data.dim() != kernel.dim || query.dim() != kernel.dim {
        return Err(Error::input(format!(
            "point dim {} / {} does not match kernel dim {}",
            data.dim(),
            query.dim(),
            kernel.dim
        )));
    }
    if f.rows() != data.len() {
        return Err(Error::input(format!(
            "feature rows {} != data points {}",
            f.rows(),
            data.len()
        )));
    }
    if f.cols() != kernel.c_in {
        return Err(Error::input(format!(
            "feature cols {} != kernel c_in {}",
            f.cols(),
            kernel.c_in
        )));
    }
    if neighbors.query_count() != query.len() {
        return Err(Error::contract(format!(
            "neighbor list has {} queries, point set has {}",
            neighbors.query_count(),
            query.len()
        )));
    }
    if neighbors.radius() != kernel.radius {
        return Err(Error::contract(format!(
            "neighbor list radius {} != kernel radius {}",
            neighbors.radius(),
            kernel.radius
        )));
    }
    Ok(())
}

/// Continuous convolution of `f` (living on `data`) evaluated at `query`.
///
/// `out(x) = bias + sum_k w(|x_k - x| / r) * f_k * G(x_k - x)` with `G` the
/// multilinear interpolation of the kernel grid. No neighbor-count
/// normalization.
pub fn cconv_forward(
    f: &Matrix,
    data: &PointSet,
    query: &PointSet,
    kernel: &KernelGrid,
    neighbors: &NeighborList,
) -> Result<Matrix> {
    cconv_forward_scaled(f, data, query, kernel, neighbors, 1.0)
}

/// `cconv_forward` with every kernel value multiplied by `scale`
/// (sampling-ratio compensation; the bias is not scaled).
pub fn cconv_forward_scaled(
    f: &Matrix,
    data: &PointSet,
    query: &PointSet,
    kernel: &KernelGrid,
    neighbors: &NeighborList,
    scale: f64,
) -> Result<Matrix> {
    check_cconv_args(f, data, query, kernel, neighbors)?;
    let mut out = Matrix::zeros(query.len(), kernel.c_out);
    conv_forward_core(
        out.data_mut(),
        f.data(),
        kernel.c_in,
        data.coords().data(),
        query.coords().data(),
        kernel.dim,
        &kernel.values,
        kernel.k,
        kernel.c_out,
        kernel.radius,
        kernel.window,
        scale,
        neighbors,
        false,
    );
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&kernel.bias) {
            *o += b;
        }
    }
    Ok(out)
}

fn check_ascc_args(
    f: &Matrix,
    points: &PointSet,
    kernel: &AntisymmetricKernel,
    neighbors: &NeighborList,
) -> Result<()> {
    if points.dim() != kernel.dim {
        return Err(Error::input(format!(
            "point dim {} does not match kernel dim {}",
            points.dim(),
            kernel.dim
        )));
    }
    if f.rows() != points.len() {
        return Err(Error::input(format!(
            "feature rows {} != points {}",
            f.rows(),
            points.len()
        )));
    }
    if f.cols() != kernel.c_in {
        return Err(Error::input(format!(
            "feature cols {} != kernel c_in {}",
            f.cols(),
            kernel.c_in
        )));
    }
    if neighbors.query_count() != points.len() {
        return Err(Error::contract(
            "antisymmetric convolution requires data == query; neighbor list size disagrees",
        ));
    }
    if neighbors.radius() != kernel.radius {
        return Err(Error::contract(format!(
            "neighbor list radius {} != kernel radius {}",
            neighbors.radius(),
            kernel.radius
        )));
    }
    Ok(())
}

/// Antisymmetric continuous convolution over a single point set.
///
/// `out(x) = sum_k w(|x_k - x| / r) * (f(x) + f_k) * G_s(x_k - x)`, no bias.
/// The column sums of the output over all points vanish up to
/// floating-point cancellation, for any kernel values.
pub fn ascc_forward(
    f: &Matrix,
    points: &PointSet,
    kernel: &AntisymmetricKernel,
    neighbors: &NeighborList,
) -> Result<Matrix> {
    ascc_forward_scaled(f, points, kernel, neighbors, 1.0)
}

/// `ascc_forward` with kernel values multiplied by `scale`.
pub fn ascc_forward_scaled(
    f: &Matrix,
    points: &PointSet,
    kernel: &AntisymmetricKernel,
    neighbors: &NeighborList,
    scale: f64,
) -> Result<Matrix> {
    check_ascc_args(f, points, kernel, neighbors)?;
    let grid = kernel.materialize();
    let mut out = Matrix::zeros(points.len(), kernel.c_out);
    conv_forward_core(
        out.data_mut(),
        f.data(),
        kernel.c_in,
        points.coords().data(),
        points.coords().data(),
        kernel.dim,
        &grid,
        kernel.k,
        kernel.c_out,
        kernel.radius,
        kernel.window,
        scale,
        neighbors,
        true,
    );
    Ok(out)
}

/// Single-precision antisymmetric convolution over flat slices. Exists so
/// the conservation property can be exercised in f32 as well as f64.
#[allow(clippy::too_many_arguments)]
pub fn ascc_forward_f32(
    coords: &[f32],
    dim: usize,
    feats: &[f32],
    c_in: usize,
    half_values: &[f32],
    k: usize,
    c_out: usize,
    radius: f32,
    neighbors: &NeighborList,
) -> Vec<f32> {
    let n = coords.len() / dim;
    assert_eq!(neighbors.query_count(), n);
    let mirror_axis = if dim == 1 { 0 } else { 1 };
    let grid = materialize_antisymmetric_t::<f32>(half_values, dim, k, c_in * c_out, mirror_axis);
    let mut out = vec![0.0f32; n * c_out];
    conv_forward_core(
        &mut out,
        feats,
        c_in,
        coords,
        coords,
        dim,
        &grid,
        k,
        c_out,
        radius,
        Window::Peak,
        1.0f32,
        neighbors,
        true,
    );
    out
}

/// Gradients of a continuous convolution.
#[derive(Clone, Debug)]
pub struct CConvGrads {
    pub f: Matrix,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
    pub data_positions: Matrix,
    pub query_positions: Matrix,
}

/// Gradients of an antisymmetric convolution. Kernel gradients flow to the
/// stored half only; a mirrored cell contributes its negated adjoint to its
/// free partner. Position gradients are for the shared point set.
#[derive(Clone, Debug)]
pub struct AsccGrads {
    pub f: Matrix,
    pub half_values: Vec<f64>,
    pub positions: Matrix,
}

struct BackwardAcc<'a> {
    grad_f: &'a mut Matrix,
    grad_grid: &'a mut [f64],
    grad_data_pos: &'a mut Matrix,
    grad_query_pos: &'a mut Matrix,
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_core(
    grad_out: &Matrix,
    feats: &Matrix,
    c_in: usize,
    data: &PointSet,
    query: &PointSet,
    dim: usize,
    grid: &[f64],
    k: usize,
    c_out: usize,
    radius: f64,
    window: Window,
    scale: f64,
    neighbors: &NeighborList,
    reflexive: bool,
    acc: &mut BackwardAcc,
) {
    let half = (k - 1) as f64 / 2.0;
    let coord_slope = half / radius;
    let strides = full_strides(dim, k);
    let mut order: Vec<usize> = Vec::new();
    let mut offsets: Vec<f64> = Vec::new();
    let mut fsum: Vec<f64> = vec![0.0; c_in];
    let mut s_per_ci: Vec<f64> = vec![0.0; c_in];
    let data_coords = data.coords().data();
    for qi in 0..query.len() {
        let qp = query.point(qi);
        let ybar = grad_out.row(qi);
        if ybar.iter().all(|v| *v == 0.0) {
            continue;
        }
        let list = neighbors.neighbors(qi);
        geometric_order(&mut order, &mut offsets, dim, data_coords, qp, list);
        for &oi in order.iter() {
            let ki = list[oi];
            let offset = &offsets[oi * dim..oi * dim + dim];
            let (geom, q_norm) = pair_geometry(offset, dim, radius, k, window, scale);
            if q_norm >= 1.0 {
                continue;
            }
            let fk = feats.row(ki);
            let f_row: &[f64] = if reflexive {
                let fq = feats.row(qi);
                for ((s, a), b) in fsum.iter_mut().zip(fq).zip(fk) {
                    *s = *a + *b;
                }
                &fsum
            } else {
                fk
            };

            // One pass over the interpolation corners produces:
            //   - grid adjoints        w * cw * f[ci] * ybar[co]
            //   - feature adjoints     w * cw * (G . ybar)
            //   - corner scalars       P_b = scale * f . G_b . ybar
            // The position gradient combines the corner scalars with the
            // interpolation-weight and window derivatives:
            //   d(out . ybar)/du_a = w'(q) u_a/(|u| r) sum_b cw_b P_b
            //                      + w(q) sum_b (dcw_b/dc_a)(dc_a/du_a) P_b
            let wq = window_value(window, q_norm);
            let w_total = wq * scale;
            let wd = window_deriv(window, q_norm);
            let mut p_weighted = 0.0;
            let mut dpos = [0.0f64; 3];
            s_per_ci.iter_mut().for_each(|v| *v = 0.0);

            for bits in 0..(1usize << dim) {
                let mut cell = 0usize;
                let mut cw = 1.0f64;
                for a in 0..dim {
                    let hi = (bits >> a) & 1 == 1;
                    cell += (geom.nodes[a] + hi as usize) * strides[a];
                    cw *= if hi { geom.fracs[a] } else { 1.0 - geom.fracs[a] };
                }
                let base = cell * c_in * c_out;
                let mut p = 0.0;
                for ci in 0..c_in {
                    let gseg = &grid[base + ci * c_out..base + (ci + 1) * c_out];
                    let mut s = 0.0;
                    for (y, g) in ybar.iter().zip(gseg) {
                        s += y * g;
                    }
                    p += f_row[ci] * s;
                    s_per_ci[ci] += w_total * cw * s;
                    let coef = w_total * cw * f_row[ci];
                    let gg = &mut acc.grad_grid[base + ci * c_out..base + (ci + 1) * c_out];
                    for (g, y) in gg.iter_mut().zip(ybar) {
                        *g += coef * y;
                    }
                }
                let p = p * scale;
                p_weighted += cw * p;
                for a in 0..dim {
                    if geom.clamped[a] {
                        continue;
                    }
                    let hi = (bits >> a) & 1 == 1;
                    let mut dcw = if hi { 1.0 } else { -1.0 };
                    for a2 in 0..dim {
                        if a2 == a {
                            continue;
                        }
                        let hi2 = (bits >> a2) & 1 == 1;
                        dcw *= if hi2 { geom.fracs[a2] } else { 1.0 - geom.fracs[a2] };
                    }
                    dpos[a] += wq * dcw * coord_slope * p;
                }
            }

            if wd != 0.0 && geom.dist > 0.0 {
                let c = wd / (geom.dist * radius);
                for a in 0..dim {
                    dpos[a] += c * offset[a] * p_weighted;
                }
            }

            for (ci, &s) in s_per_ci.iter().enumerate() {
                acc.grad_f.row_mut(ki)[ci] += s;
                if reflexive {
                    acc.grad_f.row_mut(qi)[ci] += s;
                }
            }
            for a in 0..dim {
                acc.grad_data_pos.row_mut(ki)[a] += dpos[a];
                acc.grad_query_pos.row_mut(qi)[a] -= dpos[a];
            }
        }
    }
}

/// Exact adjoints of `cconv_forward_scaled`.
pub fn cconv_backward_scaled(
    grad_out: &Matrix,
    f: &Matrix,
    data: &PointSet,
    query: &PointSet,
    kernel: &KernelGrid,
    neighbors: &NeighborList,
    scale: f64,
) -> Result<CConvGrads> {
    check_cconv_args(f, data, query, kernel, neighbors)?;
    if grad_out.rows() != query.len() || grad_out.cols() != kernel.c_out {
        return Err(Error::contract(format!(
            "grad_out shape {}x{} does not match forward output {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            query.len(),
            kernel.c_out
        )));
    }
    let mut grads = CConvGrads {
        f: Matrix::zeros(f.rows(), f.cols()),
        values: vec![0.0; kernel.values.len()],
        bias: vec![0.0; kernel.c_out],
        data_positions: Matrix::zeros(data.len(), data.dim()),
        query_positions: Matrix::zeros(query.len(), query.dim()),
    };
    for qi in 0..query.len() {
        for (b, y) in grads.bias.iter_mut().zip(grad_out.row(qi)) {
            *b += y;
        }
    }
    let mut grad_f = std::mem::replace(&mut grads.f, Matrix::zeros(0, 0));
    let mut grad_dp = std::mem::replace(&mut grads.data_positions, Matrix::zeros(0, 0));
    let mut grad_qp = std::mem::replace(&mut grads.query_positions, Matrix::zeros(0, 0));
    {
        let mut acc = BackwardAcc {
            grad_f: &mut grad_f,
            grad_grid: &mut grads.values,
            grad_data_pos: &mut grad_dp,
            grad_query_pos: &mut grad_qp,
        };
        conv_backward_core(
            grad_out,
            f,
            kernel.c_in,
            data,
            query,
            kernel.dim,
            &kernel.values,
            kernel.k,
            kernel.c_out,
            kernel.radius,
            kernel.window,
            scale,
            neighbors,
            false,
            &mut acc,
        );
    }
    grads.f = grad_f;
    grads.data_positions = grad_dp;
    grads.query_positions = grad_qp;
    Ok(grads)
}

/// Exact adjoints of `cconv_forward`.
pub fn cconv_backward(
    grad_out: &Matrix,
    f: &Matrix,
    data: &PointSet,
    query: &PointSet,
    kernel: &KernelGrid,
    neighbors: &NeighborList,
) -> Result<CConvGrads> {
    cconv_backward_scaled(grad_out, f, data, query, kernel, neighbors, 1.0)
}

/// Exact adjoints of `ascc_forward_scaled`.
pub fn ascc_backward_scaled(
    grad_out: &Matrix,
    f: &Matrix,
    points: &PointSet,
    kernel: &AntisymmetricKernel,
    neighbors: &NeighborList,
    scale: f64,
) -> Result<AsccGrads> {
    check_ascc_args(f, points, kernel, neighbors)?;
    if grad_out.rows() != points.len() || grad_out.cols() != kernel.c_out {
        return Err(Error::contract(format!(
            "grad_out shape {}x{} does not match forward output {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            points.len(),
            kernel.c_out
        )));
    }
    let grid = kernel.materialize();
    let mut grad_full = vec![0.0; grid.len()];
    let mut grad_f = Matrix::zeros(f.rows(), f.cols());
    let mut grad_pos = Matrix::zeros(points.len(), points.dim());
    let mut grad_pos2 = Matrix::zeros(points.len(), points.dim());
    {
        let mut acc = BackwardAcc {
            grad_f: &mut grad_f,
            grad_grid: &mut grad_full,
            grad_data_pos: &mut grad_pos,
            grad_query_pos: &mut grad_pos2,
        };
        conv_backward_core(
            grad_out,
            f,
            kernel.c_in,
            points,
            points,
            kernel.dim,
            &grid,
            kernel.k,
            kernel.c_out,
            kernel.radius,
            kernel.window,
            scale,
            neighbors,
            true,
            &mut acc,
        );
    }
    grad_pos.add_assign(&grad_pos2);
    // Fold full-grid adjoints onto the free half: the mirrored cell holds
    // the negated value, so its adjoint enters with a minus sign.
    let block = kernel.c_in * kernel.c_out;
    let mut grad_half = vec![0.0; kernel.half_values.len()];
    for_each_half_cell(kernel.dim, kernel.k, kernel.mirror_axis(), |h, cell, mirror| {
        for b in 0..block {
            grad_half[h * block + b] = grad_full[cell * block + b] - grad_full[mirror * block + b];
        }
    });
    Ok(AsccGrads {
        f: grad_f,
        half_values: grad_half,
        positions: grad_pos,
    })
}

/// Exact adjoints of `ascc_forward`.
pub fn ascc_backward(
    grad_out: &Matrix,
    f: &Matrix,
    points: &PointSet,
    kernel: &AntisymmetricKernel,
    neighbors: &NeighborList,
) -> Result<AsccGrads> {
    ascc_backward_scaled(grad_out, f, points, kernel, neighbors, 1.0)
}

/// Elementwise `max(0, x)`.
pub fn relu(f: &Matrix) -> Matrix {
    let mut out = f.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward of `relu`: passes the gradient where the pre-activation was
/// positive, blocks it elsewhere.
pub fn relu_backward(grad_out: &Matrix, pre_activation: &Matrix) -> Matrix {
    assert_eq!(grad_out.rows(), pre_activation.rows());
    assert_eq!(grad_out.cols(), pre_activation.cols());
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(pre_activation.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Interpolate the materialized antisymmetric kernel at a raw offset.
/// Exposed for antisymmetry checks.
pub fn ascc_kernel_value(kernel: &AntisymmetricKernel, offset: &[f64]) -> Vec<f64> {
    let grid = kernel.materialize();
    interp_grid(&grid, kernel.dim, kernel.k, kernel.c_in * kernel.c_out, offset, kernel.radius)
}

/// Multilinear interpolation of a raw kernel grid at a relative offset.
pub fn interp_grid(
    grid: &[f64],
    dim: usize,
    k: usize,
    block: usize,
    offset: &[f64],
    radius: f64,
) -> Vec<f64> {
    let mut geom = ConvGeom {
        w: 1.0,
        dist: 0.0,
        nodes: [0; 3],
        fracs: [0.0; 3],
        clamped: [false; 3],
    };
    for a in 0..dim {
        let c = coord_axis(offset[a], radius, k);
        let (i0, t) = stencil_axis(c, k);
        geom.nodes[a] = i0;
        geom.fracs[a] = t;
    }
    let mut out = vec![0.0; block];
    for_each_corner(dim, k, &geom, |cell, cw, _| {
        let base = cell * block;
        for (o, g) in out.iter_mut().zip(&grid[base..base + block]) {
            *o += cw * g;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fixed_radius_neighbors, kernel_coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, d: usize, span: f64) -> PointSet {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            for a in 0..d {
                m.set(i, a, rng.random_range(-span..span));
            }
        }
        PointSet::new(m).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, span: f64) -> Matrix {
        let mut m = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m.set(i, j, rng.random_range(-span..span));
            }
        }
        m
    }

    fn rand_kernel(rng: &mut ChaCha8Rng, dim: usize, k: usize, c_in: usize, c_out: usize, radius: f64) -> KernelGrid {
        let mut kg = KernelGrid::new(dim, k, c_in, c_out, radius, Window::Poly6).unwrap();
        for v in &mut kg.values {
            *v = rng.random_range(-0.5..0.5);
        }
        for b in &mut kg.bias {
            *b = rng.random_range(-0.5..0.5);
        }
        kg
    }

    fn rand_ascc(rng: &mut ChaCha8Rng, dim: usize, k: usize, c_in: usize, c_out: usize, radius: f64) -> AntisymmetricKernel {
        let mut kg = AntisymmetricKernel::new(dim, k, c_in, c_out, radius).unwrap();
        for v in &mut kg.half_values {
            *v = rng.random_range(-0.5..0.5);
        }
        kg
    }

    #[test]
    fn generic_coord_matches_geometry_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5000 {
            let r = rng.random_range(0.01..3.0);
            let v = rng.random_range(-1.5 * r..1.5 * r);
            for &k in &[2usize, 6, 8] {
                let a = coord_axis::<f64>(v, r, k);
                let b = kernel_coords(&[v], r, k)[0];
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn materialize_1d_example() {
        let mut kern = AntisymmetricKernel::new(1, 4, 1, 1, 1.0).unwrap();
        kern.half_values = vec![3.0, 5.0]; // cells 0, 1
        assert_eq!(kern.materialize(), vec![3.0, 5.0, -5.0, -3.0]);
    }

    #[test]
    fn materialize_zero_and_2d() {
        let kern = AntisymmetricKernel::new(2, 2, 1, 1, 1.0).unwrap();
        assert!(kern.materialize().iter().all(|v| *v == 0.0));

        let mut kern = AntisymmetricKernel::new(2, 2, 1, 1, 1.0).unwrap();
        // half = cells with y-index < 1: (0,0) and (1,0)
        kern.half_values = vec![7.0, 2.0];
        let full = kern.materialize();
        // row-major cells: (0,0) (0,1) (1,0) (1,1)
        assert_eq!(full, vec![7.0, -2.0, 2.0, -7.0]);
    }

    #[test]
    fn odd_kernel_size_rejected() {
        assert!(AntisymmetricKernel::new(1, 5, 1, 1, 1.0).is_err());
    }

    #[test]
    fn cconv_empty_neighbors_yields_bias() {
        let data = PointSet::from_1d(&[0.0]).unwrap();
        let query = PointSet::from_1d(&[10.0, 0.0]).unwrap();
        let mut kernel = KernelGrid::new(1, 8, 1, 2, 0.5, Window::Poly6).unwrap();
        kernel.bias = vec![0.25, -1.5];
        for v in &mut kernel.values {
            *v = 0.7;
        }
        let nl = fixed_radius_neighbors(&data, &query, 0.5).unwrap();
        let f = Matrix::from_vec(1, 1, vec![2.0]);
        let out = cconv_forward(&f, &data, &query, &kernel, &nl).unwrap();
        assert_eq!(out.row(0), &[0.25, -1.5]);
        assert_ne!(out.row(1), &[0.25, -1.5]);
    }

    #[test]
    fn cconv_coincident_point_constant_grid() {
        let data = PointSet::from_1d(&[0.3]).unwrap();
        let mut kernel = KernelGrid::new(1, 8, 1, 1, 0.5, Window::Poly6).unwrap();
        for v in &mut kernel.values {
            *v = 0.8;
        }
        let nl = fixed_radius_neighbors(&data, &data, 0.5).unwrap();
        let f = Matrix::from_vec(1, 1, vec![3.0]);
        let out = cconv_forward(&f, &data, &data, &kernel, &nl).unwrap();
        // window(0) = 1 and the constant grid interpolates to 0.8.
        assert!((out.get(0, 0) - 0.8 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn cconv_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = rand_points(&mut rng, 12, 2, 0.4);
        let query = rand_points(&mut rng, 7, 2, 0.4);
        let kernel = rand_kernel(&mut rng, 2, 8, 3, 2, 0.5);
        let mut kernel_no_bias = kernel.clone();
        kernel_no_bias.bias = vec![0.0; 2];
        let nl = fixed_radius_neighbors(&data, &query, 0.5).unwrap();
        let f = rand_matrix(&mut rng, 12, 3, 1.0);
        let mut f2 = f.clone();
        f2.scale(2.0);
        let a = cconv_forward(&f, &data, &query, &kernel_no_bias, &nl).unwrap();
        let b = cconv_forward(&f2, &data, &query, &kernel_no_bias, &nl).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn cconv_shape_mismatch_rejected() {
        let data = PointSet::from_1d(&[0.0]).unwrap();
        let kernel = KernelGrid::new(1, 8, 2, 1, 0.5, Window::Poly6).unwrap();
        let nl = fixed_radius_neighbors(&data, &data, 0.5).unwrap();
        let f = Matrix::from_vec(1, 1, vec![1.0]); // c_in mismatch
        assert!(cconv_forward(&f, &data, &data, &kernel, &nl).is_err());
    }

    #[test]
    fn ascc_momentum_sum_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &d in &[1usize, 2] {
            for _ in 0..20 {
                let n = rng.random_range(2..120);
                let pts = rand_points(&mut rng, n, d, 0.5);
                let c_in = rng.random_range(1..5);
                let c_out = rng.random_range(1..3);
                let kernel = rand_ascc(&mut rng, d, 8, c_in, c_out, 0.3);
                let f = rand_matrix(&mut rng, n, c_in, 1.0);
                let nl = fixed_radius_neighbors(&pts, &pts, 0.3).unwrap();
                let out = ascc_forward(&f, &pts, &kernel, &nl).unwrap();
                let sums = out.column_sums();
                let abs = out.column_abs_sums();
                for (s, a) in sums.iter().zip(&abs) {
                    assert!(
                        s.abs() <= 1e-9 * a.max(1e-30),
                        "momentum sum {s} vs mass {a} (d={d}, n={n})"
                    );
                }
            }
        }
    }

    #[test]
    fn ascc_two_body_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = PointSet::from_rows(&[&[0.05, 0.02], &[-0.03, 0.06]]).unwrap();
        let kernel = rand_ascc(&mut rng, 2, 8, 3, 2, 0.3);
        let f = rand_matrix(&mut rng, 2, 3, 1.0);
        let nl = fixed_radius_neighbors(&pts, &pts, 0.3).unwrap();
        let out = ascc_forward(&f, &pts, &kernel, &nl).unwrap();
        for c in 0..2 {
            assert!((out.get(0, c) + out.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn ascc_self_term_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = PointSet::from_rows(&[&[0.4, -0.2]]).unwrap();
        let kernel = rand_ascc(&mut rng, 2, 8, 2, 2, 0.3);
        let f = rand_matrix(&mut rng, 1, 2, 1.0);
        let nl = fixed_radius_neighbors(&pts, &pts, 0.3).unwrap();
        let out = ascc_forward(&f, &pts, &kernel, &nl).unwrap();
        for c in 0..2 {
            assert!(out.get(0, c).abs() < 1e-13);
        }
    }

    #[test]
    fn ascc_zero_half_is_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = rand_points(&mut rng, 30, 2, 0.2);
        let kernel = AntisymmetricKernel::new(2, 8, 4, 2, 0.3).unwrap();
        let f = rand_matrix(&mut rng, 30, 4, 1.0);
        let nl = fixed_radius_neighbors(&pts, &pts, 0.3).unwrap();
        let out = ascc_forward(&f, &pts, &kernel, &nl).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ascc_mismatched_neighbors_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts = rand_points(&mut rng, 5, 1, 0.2);
        let other = rand_points(&mut rng, 4, 1, 0.2);
        let kernel = rand_ascc(&mut rng, 1, 8, 2, 1, 0.3);
        let f = rand_matrix(&mut rng, 5, 2, 1.0);
        let nl = fixed_radius_neighbors(&pts, &other, 0.3).unwrap();
        let err = ascc_forward(&f, &pts, &kernel, &nl);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn interpolated_kernel_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for &d in &[1usize, 2, 3] {
            let kernel = rand_ascc(&mut rng, d, 8, 1, 1, 0.25);
            for _ in 0..2000 {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-0.25..0.25)).collect();
                let neg: Vec<f64> = v.iter().map(|x| -x).collect();
                let a = ascc_kernel_value(&kernel, &v)[0];
                let b = ascc_kernel_value(&kernel, &neg)[0];
                assert!((a + b).abs() < 1e-12, "G({v:?})={a}, G(-v)={b}");
            }
            let zero = vec![0.0; d];
            assert!(ascc_kernel_value(&kernel, &zero)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = rand_points(&mut rng, 25, 2, 0.3);
        let query = rand_points(&mut rng, 10, 2, 0.3);
        let kernel = rand_kernel(&mut rng, 2, 8, 3, 2, 0.4);
        let f = rand_matrix(&mut rng, 25, 3, 1.0);
        let nl = fixed_radius_neighbors(&data, &query, 0.4).unwrap();
        let base = cconv_forward(&f, &data, &query, &kernel, &nl).unwrap();

        let t = [12.3, -4.56];
        let shift = |p: &PointSet| {
            let mut m = p.coords().clone();
            for i in 0..m.rows() {
                for a in 0..2 {
                    let v = m.get(i, a) + t[a];
                    m.set(i, a, v);
                }
            }
            PointSet::new(m).unwrap()
        };
        let data2 = shift(&data);
        let query2 = shift(&query);
        let nl2 = fixed_radius_neighbors(&data2, &query2, 0.4).unwrap();
        let moved = cconv_forward(&f, &data2, &query2, &kernel, &nl2).unwrap();
        let scale = base.max_abs().max(1e-12);
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn permutation_equivariance_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 40;
        let pts = rand_points(&mut rng, n, 2, 0.25);
        let kernel = rand_ascc(&mut rng, 2, 8, 3, 2, 0.35);
        let f = rand_matrix(&mut rng, n, 3, 1.0);
        let nl = fixed_radius_neighbors(&pts, &pts, 0.35).unwrap();
        let out = ascc_forward(&f, &pts, &kernel, &nl).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let pts_p = PointSet::new(pts.coords().select_rows(&perm)).unwrap();
        let f_p = f.select_rows(&perm);
        let nl_p = fixed_radius_neighbors(&pts_p, &pts_p, 0.35).unwrap();
        let out_p = ascc_forward(&f_p, &pts_p, &kernel, &nl_p).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_eq!(
                    out.get(old_row, c).to_bits(),
                    out_p.get(new_row, c).to_bits(),
                    "row {old_row} must permute bit-exactly"
                );
            }
        }
    }

    #[test]
    fn relu_and_backward() {
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]);
        let gx = relu_backward(&g, &x);
        assert_eq!(gx.data(), &[0.0, 0.0, 5.0]);
    }

    // ------------------------------------------------------------------
    // Finite-difference oracles for the backward passes.
    // ------------------------------------------------------------------

    const FD_STEP: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-9 {
            0.0
        } else {
            (a - b).abs() / denom
        }
    }

    /// Loss = sum(out * cotangent), checked against central differences.
    #[test]
    fn cconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &d in &[1usize, 2] {
            let n_data = 8;
            let n_query = 5;
            let data = rand_points(&mut rng, n_data, d, 0.2);
            let query = rand_points(&mut rng, n_query, d, 0.2);
            let kernel = rand_kernel(&mut rng, d, 4, 2, 3, 0.45);
            let f = rand_matrix(&mut rng, n_data, 2, 1.0);
            let cot = rand_matrix(&mut rng, n_query, 3, 1.0);

            let loss = |f: &Matrix, data: &PointSet, query: &PointSet, kernel: &KernelGrid| {
                let nl = fixed_radius_neighbors(data, query, kernel.radius).unwrap();
                let out = cconv_forward(f, data, query, kernel, &nl).unwrap();
                out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
            };

            let nl = fixed_radius_neighbors(&data, &query, kernel.radius).unwrap();
            let grads = cconv_backward(&cot, &f, &data, &query, &kernel, &nl).unwrap();

            // Feature gradients.
            for i in 0..n_data {
                for c in 0..2 {
                    let mut fp = f.clone();
                    fp.set(i, c, f.get(i, c) + FD_STEP);
                    let mut fm = f.clone();
                    fm.set(i, c, f.get(i, c) - FD_STEP);
                    let fd = (loss(&fp, &data, &query, &kernel) - loss(&fm, &data, &query, &kernel))
                        / (2.0 * FD_STEP);
                    assert!(
                        rel_err(fd, grads.f.get(i, c)) < 1e-5,
                        "d={d} grad_f[{i},{c}]: fd={fd} got={}",
                        grads.f.get(i, c)
                    );
                }
            }
            // Kernel and bias gradients (sampled).
            for s in 0..40 {
                let idx = (s * 7919) % kernel.values.len();
                let mut kp = kernel.clone();
                kp.values[idx] += FD_STEP;
                let mut km = kernel.clone();
                km.values[idx] -= FD_STEP;
                let fd = (loss(&f, &data, &query, &kp) - loss(&f, &data, &query, &km)) / (2.0 * FD_STEP);
                assert!(
                    rel_err(fd, grads.values[idx]) < 1e-5,
                    "d={d} grad_kernel[{idx}]: fd={fd} got={}",
                    grads.values[idx]
                );
            }
            for c in 0..3 {
                let mut kp = kernel.clone();
                kp.bias[c] += FD_STEP;
                let mut km = kernel.clone();
                km.bias[c] -= FD_STEP;
                let fd = (loss(&f, &data, &query, &kp) - loss(&f, &data, &query, &km)) / (2.0 * FD_STEP);
                assert!(rel_err(fd, grads.bias[c]) < 1e-6);
            }
            // Data position gradients.
            for i in 0..n_data {
                for a in 0..d {
                    let orig = data.coords().get(i, a);
                    let mut cp = data.coords().clone();
                    cp.set(i, a, orig + FD_STEP);
                    let mut cm = data.coords().clone();
                    cm.set(i, a, orig - FD_STEP);
                    let dp = PointSet::new(cp).unwrap();
                    let dm = PointSet::new(cm).unwrap();
                    let fd = (loss(&f, &dp, &query, &kernel) - loss(&f, &dm, &query, &kernel))
                        / (2.0 * FD_STEP);
                    assert!(
                        rel_err(fd, grads.data_positions.get(i, a)) < 1e-4,
                        "d={d} grad_pos[{i},{a}]: fd={fd} got={}",
                        grads.data_positions.get(i, a)
                    );
                }
            }
        }
    }

    #[test]
    fn cconv_backward_query_positions_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = 2;
        let data = rand_points(&mut rng, 9, d, 0.2);
        let query = rand_points(&mut rng, 4, d, 0.2);
        let kernel = rand_kernel(&mut rng, d, 4, 2, 2, 0.5);
        let f = rand_matrix(&mut rng, 9, 2, 1.0);
        let cot = rand_matrix(&mut rng, 4, 2, 1.0);
        let loss = |query: &PointSet| {
            let nl = fixed_radius_neighbors(&data, query, kernel.radius).unwrap();
            let out = cconv_forward(&f, &data, query, &kernel, &nl).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let nl = fixed_radius_neighbors(&data, &query, kernel.radius).unwrap();
        let grads = cconv_backward(&cot, &f, &data, &query, &kernel, &nl).unwrap();
        for i in 0..4 {
            for a in 0..d {
                let orig = query.coords().get(i, a);
                let mut cp = query.coords().clone();
                cp.set(i, a, orig + FD_STEP);
                let mut cm = query.coords().clone();
                cm.set(i, a, orig - FD_STEP);
                let fd = (loss(&PointSet::new(cp).unwrap()) - loss(&PointSet::new(cm).unwrap()))
                    / (2.0 * FD_STEP);
                assert!(
                    rel_err(fd, grads.query_positions.get(i, a)) < 1e-4,
                    "grad_query[{i},{a}]: fd={fd} got={}",
                    grads.query_positions.get(i, a)
                );
            }
        }
    }

    #[test]
    fn cconv_backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = rand_points(&mut rng, 6, 1, 0.2);
        let kernel = rand_kernel(&mut rng, 1, 8, 2, 2, 0.5);
        let f = rand_matrix(&mut rng, 6, 2, 1.0);
        let nl = fixed_radius_neighbors(&data, &data, 0.5).unwrap();
        let zeros = Matrix::zeros(6, 2);
        let grads = cconv_backward(&zeros, &f, &data, &data, &kernel, &nl).unwrap();
        assert!(grads.f.data().iter().all(|v| *v == 0.0));
        assert!(grads.values.iter().all(|v| *v == 0.0));
        assert!(grads.bias.iter().all(|v| *v == 0.0));
        assert!(grads.data_positions.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cconv_single_pair_kernel_grad_is_outer_product() {
        // One data point at distance where only known stencil cells load:
        // grad_kernel[cell, ci, co] = window * corner_weight * f[ci] * cot[co].
        let data = PointSet::from_1d(&[0.1]).unwrap();
        let query = PointSet::from_1d(&[0.0]).unwrap();
        let kernel = KernelGrid::new(1, 4, 2, 2, 0.4, Window::Poly6).unwrap();
        let f = Matrix::from_vec(1, 2, vec![2.0, -3.0]);
        let cot = Matrix::from_vec(1, 2, vec![0.5, 1.5]);
        let nl = fixed_radius_neighbors(&data, &query, 0.4).unwrap();
        let grads = cconv_backward(&cot, &f, &data, &query, &kernel, &nl).unwrap();

        let q = 0.1 / 0.4;
        let w = crate::geometry::poly6_window(q).unwrap();
        let c = kernel_coords(&[0.1], 0.4, 4)[0];
        let i0 = c.floor() as usize;
        let t = c - i0 as f64;
        for (cell, cw) in [(i0, 1.0 - t), (i0 + 1, t)] {
            for ci in 0..2 {
                for co in 0..2 {
                    let expect = w * cw * f.get(0, ci) * cot.get(0, co);
                    let got = grads.values[cell * 4 + ci * 2 + co];
                    assert!((expect - got).abs() < 1e-12, "cell {cell} ci {ci} co {co}");
                }
            }
        }
    }

    #[test]
    fn ascc_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for &d in &[1usize, 2] {
            let n = 7;
            let pts = rand_points(&mut rng, n, d, 0.2);
            let kernel = rand_ascc(&mut rng, d, 4, 2, 2, 0.5);
            let f = rand_matrix(&mut rng, n, 2, 1.0);
            let cot = rand_matrix(&mut rng, n, 2, 1.0);
            let loss = |f: &Matrix, pts: &PointSet, kern: &AntisymmetricKernel| {
                let nl = fixed_radius_neighbors(pts, pts, kern.radius).unwrap();
                let out = ascc_forward(f, pts, kern, &nl).unwrap();
                out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let nl = fixed_radius_neighbors(&pts, &pts, kernel.radius).unwrap();
            let grads = ascc_backward(&cot, &f, &pts, &kernel, &nl).unwrap();

            for i in 0..n {
                for c in 0..2 {
                    let mut fp = f.clone();
                    fp.set(i, c, f.get(i, c) + FD_STEP);
                    let mut fm = f.clone();
                    fm.set(i, c, f.get(i, c) - FD_STEP);
                    let fd = (loss(&fp, &pts, &kernel) - loss(&fm, &pts, &kernel)) / (2.0 * FD_STEP);
                    assert!(
                        rel_err(fd, grads.f.get(i, c)) < 1e-5,
                        "d={d} ascc grad_f[{i},{c}] fd={fd} got={}",
                        grads.f.get(i, c)
                    );
                }
            }
            for idx in 0..kernel.half_values.len() {
                let mut kp = kernel.clone();
                kp.half_values[idx] += FD_STEP;
                let mut km = kernel.clone();
                km.half_values[idx] -= FD_STEP;
                let fd = (loss(&f, &pts, &kp) - loss(&f, &pts, &km)) / (2.0 * FD_STEP);
                assert!(
                    rel_err(fd, grads.half_values[idx]) < 1e-5,
                    "d={d} grad_half[{idx}] fd={fd} got={}",
                    grads.half_values[idx]
                );
            }
            for i in 0..n {
                for a in 0..d {
                    let orig = pts.coords().get(i, a);
                    let mut cp = pts.coords().clone();
                    cp.set(i, a, orig + FD_STEP);
                    let mut cm = pts.coords().clone();
                    cm.set(i, a, orig - FD_STEP);
                    let fd = (loss(&f, &PointSet::new(cp).unwrap(), &kernel)
                        - loss(&f, &PointSet::new(cm).unwrap(), &kernel))
                        / (2.0 * FD_STEP);
                    assert!(
                        rel_err(fd, grads.positions.get(i, a)) < 1e-4,
                        "d={d} ascc grad_pos[{i},{a}] fd={fd} got={}",
                        grads.positions.get(i, a)
                    );
                }
            }
        }
    }

    #[test]
    fn ascc_backward_zero_cotangent_and_mirror_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let pts = rand_points(&mut rng, 6, 1, 0.1);
        let kernel = rand_ascc(&mut rng, 1, 4, 1, 1, 0.5);
        let f = rand_matrix(&mut rng, 6, 1, 1.0);
        let nl = fixed_radius_neighbors(&pts, &pts, 0.5).unwrap();
        let zeros = Matrix::zeros(6, 1);
        let grads = ascc_backward(&zeros, &f, &pts, &kernel, &nl).unwrap();
        assert!(grads.half_values.iter().all(|v| *v == 0.0));
        assert!(grads.f.data().iter().all(|v| *v == 0.0));

        // A cell and its mirror receive equal-magnitude opposite raw
        // adjoints; the fold places their signed sum on the free half.
        // With a symmetric two-point configuration the raw adjoint at cell c
        // from pair (0,1) is the negation of the adjoint at mirror(c) from
        // pair (1,0), so the fold doubles rather than cancels.
        let pts2 = PointSet::from_1d(&[0.0, 0.2]).unwrap();
        let f2 = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let cot = Matrix::from_vec(2, 1, vec![1.0, -1.0]);
        let nl2 = fixed_radius_neighbors(&pts2, &pts2, 0.5).unwrap();
        let g = ascc_backward(&cot, &f2, &pts2, &kernel, &nl2).unwrap();
        assert!(g.half_values.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn forward_f32_momentum_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10 {
            let n = rng.random_range(4..200);
            let d = 2;
            let mut coords = vec![0.0f32; n * d];
            for v in &mut coords {
                *v = rng.random_range(-0.5f32..0.5);
            }
            let c_in = 3;
            let mut feats = vec![0.0f32; n * c_in];
            for v in &mut feats {
                *v = rng.random_range(-1.0f32..1.0);
            }
            let k = 8;
            let mut half = vec![0.0f32; (k * k / 2) * c_in];
            for v in &mut half {
                *v = rng.random_range(-0.5f32..0.5);
            }
            let coords_f64: Vec<f64> = coords.iter().map(|&v| v as f64).collect();
            let pts = PointSet::new(Matrix::from_vec(n, d, coords_f64)).unwrap();
            let nl = fixed_radius_neighbors(&pts, &pts, 0.3).unwrap();
            let out = ascc_forward_f32(&coords, d, &feats, c_in, &half, k, 1, 0.3f32, &nl);
            let sum: f32 = out.iter().sum();
            let mass: f32 = out.iter().map(|v| v.abs()).sum();
            assert!(sum.abs() <= 1e-4 * mass.max(1e-20), "f32 sum {sum} mass {mass}");
        }
    }
}
