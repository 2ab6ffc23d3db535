//! Spatial primitives: fixed-radius neighbor search on a uniform grid,
//! voxel and farthest-point subsampling, window functions, the kernel-grid
//! coordinate mapping and gravity-direction normalization.
//!
//! Everything here is a pure function over immutable inputs.

use crate::error::{Error, Result};
use crate::mat::Matrix;
use std::collections::HashMap;

/// A set of points in 1, 2 or 3 dimensions (row = point).
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Matrix,
}

impl PointSet {
    pub fn new(coords: Matrix) -> Result<Self> {
        let d = coords.cols();
        if !(1..=3).contains(&d) {
            return Err(Error::input(format!("dimension must be 1..=3, got {d}")));
        }
        if !coords.all_finite() {
            return Err(Error::input("non-finite coordinate"));
        }
        Ok(PointSet { coords })
    }

    pub fn empty(dim: usize) -> Self {
        PointSet {
            coords: Matrix::zeros(0, dim),
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    /// Convenience constructor for 1D sets.
    pub fn from_1d(xs: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_vec(xs.len(), 1, xs.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.coords.row(i)
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    /// Componentwise minimum over all points; zero vector for empty sets.
    pub fn min_corner(&self) -> Vec<f64> {
        let d = self.dim();
        let mut min = vec![0.0; d];
        if self.is_empty() {
            return min;
        }
        min.copy_from_slice(self.point(0));
        for p in self.coords.iter_rows() {
            for (m, v) in min.iter_mut().zip(p) {
                *m = m.min(*v);
            }
        }
        min
    }
}

/// Per-query neighbor index lists into a data point set, CSR layout.
///
/// Lists are sorted ascending by data index. Every listed index is within
/// the (closed-ball) search radius of its query point.
#[derive(Clone, Debug)]
pub struct NeighborList {
    radius: f64,
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborList {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn query_count(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.indices[self.starts[query]..self.starts[query + 1]]
    }

    pub fn total_pairs(&self) -> usize {
        self.indices.len()
    }
}

fn cell_key(p: &[f64], cell: f64) -> [i64; 3] {
    let mut key = [0i64; 3];
    for (k, v) in key.iter_mut().zip(p) {
        *k = (v / cell).floor() as i64;
    }
    key
}

/// All data indices within Euclidean distance <= `radius` of each query
/// point (closed ball; a point is its own neighbor when the sets alias).
///
/// Uses a uniform grid of cell size `radius`, so the cost is linear in the
/// number of points plus the number of output pairs.
pub fn fixed_radius_neighbors(
    data: &PointSet,
    query: &PointSet,
    radius: f64,
) -> Result<NeighborList> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::input(format!("radius must be positive, got {radius}")));
    }
    if data.dim() != query.dim() {
        return Err(Error::input(format!(
            "dimension mismatch: data {}D vs query {}D",
            data.dim(),
            query.dim()
        )));
    }
    let d = data.dim();
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for i in 0..data.len() {
        grid.entry(cell_key(data.point(i), radius)).or_default().push(i);
    }

    let r2 = radius * radius;
    let mut starts = Vec::with_capacity(query.len() + 1);
    let mut indices = Vec::new();
    starts.push(0);
    let mut scratch: Vec<usize> = Vec::new();
    for q in 0..query.len() {
        scratch.clear();
        let p = query.point(q);
        let center = cell_key(p, radius);
        let span = |a: usize| -> std::ops::RangeInclusive<i64> {
            if a < d {
                center[a].saturating_sub(1)..=center[a].saturating_add(1)
            } else {
                0..=0
            }
        };
        for cx in span(0) {
            for cy in span(1) {
                for cz in span(2) {
                    if let Some(bucket) = grid.get(&[cx, cy, cz]) {
                        for &i in bucket {
                            let mut dist2 = 0.0;
                            for (a, b) in data.point(i).iter().zip(p) {
                                let diff = a - b;
                                dist2 += diff * diff;
                            }
                            if dist2 <= r2 {
                                scratch.push(i);
                            }
                        }
                    }
                }
            }
        }
        scratch.sort_unstable();
        indices.extend_from_slice(&scratch);
        starts.push(indices.len());
    }
    Ok(NeighborList {
        radius,
        starts,
        indices,
    })
}

/// Centers of the occupied cells of a regular grid anchored at the origin.
///
/// Cell index is `floor(coord / voxel_size)` per axis; output order is
/// lexicographic by cell index. Runs in linear time.
pub fn voxel_sample(points: &PointSet, voxel_size: f64) -> Result<PointSet> {
    voxel_sample_anchored(points, voxel_size, &vec![0.0; points.dim()])
}

/// `voxel_sample` with the grid anchored at `anchor` instead of the origin.
///
/// Anchoring at a corner of the point cloud makes the sampling translate
/// with the cloud, which the network relies on for translation invariance.
pub fn voxel_sample_anchored(
    points: &PointSet,
    voxel_size: f64,
    anchor: &[f64],
) -> Result<PointSet> {
    if voxel_size <= 0.0 || !voxel_size.is_finite() {
        return Err(Error::input(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if anchor.len() != points.dim() {
        return Err(Error::input("anchor dimension mismatch"));
    }
    let d = points.dim();
    let mut cells: Vec<[i64; 3]> = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let mut key = [0i64; 3];
        for a in 0..d {
            key[a] = ((points.point(i)[a] - anchor[a]) / voxel_size).floor() as i64;
        }
        cells.push(key);
    }
    cells.sort_unstable();
    cells.dedup();
    let mut out = Matrix::zeros(cells.len(), d);
    for (row, key) in cells.iter().enumerate() {
        for a in 0..d {
            out.set(row, a, anchor[a] + (key[a] as f64 + 0.5) * voxel_size);
        }
    }
    PointSet::new(out)
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Greedy max-min subset of `count` points, starting from `first` (an index
/// into `points`). Ties in the max-min distance go to the lowest index.
pub fn farthest_point_sample_from(
    points: &PointSet,
    count: usize,
    first: usize,
) -> Result<(PointSet, Vec<usize>)> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::input(format!(
            "sample count {count} out of range 1..={n}"
        )));
    }
    if first >= n {
        return Err(Error::input("start index out of range"));
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = first;
    chosen.push(current);
    for _ in 1..count {
        let mut best = 0;
        let mut best_dist = -1.0;
        for i in 0..n {
            let dist = squared_dist(points.point(i), points.point(current));
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
        chosen.push(current);
    }
    let subset = PointSet::new(points.coords().select_rows(&chosen))?;
    Ok((subset, chosen))
}

/// Farthest-point sampling with the first point drawn from `rng_seed`.
pub fn farthest_point_sample(
    points: &PointSet,
    count: usize,
    rng_seed: u64,
) -> Result<PointSet> {
    use rand::{Rng, SeedableRng};
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::input(format!(
            "sample count {count} out of range 1..={n}"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let first = rng.random_range(0..n);
    farthest_point_sample_from(points, count, first).map(|(p, _)| p)
}

/// poly6 window: `(1 - q^2)^3` for `q < 1`, else 0.
pub fn poly6_window(q: f64) -> Result<f64> {
    if q < 0.0 || !q.is_finite() {
        return Err(Error::input(format!("window argument must be >= 0, got {q}")));
    }
    Ok(poly6_window_raw(q))
}

/// peak window: `(1 - q)^3` for `q < 1`, else 0. Nonzero slope at q = 0.
pub fn peak_window(q: f64) -> Result<f64> {
    if q < 0.0 || !q.is_finite() {
        return Err(Error::input(format!("window argument must be >= 0, got {q}")));
    }
    Ok(peak_window_raw(q))
}

#[inline]
pub(crate) fn poly6_window_raw(q: f64) -> f64 {
    if q < 1.0 {
        let t = 1.0 - q * q;
        t * t * t
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn peak_window_raw(q: f64) -> f64 {
    if q < 1.0 {
        let t = 1.0 - q;
        t * t * t
    } else {
        0.0
    }
}

/// Derivative of the poly6 window w.r.t. q.
#[inline]
pub(crate) fn poly6_window_deriv(q: f64) -> f64 {
    if q < 1.0 {
        let t = 1.0 - q * q;
        -6.0 * q * t * t
    } else {
        0.0
    }
}

/// Derivative of the peak window w.r.t. q.
#[inline]
pub(crate) fn peak_window_deriv(q: f64) -> f64 {
    if q < 1.0 {
        let t = 1.0 - q;
        -3.0 * t * t
    } else {
        0.0
    }
}

/// Normalized offsets are snapped to this grid before scaling onto the
/// kernel so that negating an offset reflects its grid coordinate exactly
/// (bit for bit) around the kernel center. The snap is ~9e-13, far below
/// every tolerance that matters.
const COORD_SNAP: f64 = (1u64 << 40) as f64;

#[inline]
pub(crate) fn kernel_coord_axis(offset: f64, radius: f64, k: usize) -> f64 {
    let half = (k - 1) as f64 / 2.0;
    let s = (offset / radius).clamp(-1.0, 1.0);
    let snapped = (s * COORD_SNAP).round() / COORD_SNAP;
    half + snapped * half
}

/// Map a relative offset into continuous kernel-grid coordinates.
///
/// `c_a = ((offset_a / radius) + 1) / 2 * (K - 1)`, clamped to `[0, K-1]`.
/// The mapping commutes exactly with point reflection:
/// `kernel_coords(-v) == (K-1) - kernel_coords(v)` holds bitwise.
pub fn kernel_coords(offset: &[f64], radius: f64, k: usize) -> Vec<f64> {
    assert!(k >= 2, "kernel size must be at least 2");
    assert!(radius > 0.0, "kernel radius must be positive");
    offset
        .iter()
        .map(|&v| kernel_coord_axis(v, radius, k))
        .collect()
}

/// A d-dimensional rotation (orthogonal, det +1 apart from the 1D sign flip).
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    dim: usize,
    /// Row-major d*d matrix.
    m: Vec<f64>,
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Rotation { dim, m }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        *self == Rotation::identity(self.dim)
    }

    pub fn inverse(&self) -> Rotation {
        let mut m = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                m[j * self.dim + i] = self.m[i * self.dim + j];
            }
        }
        Rotation { dim: self.dim, m }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..self.dim {
                acc += self.m[i * self.dim + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Rotate every row of a matrix.
    pub fn apply_rows(&self, rows: &Matrix) -> Matrix {
        assert_eq!(rows.cols(), self.dim);
        let mut out = Matrix::zeros(rows.rows(), self.dim);
        for i in 0..rows.rows() {
            let r = self.apply(rows.row(i));
            out.row_mut(i).copy_from_slice(&r);
        }
        out
    }
}

const GRAVITY_EPS: f64 = 1e-12;

/// Rotation taking `gravity` onto the canonical down axis: -y in 2D/3D,
/// -x in 1D. Identity when the gravity magnitude is below 1e-12.
pub fn gravity_rotation(gravity: &[f64]) -> Rotation {
    let d = gravity.len();
    assert!((1..=3).contains(&d), "gravity must be 1-3 dimensional");
    let norm = gravity.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < GRAVITY_EPS {
        return Rotation::identity(d);
    }
    let g: Vec<f64> = gravity.iter().map(|v| v / norm).collect();
    match d {
        1 => {
            // Sign flip when gravity points in +x.
            if g[0] > 0.0 {
                Rotation { dim: 1, m: vec![-1.0] }
            } else {
                Rotation::identity(1)
            }
        }
        2 => {
            // Columns of R^T are the images of the basis under R^{-1}:
            // R maps g to (0,-1) and the left-normal of g to (1,0).
            let (gx, gy) = (g[0], g[1]);
            Rotation {
                dim: 2,
                m: vec![-gy, gx, -gx, -gy],
            }
        }
        3 => {
            let down = [0.0, -1.0, 0.0];
            let dot = g[0] * down[0] + g[1] * down[1] + g[2] * down[2];
            if dot > 1.0 - 1e-15 {
                return Rotation::identity(3);
            }
            if dot < -1.0 + 1e-15 {
                // Antiparallel: rotate half a turn about the x axis.
                return Rotation {
                    dim: 3,
                    m: vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0],
                };
            }
            // Rodrigues rotation about axis = g x down.
            let axis = [
                g[1] * down[2] - g[2] * down[1],
                g[2] * down[0] - g[0] * down[2],
                g[0] * down[1] - g[1] * down[0],
            ];
            let s = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
            let u = [axis[0] / s, axis[1] / s, axis[2] / s];
            let c = dot;
            let t = 1.0 - c;
            let m = vec![
                c + u[0] * u[0] * t,
                u[0] * u[1] * t - u[2] * s,
                u[0] * u[2] * t + u[1] * s,
                u[1] * u[0] * t + u[2] * s,
                c + u[1] * u[1] * t,
                u[1] * u[2] * t - u[0] * s,
                u[2] * u[0] * t - u[1] * s,
                u[2] * u[1] * t + u[0] * s,
                c + u[2] * u[2] * t,
            ];
            Rotation { dim: 3, m }
        }
        _ => unreachable!(),
    }
}

/// Rotate a stack of vectors into the gravity-canonical frame, returning
/// the rotated vectors and the rotation (whose inverse denormalizes).
pub fn gravity_normalize(vectors: &Matrix, gravity: &[f64]) -> (Matrix, Rotation) {
    let rot = gravity_rotation(gravity);
    (rot.apply_rows(vectors), rot)
}
