//! File formats: binary particle-trajectory files, model checkpoints, CSV
//! logs and metric reports.
//!
//! Trajectory file layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "DMCF"
//! version u32      1
//! dim     u32
//! dt      f32
//! radius  f32      particle radius
//! gravity dim*f32
//! frames  u64      frame count
//! count   u64      particle count
//! types   count*u8 0 = fluid, 1 = boundary
//! per frame: positions count*dim*f32, velocities count*dim*f32
//! normals count*dim*f32
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! magic   4 bytes  "DMCF"
//! version u32      1
//! config block:
//!   dim u32, branches u32, kernel_size u32, ascc_kernel_size u32,
//!   preprocess_channels u32, l4_channels u32,
//!   head u8 (0 antisymmetric, 1 plain), sampler u8 (0 voxel, 1 fps),
//!   gravity_normalization u8, boundary_all_layers u8,
//!   particle_radius f64, kernel_scale f64, fps_seed u64,
//!   scales: u32 count + count*f64,
//!   l1/l2/l3 channels: u32 count + count*u32 each
//! tensors: u32 count, then per tensor
//!   name: u32 length + bytes
//!   shape: u32 rank + rank*u64
//!   values: f32 little-endian
//! ```
//!
//! Values are stored in f32; the uniform random initialization draws
//! f32-representable values, so a freshly initialized model round-trips
//! bit-exactly.

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::metrics::MetricsReport;
use crate::network::{ArchitectureConfig, HeadKind, ModelParams, SamplerKind};
use crate::simulator::ParticleType;
use crate::sph::{Frame, Scene};
use crate::training::TrainingLog;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DMCF";
pub const FRAME_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn matrix_f32(&mut self, m: &Matrix) -> Result<()> {
        for v in m.data() {
            self.f32(*v as f32)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn matrix_f32(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f32()? as f64);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
    fn expect_magic(&mut self) -> Result<()> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        if &b != MAGIC {
            return Err(Error::format("bad magic; not a trajectory/checkpoint file"));
        }
        Ok(())
    }
}

/// Serialize a scene to the trajectory format.
pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    let d = scene.dim();
    let n = scene.particle_count();
    w.inner.write_all(MAGIC)?;
    w.u32(FRAME_FORMAT_VERSION)?;
    w.u32(d as u32)?;
    w.f32(scene.dt as f32)?;
    w.f32(scene.particle_radius as f32)?;
    for g in &scene.gravity {
        w.f32(*g as f32)?;
    }
    w.u64(scene.frames.len() as u64)?;
    w.u64(n as u64)?;
    for t in &scene.types {
        w.u8(match t {
            ParticleType::Fluid => 0,
            ParticleType::Boundary => 1,
        })?;
    }
    for f in &scene.frames {
        w.matrix_f32(&f.positions)?;
        w.matrix_f32(&f.velocities)?;
    }
    w.matrix_f32(&scene.normals)?;
    w.inner.flush()?;
    Ok(())
}

/// Read a scene from the trajectory format.
pub fn read_scene(path: &Path) -> Result<Scene> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    r.expect_magic()?;
    let version = r.u32()?;
    if version != FRAME_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported trajectory format version {version} (expected {FRAME_FORMAT_VERSION})"
        )));
    }
    let d = r.u32()? as usize;
    if !(1..=3).contains(&d) {
        return Err(Error::format(format!("invalid dimension {d}")));
    }
    let dt = r.f32()? as f64;
    let radius = r.f32()? as f64;
    let mut gravity = Vec::with_capacity(d);
    for _ in 0..d {
        gravity.push(r.f32()? as f64);
    }
    let frames = r.u64()? as usize;
    let n = r.u64()? as usize;
    let mut types = Vec::with_capacity(n);
    for _ in 0..n {
        types.push(match r.u8()? {
            0 => ParticleType::Fluid,
            1 => ParticleType::Boundary,
            other => return Err(Error::format(format!("unknown particle type {other}"))),
        });
    }
    let mut frame_vec = Vec::with_capacity(frames);
    for _ in 0..frames {
        let positions = r.matrix_f32(n, d)?;
        let velocities = r.matrix_f32(n, d)?;
        frame_vec.push(Frame {
            positions,
            velocities,
        });
    }
    let normals = r.matrix_f32(n, d)?;
    // Masses are not stored; particles carry unit mass.
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    Ok(Scene {
        name,
        dt,
        gravity,
        particle_radius: radius,
        types,
        normals,
        masses: vec![1.0; n],
        frames: frame_vec,
        flagged_frames: Vec::new(),
    })
}

fn head_tag(cfg: &ArchitectureConfig) -> u8 {
    match cfg.head {
        HeadKind::Ascc => 0,
        HeadKind::CConv => 1,
    }
}

fn sampler_tag(cfg: &ArchitectureConfig) -> u8 {
    match cfg.sampler {
        SamplerKind::Voxel => 0,
        SamplerKind::Fps => 1,
    }
}

/// Serialize model parameters together with their architecture.
pub fn write_checkpoint(path: &Path, params: &ModelParams, cfg: &ArchitectureConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    w.inner.write_all(MAGIC)?;
    w.u32(CHECKPOINT_FORMAT_VERSION)?;
    w.u32(cfg.dim as u32)?;
    w.u32(cfg.branches as u32)?;
    w.u32(cfg.kernel_size as u32)?;
    w.u32(cfg.ascc_kernel_size as u32)?;
    w.u32(cfg.preprocess_channels as u32)?;
    w.u32(cfg.l4_channels as u32)?;
    w.u8(head_tag(cfg))?;
    w.u8(sampler_tag(cfg))?;
    w.u8(cfg.gravity_normalization as u8)?;
    w.u8(cfg.boundary_all_layers as u8)?;
    w.f64(cfg.particle_radius)?;
    w.f64(cfg.kernel_scale)?;
    w.u64(cfg.fps_seed)?;
    w.u32(cfg.scales.len() as u32)?;
    for s in &cfg.scales {
        w.f64(*s)?;
    }
    for list in [&cfg.l1_channels, &cfg.l2_channels, &cfg.l3_channels] {
        w.u32(list.len() as u32)?;
        for c in list {
            w.u32(*c as u32)?;
        }
    }

    let mut tensors: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    collect_tensors(params, cfg, &mut tensors);
    w.u32(tensors.len() as u32)?;
    for (name, shape, values) in &tensors {
        w.u32(name.len() as u32)?;
        w.inner.write_all(name.as_bytes())?;
        w.u32(shape.len() as u32)?;
        for s in shape {
            w.u64(*s)?;
        }
        for v in values {
            w.f32(*v as f32)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

/// Tensors with their shapes: kernels are [cells, c_in, c_out], biases
/// [c_out], the antisymmetric half [half_cells, c_in, c_out]. Name order
/// matches `ModelParams::for_each_tensor`.
fn collect_tensors(
    params: &ModelParams,
    _cfg: &ArchitectureConfig,
    out: &mut Vec<(String, Vec<u64>, Vec<f64>)>,
) {
    let mut shapes: std::collections::HashMap<String, Vec<u64>> = std::collections::HashMap::new();
    let mut kernel = |name: String, kg: &crate::layers::KernelGrid| {
        shapes.insert(
            format!("{name}.kernel"),
            vec![kg.cells() as u64, kg.c_in as u64, kg.c_out as u64],
        );
        shapes.insert(format!("{name}.bias"), vec![kg.c_out as u64]);
    };
    kernel("pre_fluid".into(), &params.pre_fluid);
    kernel("pre_boundary".into(), &params.pre_boundary);
    for (j, kg) in params.l1.iter().enumerate() {
        kernel(format!("l1.{j}"), kg);
    }
    for (j, row) in params.l2.iter().enumerate() {
        for (k, kg) in row.iter().enumerate() {
            kernel(format!("l2.{j}.{k}"), kg);
        }
    }
    for (j, row) in params.l3.iter().enumerate() {
        for (k, kg) in row.iter().enumerate() {
            kernel(format!("l3.{j}.{k}"), kg);
        }
    }
    for (k, kg) in params.l4.iter().enumerate() {
        kernel(format!("l4.{k}"), kg);
    }
    match &params.head {
        crate::network::HeadParams::Ascc(a) => {
            shapes.insert(
                "head.half".into(),
                vec![a.half_cells() as u64, a.c_in as u64, a.c_out as u64],
            );
        }
        crate::network::HeadParams::CConv(kg) => kernel("head".into(), kg),
    }
    params.for_each_tensor(|name, t| {
        let shape = shapes
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![t.len() as u64]);
        out.push((name.to_string(), shape, t.to_vec()));
    });
}

/// Load a checkpoint: architecture plus parameters, shape-checked.
pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, ArchitectureConfig)> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    r.expect_magic()?;
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let dim = r.u32()? as usize;
    let branches = r.u32()? as usize;
    let kernel_size = r.u32()? as usize;
    let ascc_kernel_size = r.u32()? as usize;
    let preprocess_channels = r.u32()? as usize;
    let l4_channels = r.u32()? as usize;
    let head = match r.u8()? {
        0 => HeadKind::Ascc,
        1 => HeadKind::CConv,
        other => return Err(Error::format(format!("unknown head tag {other}"))),
    };
    let sampler = match r.u8()? {
        0 => SamplerKind::Voxel,
        1 => SamplerKind::Fps,
        other => return Err(Error::format(format!("unknown sampler tag {other}"))),
    };
    let gravity_normalization = r.u8()? != 0;
    let boundary_all_layers = r.u8()? != 0;
    let particle_radius = r.f64()?;
    let kernel_scale = r.f64()?;
    let fps_seed = r.u64()?;
    let n_scales = r.u32()? as usize;
    let mut scales = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        scales.push(r.f64()?);
    }
    let mut lists = Vec::new();
    for _ in 0..3 {
        let n = r.u32()? as usize;
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            list.push(r.u32()? as usize);
        }
        lists.push(list);
    }
    let cfg = ArchitectureConfig {
        dim,
        particle_radius,
        branches,
        scales,
        preprocess_channels,
        l1_channels: lists[0].clone(),
        l2_channels: lists[1].clone(),
        l3_channels: lists[2].clone(),
        l4_channels,
        kernel_size,
        ascc_kernel_size,
        head,
        sampler,
        gravity_normalization,
        boundary_all_layers,
        kernel_scale,
        fps_seed,
    };
    cfg.validate()?;
    let mut params = ModelParams::new(&cfg)?;

    let n_tensors = r.u32()? as usize;
    let mut loaded: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::format("tensor name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.inner.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("bad tensor name"))?;
        let rank = r.u32()? as usize;
        let mut len = 1u64;
        for _ in 0..rank {
            len = len.saturating_mul(r.u64()?);
        }
        let mut values = Vec::with_capacity(len as usize);
        for _ in 0..len {
            values.push(r.f32()? as f64);
        }
        loaded.insert(name, values);
    }

    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, t| match loaded.remove(name) {
        Some(values) if values.len() == t.len() => t.copy_from_slice(&values),
        Some(values) => missing.push(format!(
            "{name}: length {} does not match expected {}",
            values.len(),
            t.len()
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "checkpoint tensors do not match architecture: {}",
            missing.join("; ")
        )));
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(Error::format(format!(
            "checkpoint has unexpected tensors: {}",
            extra.join(", ")
        )));
    }
    Ok((params, cfg))
}

/// Write the training log as CSV.
pub fn write_training_log(path: &Path, log: &TrainingLog) -> Result<()> {
    let mut out = String::from("iteration,lr,rollout_frames,warmup_wmax,loss,wall_seconds\n");
    for row in &log.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iteration, row.lr, row.rollout_frames, row.warmup_wmax, row.loss, row.wall_seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write per-frame metric rows as CSV.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out =
        String::from("frame,rmse,emd,emd_total,jsd,max_density_err,momentum_change\n");
    for f in &report.frames {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            f.frame, f.rmse, f.emd, f.emd_total, f.jsd, f.max_density_err, f.momentum_change
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the metric summary as a small JSON document.
pub fn write_metrics_summary(path: &Path, report: &MetricsReport) -> Result<()> {
    let out = format!(
        "{{\n  \"rmse\": {},\n  \"emd\": {},\n  \"emd_total\": {},\n  \"jsd\": {},\n  \"max_density_err\": {},\n  \"momentum_change\": {},\n  \"frames\": {}\n}}\n",
        report.rmse,
        report.emd,
        report.emd_total,
        report.jsd,
        report.max_density_err,
        report.momentum_change,
        report.frames.len()
    );
    std::fs::write(path, out)?;
    Ok(())
}
