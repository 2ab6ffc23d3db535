use mcfluid_core::config::RunConfig;
use mcfluid_core::error::{Error, Result};
use mcfluid_core::geometry::{fixed_radius_neighbors, PointSet};
use mcfluid_core::layers::{
    ascc_backward, ascc_forward, cconv_backward, cconv_forward, interp_grid,
    AntisymmetricKernel, KernelGrid, Window,
};
use mcfluid_core::mat::Matrix;
use mcfluid_core::metrics::{emd_with_cap, evaluate_rollout, EvalOptions};
use mcfluid_core::network::init_params;
use mcfluid_core::simulator::{step, ParticleType, SimulationConfig};
use mcfluid_core::sph::{
    gen_column_dataset, gen_drops2d_dataset, gen_freefall_dataset, Frame, Scene, SceneKind,
    TrajectoryDataset,
};
use mcfluid_core::{io, training};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let solver = cfg.solver_config();
    let spec = cfg.scene_spec();
    let dataset = match spec.kind {
        SceneKind::Column => {
            gen_column_dataset(spec.min_count, spec.max_count, spec.frames, &solver)?
        }
        SceneKind::FreeFall => gen_freefall_dataset(
            spec.min_count,
            spec.max_count,
            spec.height,
            spec.frames,
            &solver,
        )?,
        SceneKind::Drops2d => gen_drops2d_dataset(&spec, &solver)?,
    };
    std::fs::create_dir_all(out)?;
    let mut manifest = format!("# scenes generated with seed {}\n", cfg.seed);
    for scene in &dataset.scenes {
        let file = format!("{}.traj", scene.name);
        io::write_scene(&out.join(&file), scene)?;
        manifest.push_str(&format!(
            "{file} particles={} fluid={} frames={} flagged={}\n",
            scene.particle_count(),
            scene.fluid_count(),
            scene.frames.len(),
            scene.flagged_frames.len(),
        ));
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {} scenes to {}", dataset.scenes.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "traj").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::input(format!(
            "no .traj files found in {}",
            dir.display()
        )));
    }
    let mut scenes = Vec::with_capacity(files.len());
    for f in files {
        scenes.push(io::read_scene(&f)?);
    }
    Ok(TrajectoryDataset { scenes })
}

pub fn train(config: &Path, data: &Path, out: &Path, threads: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dataset = load_dataset(data)?;
    let first = &dataset.scenes[0];
    let arch = cfg.arch_for_dim(first.dim(), first.particle_radius)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.threads = threads;
    std::fs::create_dir_all(out)?;

    let arch_for_ckpt = arch.clone();
    let out_dir = out.to_path_buf();
    let (params, log) = training::train(&dataset, &arch, &train_cfg, move |iter, p| {
        let path = out_dir.join(format!("checkpoint_{iter:07}.ckpt"));
        if let Err(e) = io::write_checkpoint(&path, p, &arch_for_ckpt) {
            eprintln!("warning: failed to write checkpoint at {iter}: {e}");
        }
    })?;
    io::write_checkpoint(&out.join("model.ckpt"), &params, &arch)?;
    io::write_training_log(&out.join("training_log.csv"), &log)?;
    if !log.skipped_iterations.is_empty() {
        eprintln!(
            "warning: {} iteration(s) skipped after divergence",
            log.skipped_iterations.len()
        );
    }
    println!(
        "trained {} iterations ({} variant), final checkpoint {}",
        train_cfg.iterations,
        cfg.variant.name(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Deterministic decimation: keep fluid index j when the rounded running
/// count increases, i.e. `floor((j+1) * ratio) > floor(j * ratio)`.
/// Boundary particles are always kept.
fn subsample_rows(types: &[ParticleType], ratio: f64) -> Vec<usize> {
    let mut keep = Vec::new();
    let mut fluid_seen = 0usize;
    for (i, t) in types.iter().enumerate() {
        match t {
            ParticleType::Boundary => keep.push(i),
            ParticleType::Fluid => {
                let j = fluid_seen as f64;
                if ((j + 1.0) * ratio).floor() > (j * ratio).floor() {
                    keep.push(i);
                }
                fluid_seen += 1;
            }
        }
    }
    keep
}

fn subsampled_scene(scene: &Scene, ratio: f64) -> Scene {
    if ratio >= 1.0 {
        return scene.clone();
    }
    let keep = subsample_rows(&scene.types, ratio);
    Scene {
        name: scene.name.clone(),
        dt: scene.dt,
        gravity: scene.gravity.clone(),
        particle_radius: scene.particle_radius,
        types: keep.iter().map(|&i| scene.types[i]).collect(),
        normals: scene.normals.select_rows(&keep),
        masses: keep.iter().map(|&i| scene.masses[i]).collect(),
        frames: scene
            .frames
            .iter()
            .map(|f| Frame {
                positions: f.positions.select_rows(&keep),
                velocities: f.velocities.select_rows(&keep),
            })
            .collect(),
        flagged_frames: scene.flagged_frames.clone(),
    }
}

pub fn simulate(
    checkpoint: &Path,
    frame: &Path,
    frame_index: usize,
    steps: usize,
    out: &Path,
    sampling_ratio: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&sampling_ratio) || sampling_ratio == 0.0 {
        return Err(Error::input("sampling ratio must be in (0, 1]"));
    }
    let (params, mut arch) = io::read_checkpoint(checkpoint)?;
    let scene = io::read_scene(frame)?;
    if frame_index >= scene.frames.len() {
        return Err(Error::input(format!(
            "frame index {frame_index} out of range (file has {})",
            scene.frames.len()
        )));
    }
    if scene.dim() != arch.dim {
        return Err(Error::input(format!(
            "trajectory is {}D but the checkpoint expects {}D",
            scene.dim(),
            arch.dim
        )));
    }
    let scene = subsampled_scene(&scene, sampling_ratio);
    if sampling_ratio < 1.0 {
        // Fewer neighbors scale the convolution sums down; compensate by
        // multiplying the kernels with the subsampling factor.
        arch.kernel_scale *= 1.0 / sampling_ratio;
    }

    let sim = SimulationConfig::new(scene.dt, scene.gravity.clone(), scene.particle_radius)?;
    let mut state = scene.state_at(frame_index);
    let mut out_scene = Scene {
        name: "rollout".into(),
        dt: scene.dt,
        gravity: scene.gravity.clone(),
        particle_radius: scene.particle_radius,
        types: scene.types.clone(),
        normals: scene.normals.clone(),
        masses: scene.masses.clone(),
        frames: vec![Frame {
            positions: state.positions.clone(),
            velocities: state.velocities.clone(),
        }],
        flagged_frames: Vec::new(),
    };
    let mut diverged = None;
    for s in 1..=steps {
        match step(&state, &params, &arch, &sim) {
            Ok(next) if next.all_finite() => {
                out_scene.frames.push(Frame {
                    positions: next.positions.clone(),
                    velocities: next.velocities.clone(),
                });
                state = next;
            }
            _ => {
                diverged = Some(s);
                break;
            }
        }
    }
    io::write_scene(out, &out_scene)?;
    match diverged {
        Some(at) => {
            eprintln!(
                "divergence at step {at}; wrote {} frames to {}",
                out_scene.frames.len(),
                out.display()
            );
            Err(Error::Diverged { step: at })
        }
        None => {
            println!(
                "wrote {} frames to {}",
                out_scene.frames.len(),
                out.display()
            );
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    pred: &Path,
    target: &Path,
    out: &Path,
    noise_ratio: f64,
    sampling_ratio: f64,
    bins: usize,
    seed: u64,
) -> Result<()> {
    let mut pred_scene = io::read_scene(pred)?;
    let mut target_scene = io::read_scene(target)?;
    if sampling_ratio < 1.0 {
        target_scene = subsampled_scene(&target_scene, sampling_ratio);
    }
    let frames = pred_scene.frames.len().min(target_scene.frames.len());
    pred_scene.frames.truncate(frames);
    target_scene.frames.truncate(frames);

    if noise_ratio > 0.0 {
        let std = noise_ratio * pred_scene.particle_radius;
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in &mut pred_scene.frames {
            for i in 0..f.positions.rows() {
                if pred_scene.types[i] != ParticleType::Fluid {
                    continue;
                }
                for a in 0..pred_scene.gravity.len() {
                    let v = f.positions.get(i, a) + normal.sample(&mut rng);
                    f.positions.set(i, a, v);
                }
            }
        }
    }

    let opts = EvalOptions {
        bins,
        ..EvalOptions::default()
    };
    let report = evaluate_rollout(&pred_scene, &target_scene, &opts)?;
    std::fs::create_dir_all(out)?;
    io::write_metrics_csv(&out.join("metrics.csv"), &report)?;
    io::write_metrics_summary(&out.join("summary.json"), &report)?;
    println!(
        "rmse={:.6e} emd={:.6e} jsd={:.6e} max_density_err={:.6e} momentum_change={:.6e}",
        report.rmse, report.emd, report.jsd, report.max_density_err, report.momentum_change
    );
    Ok(())
}

fn check_fail(name: &str, detail: String) -> Error {
    Error::Invariant(format!("{name}: {detail}"))
}

/// Fast invariant suite. Each check prints one line; any failure aborts
/// with an invariant error (exit code 3).
pub fn check(corrupt_mirror: bool) -> Result<()> {
    let t0 = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);

    // Momentum conservation of the antisymmetric convolution. The cloud
    // extent tracks the particle count so neighborhoods stay populated.
    for trial in 0..200 {
        let d = 1 + (trial % 2);
        let n = rng.random_range(2..256);
        let radius = 0.3;
        let span = radius * (n as f64 / 6.0).powf(1.0 / d as f64).max(0.25);
        let mut coords = Matrix::zeros(n, d);
        for v in coords.data_mut() {
            *v = rng.random_range(-span..span);
        }
        let pts = PointSet::new(coords).map_err(|e| check_fail("momentum", e.to_string()))?;
        let c_in = rng.random_range(1..4);
        let mut kern = AntisymmetricKernel::new(d, 8, c_in, 1, 0.3)
            .map_err(|e| check_fail("momentum", e.to_string()))?;
        for v in &mut kern.half_values {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut feats = Matrix::zeros(n, c_in);
        for v in feats.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let nl = fixed_radius_neighbors(&pts, &pts, 0.3)
            .map_err(|e| check_fail("momentum", e.to_string()))?;
        let out = ascc_forward(&feats, &pts, &kern, &nl)
            .map_err(|e| check_fail("momentum", e.to_string()))?;
        let sum = out.column_sums()[0];
        let mass = out.column_abs_sums()[0];
        if sum.abs() > 1e-9 * mass.max(1e-30) {
            return Err(check_fail(
                "momentum",
                format!("trial {trial}: |sum|={} vs mass {mass}", sum.abs()),
            ));
        }
    }
    println!("check momentum-conservation: ok (200 random instances)");

    // Kernel antisymmetry under interpolation (with the optional
    // corruption hook that must make this check fail).
    let mut kern = AntisymmetricKernel::new(2, 8, 1, 1, 0.25)
        .map_err(|e| check_fail("antisymmetry", e.to_string()))?;
    for v in &mut kern.half_values {
        *v = rng.random_range(-0.5..0.5);
    }
    let mut grid = kern.materialize();
    if corrupt_mirror {
        // Flip the sign of one mirrored cell: the construction invariant
        // g[idx] == -g[mirror(idx)] is now violated.
        let last = grid.len() - 1;
        grid[last] = -grid[last];
    }
    for probe in 0..2000 {
        let v = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
        let neg = [-v[0], -v[1]];
        let a = interp_grid(&grid, 2, 8, 1, &v, 0.25)[0];
        let b = interp_grid(&grid, 2, 8, 1, &neg, 0.25)[0];
        if (a + b).abs() > 1e-12 {
            return Err(check_fail(
                "antisymmetry",
                format!("probe {probe}: G(v)+G(-v) = {}", a + b),
            ));
        }
    }
    println!("check kernel-antisymmetry: ok (2000 probes)");

    // Gradient spot checks against central finite differences.
    {
        let n = 6;
        let d = 2;
        let mut coords = Matrix::zeros(n, d);
        for v in coords.data_mut() {
            *v = rng.random_range(-0.15..0.15);
        }
        let pts = PointSet::new(coords).unwrap();
        let mut kernel = KernelGrid::new(d, 4, 2, 2, 0.4, Window::Poly6).unwrap();
        for v in &mut kernel.values {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut feats = Matrix::zeros(n, 2);
        for v in feats.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut cot = Matrix::zeros(n, 2);
        for v in cot.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let nl = fixed_radius_neighbors(&pts, &pts, 0.4).unwrap();
        let grads = cconv_backward(&cot, &feats, &pts, &pts, &kernel, &nl).unwrap();
        let loss = |f: &Matrix| {
            let out = cconv_forward(f, &pts, &pts, &kernel, &nl).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..n {
            for c in 0..2 {
                let mut fp = feats.clone();
                fp.set(i, c, feats.get(i, c) + h);
                let mut fm = feats.clone();
                fm.set(i, c, feats.get(i, c) - h);
                let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
                let got = grads.f.get(i, c);
                let denom = fd.abs().max(got.abs()).max(1e-9);
                if (fd - got).abs() / denom > 1e-4 {
                    return Err(check_fail(
                        "gradients",
                        format!("cconv feature grad [{i},{c}]: fd={fd} analytic={got}"),
                    ));
                }
            }
        }
        let mut akern = AntisymmetricKernel::new(d, 4, 2, 1, 0.4).unwrap();
        for v in &mut akern.half_values {
            *v = rng.random_range(-0.5..0.5);
        }
        let cot1 = Matrix::from_vec(n, 1, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect());
        let agrads = ascc_backward(&cot1, &feats, &pts, &akern, &nl).unwrap();
        let aloss = |kern: &AntisymmetricKernel| {
            let out = ascc_forward(&feats, &pts, kern, &nl).unwrap();
            out.data().iter().zip(cot1.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for idx in 0..akern.half_values.len() {
            let mut kp = akern.clone();
            kp.half_values[idx] += h;
            let mut km = akern.clone();
            km.half_values[idx] -= h;
            let fd = (aloss(&kp) - aloss(&km)) / (2.0 * h);
            let got = agrads.half_values[idx];
            let denom = fd.abs().max(got.abs()).max(1e-9);
            if (fd - got).abs() / denom > 1e-4 {
                return Err(check_fail(
                    "gradients",
                    format!("half-kernel grad [{idx}]: fd={fd} analytic={got}"),
                ));
            }
        }
    }
    println!("check gradients: ok (convolution and antisymmetric kernels)");

    // Exact-assignment oracle on tiny instances.
    for trial in 0..50 {
        let n = 1 + (trial % 5);
        let mut p = Matrix::zeros(n, 2);
        let mut t = Matrix::zeros(n, 2);
        for m in [&mut p, &mut t] {
            for v in m.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let (got, _) = emd_with_cap(&p, &t, 512).unwrap();
        // Brute force over all permutations.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        loop {
            let mut acc = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                for (a, b) in p.row(i).iter().zip(t.row(j)) {
                    acc += (a - b) * (a - b);
                }
            }
            best = best.min(acc);
            if !next_permutation(&mut perm) {
                break;
            }
        }
        let brute = best / n as f64;
        if (got - brute).abs() > 1e-9 * brute.max(1.0) {
            return Err(check_fail(
                "assignment",
                format!("n={n}: exact={got} brute={brute}"),
            ));
        }
    }
    println!("check assignment-oracle: ok (50 instances, n <= 5)");

    // Exercise one init round trip so a broken initializer cannot hide.
    let arch = mcfluid_core::network::ArchitectureConfig::default_1d(0.02);
    let params = init_params(&arch, 1);
    let mut in_range = true;
    params.for_each_tensor(|_, t| in_range &= t.iter().all(|v| (-0.05..=0.05).contains(v)));
    if !in_range {
        return Err(check_fail("init", "weights out of range".into()));
    }
    println!("check initializer: ok");

    let elapsed = t0.elapsed().as_secs_f64();
    println!("all checks passed in {elapsed:.2}s");
    if elapsed > 60.0 {
        eprintln!("warning: check exceeded the 60s budget ({elapsed:.1}s)");
    }
    Ok(())
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
