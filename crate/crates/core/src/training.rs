//! Training: neighbor-weighted position loss, schedules, input noise,
//! gradient-free warmup stepping, Adam, and the full loop with
//! backpropagation through unrolled rollouts (including the position-based
//! velocity update, which couples consecutive steps through 1/dt).

use crate::error::{Error, Result};
use crate::geometry::{fixed_radius_neighbors, PointSet};
use crate::mat::Matrix;
use crate::network::{
    forward_cached, network_backward, ArchitectureConfig, ModelParams,
};
use crate::simulator::{euler_predict, step, ParticleState, SimulationConfig};
use crate::sph::{sph_density, Scene, TrajectoryDataset};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Full-budget reference iteration count; schedules scale with
/// `iterations / 50000`.
pub const REFERENCE_ITERATIONS: usize = 50_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Standard deviation of the position noise (0.1 data particle radii).
    pub noise_std: f64,
    pub warmup_enabled: bool,
    /// Density-error threshold that stops warmup stepping early.
    pub warmup_threshold: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Emit a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Worker threads for batch members. Results are merged in member
    /// order, so any thread count produces bit-identical training runs.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: REFERENCE_ITERATIONS,
            batch_size: 2,
            lr0: 0.001,
            noise_std: 0.1 * 0.005,
            warmup_enabled: true,
            warmup_threshold: 0.05,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 && self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.lr0 <= 0.0 || !self.lr0.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise std must be >= 0"));
        }
        Ok(())
    }

    /// Desk-scale factor: schedule breakpoints and warmup depth shrink
    /// proportionally when the budget is below the reference 50k.
    pub fn schedule_scale(&self) -> f64 {
        self.iterations as f64 / REFERENCE_ITERATIONS as f64
    }

    /// Learning rate at an iteration: halved every (scaled) 5k iterations
    /// starting at the (scaled) 20k mark.
    pub fn lr_schedule(&self, iter: usize) -> f64 {
        let s = self.schedule_scale();
        let start = 20_000.0 * s;
        let interval = 5_000.0 * s;
        let it = iter as f64;
        if it < start {
            self.lr0
        } else {
            let halvings = ((it - start) / interval).floor() + 1.0;
            self.lr0 * 0.5f64.powf(halvings)
        }
    }

    /// Rollout length: 3 frames, raised to 5 at the (scaled) 15k mark.
    pub fn rollout_frames(&self, iter: usize) -> usize {
        let s = self.schedule_scale();
        if (iter as f64) < 15_000.0 * s {
            3
        } else {
            5
        }
    }

    /// Warmup depth cap: enabled at the (scaled) 10k mark with 5, doubled
    /// at the (scaled) 20k and 30k marks. Zero while disabled.
    pub fn warmup_wmax(&self, iter: usize) -> f64 {
        if !self.warmup_enabled {
            return 0.0;
        }
        let s = self.schedule_scale();
        let it = iter as f64;
        // Below the reference budget W_max shrinks proportionally; above
        // it the reference values apply unchanged.
        let depth_scale = s.min(1.0);
        if it < 10_000.0 * s {
            0.0
        } else if it < 20_000.0 * s {
            5.0 * depth_scale
        } else if it < 30_000.0 * s {
            10.0 * depth_scale
        } else {
            20.0 * depth_scale
        }
    }
}

/// Neighbor-count-weighted mean absolute position error:
/// `(1/N) sum_i exp(-c_i / c_avg) |x_i - y_i|_1` with `c_i` the neighbor
/// count of predicted particle `i` (self excluded) at the given radius.
pub fn loss_frame(pred: &Matrix, target: &Matrix, radius: f64) -> Result<f64> {
    loss_frame_grad(pred, target, radius).map(|(l, _)| l)
}

/// [`loss_frame`] together with its gradient w.r.t. the predicted
/// positions (neighbor counts treated as locally constant).
pub fn loss_frame_grad(pred: &Matrix, target: &Matrix, radius: f64) -> Result<(f64, Matrix)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::input(format!(
            "position shape mismatch: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    if radius <= 0.0 {
        return Err(Error::input("loss radius must be positive"));
    }
    let n = pred.rows();
    let mut grad = Matrix::zeros(n, pred.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let pts = PointSet::new(pred.clone())?;
    let nl = fixed_radius_neighbors(&pts, &pts, radius)?;
    let counts: Vec<f64> = (0..n)
        .map(|i| (nl.neighbors(i).len().saturating_sub(1)) as f64)
        .collect();
    let c_avg = counts.iter().sum::<f64>() / n as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let w = if c_avg > 0.0 {
            (-counts[i] / c_avg).exp()
        } else {
            1.0
        };
        for (a, (p, t)) in pred.row(i).iter().zip(target.row(i)).enumerate() {
            loss += w * (p - t).abs();
            let sign = if p > t {
                1.0
            } else if p < t {
                -1.0
            } else {
                0.0
            };
            grad.set(i, a, w * sign / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Arithmetic mean of per-frame losses over a rollout.
pub fn rollout_loss(pred: &[Matrix], target: &[Matrix], radius: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::input(format!(
            "rollout length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        acc += loss_frame(p, t, radius)?;
    }
    Ok(acc / pred.len() as f64)
}

/// Add i.i.d. Gaussian noise to fluid positions only.
pub fn add_noise(state: &ParticleState, std: f64, rng: &mut ChaCha8Rng) -> ParticleState {
    let mut out = state.clone();
    if std == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    for i in 0..state.len() {
        if state.types[i] != crate::simulator::ParticleType::Fluid {
            continue;
        }
        for a in 0..state.dim() {
            let v = out.positions.get(i, a) + normal.sample(rng);
            out.positions.set(i, a, v);
        }
    }
    out
}

/// [`warmup`] with the step count drawn uniformly from `[0, w_max)`.
#[allow(clippy::too_many_arguments)]
pub fn warmup_random(
    scene: &Scene,
    start: usize,
    params: &ModelParams,
    arch: &ArchitectureConfig,
    sim: &SimulationConfig,
    w_max: usize,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticleState, usize)> {
    let w = if w_max == 0 {
        0
    } else {
        rng.random_range(0..w_max)
    };
    warmup(scene, start, params, arch, sim, w, threshold)
}

/// Simulate up to `w` gradient-free steps from ground-truth frame `start`,
/// stopping early when the maximum-density error against the matching
/// ground-truth frame exceeds `threshold`. Returns the reached state and
/// the frame index it corresponds to.
#[allow(clippy::too_many_arguments)]
pub fn warmup(
    scene: &Scene,
    start: usize,
    params: &ModelParams,
    arch: &ArchitectureConfig,
    sim: &SimulationConfig,
    w: usize,
    threshold: f64,
) -> Result<(ParticleState, usize)> {
    let mut state = scene.state_at(start);
    let h = 4.0 * scene.particle_radius;
    for k in 1..=w {
        state = step(&state, params, arch, sim)?;
        if !state.all_finite() {
            return Err(Error::Diverged { step: k });
        }
        let gt = &scene.frames[start + k];
        let rho_pred = sph_density(
            &PointSet::new(state.positions.clone())?,
            &state.masses,
            h,
        )?;
        let rho_gt = sph_density(&PointSet::new(gt.positions.clone())?, &scene.masses, h)?;
        let max_pred = rho_pred.iter().fold(0.0f64, |a, b| a.max(*b));
        let max_gt = rho_gt.iter().fold(f64::MIN_POSITIVE, |a, b| a.max(*b));
        let err = (1.0 - max_pred / max_gt).abs();
        if err > threshold {
            return Ok((state, start + k));
        }
    }
    Ok((state, start + w))
}

/// Adam moment accumulators, one pair per parameter tensor (in the fixed
/// tensor order of [`ModelParams::for_each_tensor`]).
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(|_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Standard bias-corrected Adam update. Rejects non-finite gradients so
/// the caller can skip the iteration.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let mut finite = true;
    grads.for_each_tensor(|_, t| finite &= t.iter().all(|g| g.is_finite()));
    if !finite {
        return Err(Error::Invariant("non-finite gradient".into()));
    }
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    let mut grad_tensors: Vec<&[f64]> = Vec::new();
    // Safety of ordering: both walks use the same fixed tensor order.
    let mut collected: Vec<Vec<f64>> = Vec::new();
    grads.for_each_tensor(|_, t| collected.push(t.to_vec()));
    for t in &collected {
        grad_tensors.push(t);
    }
    let mut idx = 0usize;
    params.for_each_tensor_mut(|_, t| {
        let g = grad_tensors[idx];
        let m = &mut opt.m[idx];
        let v = &mut opt.v[idx];
        for i in 0..t.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            t[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        idx += 1;
    });
    Ok(())
}

/// Add `scale * src` into `dst`, tensor by tensor.
fn axpy_params(dst: &mut ModelParams, src: &ModelParams, scale: f64) {
    let mut collected: Vec<Vec<f64>> = Vec::new();
    src.for_each_tensor(|_, t| collected.push(t.to_vec()));
    let mut idx = 0usize;
    dst.for_each_tensor_mut(|_, t| {
        for (a, b) in t.iter_mut().zip(&collected[idx]) {
            *a += scale * b;
        }
        idx += 1;
    });
}

/// Loss and parameter gradients of a `T`-step rollout against per-frame
/// fluid target positions, backpropagated through all steps including the
/// position-based velocity updates.
pub fn rollout_training(
    state0: &ParticleState,
    params: &ModelParams,
    arch: &ArchitectureConfig,
    sim: &SimulationConfig,
    targets: &[Matrix],
    loss_radius: f64,
) -> Result<(f64, ModelParams)> {
    let t_frames = targets.len();
    if t_frames == 0 {
        return Err(Error::input("rollout needs at least one target frame"));
    }
    let fluid = state0.fluid_indices();
    let d = state0.dim();

    struct StepRecord {
        cache: crate::network::NetworkCache,
        loss_grad: Matrix,
    }

    let mut records: Vec<StepRecord> = Vec::with_capacity(t_frames);
    let mut current = state0.clone();
    let mut total_loss = 0.0;
    for target in targets.iter() {
        let provisional = euler_predict(&current, sim);
        let (out, cache) = forward_cached(&provisional, params, arch)?;
        let mut next = provisional;
        for (row, &i) in fluid.iter().enumerate() {
            for a in 0..d {
                let x = next.positions.get(i, a) + out.delta_x.get(row, a);
                next.positions.set(i, a, x);
                next.velocities
                    .set(i, a, (x - current.positions.get(i, a)) / sim.dt);
            }
        }
        if !next.all_finite() {
            return Err(Error::Diverged { step: records.len() + 1 });
        }
        let pred_fluid = next.positions.select_rows(&fluid);
        let (loss_t, grad_t) = loss_frame_grad(&pred_fluid, target, loss_radius)?;
        total_loss += loss_t / t_frames as f64;
        records.push(StepRecord {
            cache,
            loss_grad: grad_t,
        });
        current = next;
    }

    // Reverse sweep. x_bar and v_bar are adjoints of the fluid positions
    // and velocities entering each step.
    let nf = fluid.len();
    let mut grads = ModelParams::new(arch)?;
    let mut x_bar = Matrix::zeros(nf, d);
    let mut v_bar = Matrix::zeros(nf, d);
    for (t, rec) in records.iter().enumerate().rev() {
        // Loss of frame t+1 (produced by this step).
        let mut xt_bar = rec.loss_grad.clone();
        xt_bar.scale(1.0 / t_frames as f64);
        xt_bar.add_assign(&x_bar);

        // v_t = (x_t - x_{t-1}) / dt.
        let mut x_prev_bar = Matrix::zeros(nf, d);
        for i in 0..nf {
            for a in 0..d {
                let vb = v_bar.get(i, a) / sim.dt;
                xt_bar.set(i, a, xt_bar.get(i, a) + vb);
                x_prev_bar.set(i, a, -vb);
            }
        }

        // x_t = x'_t + dx_t.
        let net = network_backward(&xt_bar, &rec.cache, params, arch)?;
        axpy_params(&mut grads, &net.params, 1.0);
        let mut xp_bar = xt_bar; // d/d x'_t from the additive update
        xp_bar.add_assign(&net.positions);
        let mut vp_bar = net.velocities;

        // x'_t = x_{t-1} + dt v'_t ; v'_t = v_{t-1} + dt g.
        x_prev_bar.add_assign(&xp_bar);
        for i in 0..nf {
            for a in 0..d {
                let v = vp_bar.get(i, a) + sim.dt * xp_bar.get(i, a);
                vp_bar.set(i, a, v);
            }
        }
        x_bar = x_prev_bar;
        v_bar = vp_bar;
        let _ = t;
    }
    Ok((total_loss, grads))
}

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub rollout_frames: usize,
    pub warmup_wmax: f64,
    pub loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub skipped_iterations: Vec<usize>,
}

/// The complete training loop from a fresh random initialization.
/// `on_checkpoint` is invoked per the checkpoint schedule and once at the
/// end.
pub fn train(
    dataset: &TrajectoryDataset,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    on_checkpoint: impl FnMut(usize, &ModelParams),
) -> Result<(ModelParams, TrainingLog)> {
    let params = crate::network::init_params(arch, cfg.seed);
    train_from(dataset, arch, cfg, params, on_checkpoint)
}

/// [`train`] continuing from existing parameters (checkpoint resume).
pub fn train_from(
    dataset: &TrajectoryDataset,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    params0: ModelParams,
    mut on_checkpoint: impl FnMut(usize, &ModelParams),
) -> Result<(ModelParams, TrainingLog)> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    let mut params = params0;
    let mut opt = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut log = TrainingLog::default();
    let t0 = std::time::Instant::now();

    let threads = cfg.threads.max(1);
    for iter in 0..cfg.iterations {
        let lr = cfg.lr_schedule(iter);
        let t_frames = cfg.rollout_frames(iter);
        let w_max = cfg.warmup_wmax(iter);

        // Draw all batch sampling decisions up front so that the rng
        // stream, and hence the whole run, does not depend on the thread
        // count used to evaluate the members.
        struct Member {
            scene: usize,
            w: usize,
            start: usize,
            noise_seed: u64,
        }
        let mut members = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let scene_idx = rng.random_range(0..dataset.scenes.len());
            let scene = &dataset.scenes[scene_idx];
            if scene.frames.len() < t_frames + 1 {
                return Err(Error::input(format!(
                    "scene {} too short for a {t_frames}-frame rollout",
                    scene.name
                )));
            }
            let w_upper = w_max.ceil() as usize;
            let mut w = if w_upper == 0 {
                0
            } else {
                rng.random_range(0..w_upper)
            };
            // Clamp the warmup depth to what the scene can supply.
            w = w.min(scene.frames.len() - 1 - t_frames);
            let max_start = scene.frames.len() - 1 - t_frames - w;
            let start = if max_start == 0 {
                0
            } else {
                rng.random_range(0..=max_start)
            };
            members.push(Member {
                scene: scene_idx,
                w,
                start,
                noise_seed: rng.next_u64(),
            });
        }

        let evaluate = |m: &Member| -> Result<(f64, ModelParams)> {
            let scene = &dataset.scenes[m.scene];
            let sim =
                SimulationConfig::new(scene.dt, scene.gravity.clone(), scene.particle_radius)?;
            let (state, idx) =
                warmup(scene, m.start, &params, arch, &sim, m.w, cfg.warmup_threshold)?;
            let idx = idx.min(scene.frames.len() - 1 - t_frames);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(m.noise_seed);
            let noisy = add_noise(&state, cfg.noise_std, &mut noise_rng);
            let fluid = noisy.fluid_indices();
            let targets: Vec<Matrix> = (1..=t_frames)
                .map(|k| scene.frames[idx + k].positions.select_rows(&fluid))
                .collect();
            rollout_training(&noisy, &params, arch, &sim, &targets, arch.particle_radius)
        };

        let results: Vec<Result<(f64, ModelParams)>> = if threads <= 1 || cfg.batch_size <= 1 {
            members.iter().map(&evaluate).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = members
                    .iter()
                    .map(|m| scope.spawn(|| evaluate(m)))
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        };

        let mut batch_grads = ModelParams::new(arch)?;
        let mut batch_loss = 0.0;
        let mut ok_members = 0usize;
        for res in results {
            match res {
                Ok((loss, grads)) => {
                    batch_loss += loss;
                    axpy_params(&mut batch_grads, &grads, 1.0);
                    ok_members += 1;
                }
                Err(Error::Diverged { .. }) => {
                    log.skipped_iterations.push(iter);
                }
                Err(e) => return Err(e),
            }
        }
        if ok_members == 0 {
            continue;
        }
        let inv = 1.0 / ok_members as f64;
        batch_grads.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= inv));
        batch_loss *= inv;

        if adam_step(&mut params, &batch_grads, &mut opt, lr).is_err() {
            log.skipped_iterations.push(iter);
            continue;
        }

        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.iterations) {
            log.rows.push(LogRow {
                iteration: iter,
                lr,
                rollout_frames: t_frames,
                warmup_wmax: w_max,
                loss: batch_loss,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
        }
        if cfg.checkpoint_every > 0 && iter > 0 && iter % cfg.checkpoint_every == 0 {
            on_checkpoint(iter, &params);
        }
    }
    on_checkpoint(cfg.iterations, &params);
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, HeadKind};
    use crate::simulator::ParticleType;
    use crate::sph::Frame;

    #[test]
    fn loss_frame_examples() {
        let radius = 0.02;
        let a = Matrix::from_vec(2, 1, vec![0.0, 0.1]);
        assert_eq!(loss_frame(&a, &a, radius).unwrap(), 0.0);

        // Isolated particle: c = 0 = c_avg, weight 1.
        let pred = Matrix::from_vec(1, 1, vec![0.01]);
        let target = Matrix::from_vec(1, 1, vec![0.0]);
        assert!((loss_frame(&pred, &target, radius).unwrap() - 0.01).abs() < 1e-15);

        // Two mutual neighbors: c_i = c_avg = 1, weight e^-1 each.
        let pred = Matrix::from_vec(2, 1, vec![0.01, 0.025]);
        let target = Matrix::from_vec(2, 1, vec![0.0, 0.015]);
        let expect = 0.01 * (-1.0f64).exp();
        assert!((loss_frame(&pred, &target, radius).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn loss_frame_grad_matches_fd() {
        let radius = 0.05;
        let pred = Matrix::from_rows(&[&[0.0, 0.01], &[0.03, 0.0], &[0.2, 0.21]]);
        let target = Matrix::from_rows(&[&[0.005, 0.0], &[0.02, 0.01], &[0.22, 0.2]]);
        let (_, grad) = loss_frame_grad(&pred, &target, radius).unwrap();
        let h = 1e-7;
        for i in 0..3 {
            for a in 0..2 {
                let mut p = pred.clone();
                p.set(i, a, pred.get(i, a) + h);
                let lp = loss_frame(&p, &target, radius).unwrap();
                let mut m = pred.clone();
                m.set(i, a, pred.get(i, a) - h);
                let lm = loss_frame(&m, &target, radius).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - grad.get(i, a)).abs() < 1e-6,
                    "grad[{i},{a}]: fd={fd} got={}",
                    grad.get(i, a)
                );
            }
        }
    }

    #[test]
    fn rollout_loss_examples() {
        let radius = 0.02;
        let p = Matrix::from_vec(1, 1, vec![0.01]);
        let t = Matrix::from_vec(1, 1, vec![0.0]);
        let single = rollout_loss(&[p.clone()], &[t.clone()], radius).unwrap();
        assert_eq!(single, loss_frame(&p, &t, radius).unwrap());

        assert_eq!(rollout_loss(&[t.clone()], &[t.clone()], radius).unwrap(), 0.0);

        // Frames with losses 0.01 and 0.03 average to 0.02.
        let p2 = Matrix::from_vec(1, 1, vec![0.03]);
        let got = rollout_loss(&[p.clone(), p2], &[t.clone(), t.clone()], radius).unwrap();
        assert!((got - 0.02).abs() < 1e-15);

        assert!(rollout_loss(&[p], &[], radius).is_err());
    }

    #[test]
    fn lr_schedule_breakpoints_full_budget() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_schedule(0), 0.001);
        assert_eq!(cfg.lr_schedule(10_000), 0.001);
        assert_eq!(cfg.lr_schedule(19_999), 0.001);
        assert_eq!(cfg.lr_schedule(20_000), 0.0005);
        assert_eq!(cfg.lr_schedule(24_999), 0.0005);
        assert_eq!(cfg.lr_schedule(25_000), 0.00025);
        assert_eq!(cfg.lr_schedule(30_000), 0.000125);
        // Non-increasing.
        let mut prev = f64::INFINITY;
        for it in (0..50_000).step_by(500) {
            let lr = cfg.lr_schedule(it);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedules_scale_with_budget() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 5_000;
        assert_eq!(cfg.lr_schedule(1_999), 0.001);
        assert_eq!(cfg.lr_schedule(2_000), 0.0005);
        assert_eq!(cfg.rollout_frames(1_499), 3);
        assert_eq!(cfg.rollout_frames(1_500), 5);
        assert_eq!(cfg.warmup_wmax(999), 0.0);
        assert!((cfg.warmup_wmax(1_000) - 0.5).abs() < 1e-12);
        assert!((cfg.warmup_wmax(3_000) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_schedule_full_budget() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.warmup_wmax(9_999), 0.0);
        assert_eq!(cfg.warmup_wmax(10_000), 5.0);
        assert_eq!(cfg.warmup_wmax(19_999), 5.0);
        assert_eq!(cfg.warmup_wmax(20_000), 10.0);
        assert_eq!(cfg.warmup_wmax(30_000), 20.0);
        assert_eq!(cfg.rollout_frames(14_999), 3);
        assert_eq!(cfg.rollout_frames(15_000), 5);
    }

    fn ballistic_scene(n_fluid: usize, frames: usize) -> Scene {
        // Free space: fluid particles in exact discrete ballistic fall.
        let dt = 0.0025;
        let g = -9.81;
        let mut positions = Vec::with_capacity(frames + 1);
        let mut velocities = Vec::with_capacity(frames + 1);
        let x0: Vec<f64> = (0..n_fluid).map(|i| 0.5 + 0.01 * i as f64).collect();
        let mut x = x0.clone();
        let mut v = vec![0.0; n_fluid];
        positions.push(x.clone());
        velocities.push(v.clone());
        for _ in 0..frames {
            for i in 0..n_fluid {
                v[i] += dt * g;
                x[i] += dt * v[i];
            }
            positions.push(x.clone());
            velocities.push(v.clone());
        }
        Scene {
            name: "ballistic".into(),
            dt,
            gravity: vec![g],
            particle_radius: 0.005,
            types: vec![ParticleType::Fluid; n_fluid],
            normals: Matrix::zeros(n_fluid, 1),
            masses: vec![1.0; n_fluid],
            frames: positions
                .into_iter()
                .zip(velocities)
                .map(|(p, v)| Frame {
                    positions: Matrix::from_vec(n_fluid, 1, p),
                    velocities: Matrix::from_vec(n_fluid, 1, v),
                })
                .collect(),
            flagged_frames: vec![],
        }
    }

    #[test]
    fn add_noise_properties() {
        let scene = ballistic_scene(2, 2);
        let mut state = scene.state_at(0);
        state.types[1] = ParticleType::Boundary;
        state.velocities.set(1, 0, 0.0);
        state.normals.set(1, 0, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let same = add_noise(&state, 0.0, &mut rng);
        assert_eq!(same.positions, state.positions);

        // Statistical std within 2% over many draws.
        let std = 5e-4;
        let mut acc = 0.0;
        let mut n = 0usize;
        for _ in 0..100_000 {
            let noisy = add_noise(&state, std, &mut rng);
            let d = noisy.positions.get(0, 0) - state.positions.get(0, 0);
            acc += d * d;
            n += 1;
            // Boundary particle never moves.
            assert_eq!(noisy.positions.get(1, 0), state.positions.get(1, 0));
        }
        let est = (acc / n as f64).sqrt();
        assert!((est - std).abs() < 0.02 * std, "estimated std {est}");
    }

    #[test]
    fn warmup_zero_steps_returns_ground_truth() {
        let scene = ballistic_scene(3, 10);
        let arch = ArchitectureConfig::default_1d(0.02);
        let params = init_params(&arch, 3);
        let sim = SimulationConfig::new(scene.dt, scene.gravity.clone(), 0.005).unwrap();
        let (state, idx) = warmup(&scene, 2, &params, &arch, &sim, 0, 0.05).unwrap();
        assert_eq!(idx, 2);
        assert_eq!(state.positions, scene.frames[2].positions);
    }

    #[test]
    fn warmup_threshold_zero_stops_immediately() {
        let scene = ballistic_scene(3, 10);
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        let params = init_params(&arch, 5);
        let sim = SimulationConfig::new(scene.dt, scene.gravity.clone(), 0.005).unwrap();
        // Any nonzero density deviation exceeds a zero threshold, so at
        // most one step is taken.
        let (_, idx) = warmup(&scene, 0, &params, &arch, &sim, 5, 0.0).unwrap();
        assert!(idx <= 1, "stopped at {idx}");
    }

    #[test]
    fn adam_basics() {
        let arch = ArchitectureConfig {
            kernel_size: 2,
            ascc_kernel_size: 2,
            preprocess_channels: 1,
            l1_channels: vec![1],
            l2_channels: vec![1],
            l3_channels: vec![],
            l4_channels: 1,
            branches: 1,
            scales: vec![1.0],
            ..ArchitectureConfig::default_1d(0.02)
        };
        let mut params = init_params(&arch, 11);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let zeros = crate::network::ModelParams::new(&arch).unwrap();
        adam_step(&mut params, &zeros, &mut opt, 0.01).unwrap();
        assert_eq!(params, before, "zero grads leave parameters unchanged");

        // First step with gradient g moves each weight by about -lr sign(g).
        let mut grads = crate::network::ModelParams::new(&arch).unwrap();
        grads.for_each_tensor_mut(|_, t| t.iter_mut().enumerate().for_each(|(i, v)| {
            *v = if i % 2 == 0 { 0.5 } else { -0.25 };
        }));
        let mut params2 = before.clone();
        let mut opt2 = OptimizerState::new(&params2);
        adam_step(&mut params2, &grads, &mut opt2, 0.01).unwrap();
        let mut collected_before: Vec<Vec<f64>> = Vec::new();
        before.for_each_tensor(|_, t| collected_before.push(t.to_vec()));
        let mut idx = 0;
        params2.for_each_tensor(|_, t| {
            for (i, v) in t.iter().enumerate() {
                let delta = v - collected_before[idx][i];
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                assert!(
                    (delta + 0.01 * sign).abs() < 1e-6,
                    "first Adam step should be ~ -lr sign(g), got {delta}"
                );
            }
            idx += 1;
        });

        // Determinism: identical runs give identical parameters.
        let mut params3 = before.clone();
        let mut opt3 = OptimizerState::new(&params3);
        adam_step(&mut params3, &grads, &mut opt3, 0.01).unwrap();
        assert_eq!(params2, params3);

        // Non-finite gradients are rejected.
        grads.for_each_tensor_mut(|_, t| {
            if let Some(v) = t.first_mut() {
                *v = f64::NAN;
            }
        });
        assert!(adam_step(&mut params2, &grads, &mut opt2, 0.01).is_err());
    }

    /// Backprop through a 2-step rollout matches finite differences; this
    /// exercises the coupling through the position-based velocity update.
    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        arch.preprocess_channels = 2;
        arch.l1_channels = vec![3, 2];
        arch.l2_channels = vec![3, 2];
        arch.l4_channels = 3;
        let params = init_params(&arch, 13);
        let scene = {
            // A small column-like state with boundary so interactions fire.
            let xs = vec![0.0, -0.01, 0.0105, 0.0212, 0.0334];
            let types = vec![
                ParticleType::Boundary,
                ParticleType::Boundary,
                ParticleType::Fluid,
                ParticleType::Fluid,
                ParticleType::Fluid,
            ];
            let mut normals = Matrix::zeros(5, 1);
            normals.set(0, 0, 1.0);
            normals.set(1, 0, 1.0);
            ParticleState::new(
                Matrix::from_vec(5, 1, xs),
                Matrix::zeros(5, 1),
                types,
                normals,
            )
            .unwrap()
        };
        let sim = SimulationConfig::new(0.0025, vec![-9.81], 0.005).unwrap();
        // Targets sit well away from any plausible prediction so the L1
        // loss is locally smooth around the probe points.
        let targets = vec![
            Matrix::from_vec(3, 1, vec![0.005, 0.016, 0.028]),
            Matrix::from_vec(3, 1, vec![0.004, 0.015, 0.027]),
        ];
        let (_, grads) =
            rollout_training(&scene, &params, &arch, &sim, &targets, arch.particle_radius)
                .unwrap();

        let loss_of = |p: &ModelParams| {
            rollout_training(&scene, p, &arch, &sim, &targets, arch.particle_radius)
                .unwrap()
                .0
        };
        // Probe steps must stay below the distance to the nearest relu
        // crossing; several pre-activations sit within ~1e-6 of zero.
        let step_h = 1e-8;

        // Directional derivative along a fixed random direction aggregates
        // every parameter.
        let dir_h = 1e-8;
        let mut dir_rng = ChaCha8Rng::seed_from_u64(101);
        let mut direction: Vec<Vec<f64>> = Vec::new();
        params.for_each_tensor(|_, t| {
            direction.push((0..t.len()).map(|_| dir_rng.random_range(-1.0..1.0)).collect())
        });
        let mut shift = |sign: f64| {
            let mut p = params.clone();
            let mut idx = 0;
            p.for_each_tensor_mut(|_, t| {
                for (v, u) in t.iter_mut().zip(&direction[idx]) {
                    *v += sign * dir_h * u;
                }
                idx += 1;
            });
            p
        };
        let fd_dir = (loss_of(&shift(1.0)) - loss_of(&shift(-1.0))) / (2.0 * dir_h);
        let mut analytic_dir = 0.0;
        let mut idx = 0;
        grads.for_each_tensor(|_, t| {
            for (g, u) in t.iter().zip(&direction[idx]) {
                analytic_dir += g * u;
            }
            idx += 1;
        });
        assert!(
            (fd_dir - analytic_dir).abs() <= 1e-4 * fd_dir.abs().max(analytic_dir.abs()),
            "directional derivative: fd={fd_dir} analytic={analytic_dir}"
        );

        // Per-tensor spot checks; differences below the central-difference
        // noise floor (relu/L1 kinks inside the probe window) are accepted.
        let mut names = Vec::new();
        params.for_each_tensor(|n, t| names.push((n.to_string(), t.len())));
        for (name, len) in &names {
            for probe in 0..2usize.min(*len) {
                let idx = (probe * 131 + 7) % len;
                let mut pp = params.clone();
                pp.for_each_tensor_mut(|n, t| {
                    if n == name {
                        t[idx] += step_h;
                    }
                });
                let mut pm = params.clone();
                pm.for_each_tensor_mut(|n, t| {
                    if n == name {
                        t[idx] -= step_h;
                    }
                });
                let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * step_h);
                let mut got = f64::NAN;
                grads.for_each_tensor(|n, t| {
                    if n == name {
                        got = t[idx];
                    }
                });
                let diff = (fd - got).abs();
                assert!(
                    diff <= 1e-4 * fd.abs().max(got.abs()) || diff <= 5e-8,
                    "{name}[{idx}]: fd={fd} analytic={got}"
                );
            }
        }
    }

    #[test]
    fn warmup_contributes_no_gradients() {
        // A zero-length warmup leaves the sampled state identical, so the
        // gradients must match a rollout straight from ground truth.
        let scene = ballistic_scene(4, 8);
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        let params = init_params(&arch, 17);
        let sim = SimulationConfig::new(scene.dt, scene.gravity.clone(), 0.005).unwrap();
        let (state, idx) = warmup(&scene, 1, &params, &arch, &sim, 0, 0.05).unwrap();
        let fluid = state.fluid_indices();
        let targets: Vec<Matrix> = (1..=2)
            .map(|k| scene.frames[idx + k].positions.select_rows(&fluid))
            .collect();
        let (l1, g1) =
            rollout_training(&state, &params, &arch, &sim, &targets, arch.particle_radius)
                .unwrap();
        let direct = scene.state_at(1);
        let (l2, g2) =
            rollout_training(&direct, &params, &arch, &sim, &targets, arch.particle_radius)
                .unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn train_zero_iterations_returns_init() {
        let scene = ballistic_scene(2, 8);
        let dataset = TrajectoryDataset { scenes: vec![scene] };
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        let mut cfg = TrainConfig::default();
        cfg.iterations = 0;
        cfg.seed = 21;
        let (params, log) = train(&dataset, &arch, &cfg, |_, _| {}).unwrap();
        assert_eq!(params, init_params(&arch, 21));
        assert!(log.rows.is_empty());
    }

    #[test]
    fn train_deterministic_rerun() {
        let scene = ballistic_scene(3, 10);
        let dataset = TrajectoryDataset { scenes: vec![scene] };
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        arch.preprocess_channels = 2;
        arch.l1_channels = vec![3, 2];
        arch.l2_channels = vec![3, 2];
        arch.l4_channels = 3;
        let mut cfg = TrainConfig::default();
        cfg.iterations = 10;
        cfg.log_every = 1;
        cfg.seed = 5;
        let (p1, log1) = train(&dataset, &arch, &cfg, |_, _| {}).unwrap();
        let (p2, log2) = train(&dataset, &arch, &cfg, |_, _| {}).unwrap();
        assert_eq!(p1, p2);
        let l1: Vec<f64> = log1.rows.iter().map(|r| r.loss).collect();
        let l2: Vec<f64> = log2.rows.iter().map(|r| r.loss).collect();
        assert_eq!(l1, l2);
    }

    /// The zero network is the optimum on exact-ballistic ground truth;
    /// training an unconstrained head must find it.
    #[test]
    fn train_free_fall_converges_to_zero_network() {
        let scene = ballistic_scene(1, 12);
        let dataset = TrajectoryDataset { scenes: vec![scene.clone()] };
        let mut arch = ArchitectureConfig::default_1d(0.02);
        arch.head = HeadKind::CConv;
        arch.kernel_size = 4;
        arch.ascc_kernel_size = 4;
        arch.preprocess_channels = 2;
        arch.l1_channels = vec![3, 2];
        arch.l2_channels = vec![3, 2];
        arch.l4_channels = 3;
        let mut cfg = TrainConfig::default();
        cfg.iterations = 500;
        cfg.seed = 3;
        cfg.noise_std = 0.0;
        cfg.log_every = 50;
        let (params, log) = train(&dataset, &arch, &cfg, |_, _| {}).unwrap();

        let sim = SimulationConfig::new(scene.dt, scene.gravity.clone(), 0.005).unwrap();
        let state = scene.state_at(0);
        let targets: Vec<Matrix> = (1..=3)
            .map(|k| scene.frames[k].positions.clone())
            .collect();
        let eval = |p: &ModelParams| {
            rollout_training(&state, p, &arch, &sim, &targets, arch.particle_radius)
                .unwrap()
                .0
        };

        // 500 iterations reach the zero-network basin; the floor there is
        // set by the final learning rate (Adam on an L1 objective hovers
        // within ~lr of the kink), so full convergence needs a refinement
        // phase at a smaller rate.
        let coarse = eval(&params);
        assert!(
            coarse < 5e-5,
            "coarse rollout loss {coarse} (log tail: {:?})",
            log.rows.last()
        );
        let mut refine = cfg.clone();
        refine.lr0 = 1e-5;
        refine.seed = 4;
        let (params, _) = train_from(&dataset, &arch, &refine, params, |_, _| {}).unwrap();
        let loss = eval(&params);
        assert!(loss < 1e-6, "refined rollout loss {loss}");

        // The antisymmetric head is already optimal here: with a single
        // isolated particle the pairwise construction outputs exactly zero.
        let mut ascc_arch = arch.clone();
        ascc_arch.head = HeadKind::Ascc;
        let ascc_params = init_params(&ascc_arch, 77);
        let (loss0, _) = rollout_training(
            &state,
            &ascc_params,
            &ascc_arch,
            &sim,
            &targets,
            ascc_arch.particle_radius,
        )
        .unwrap();
        // The self-interaction cancels to rounding, not to exactly zero.
        assert!(loss0 < 1e-12, "isolated-particle loss {loss0}");
    }
}
