//! Flow-matching generator over action-trajectory latents.
//!
//! A latent is a T x (d+2) matrix: d joint-command channels plus a
//! deformation channel and a jitter channel, so the generator can emit the
//! same visual artifact kinds the environment can render. Training regresses
//! a velocity field onto the transport vector x1 - x0 along the linear
//! noise-to-data path. Sampling is either the deterministic Euler ODE or a
//! marginal-preserving SDE whose per-step Gaussian transitions carry the
//! log-densities needed for likelihood ratios.
//!
//! The SDE drift is `f = v + (g^2 / 2) * score` with the score recovered
//! from the velocity through the linear-Gaussian path identity
//! `score(x, t) = (t v - x) / (1 - t)`; a Fokker-Planck computation shows
//! this drift preserves the ODE marginals for any diffusion scale g. The
//! score blows up at t = 1, so stochastic integration stops at `1 - eps_t`
//! and a single deterministic ODE step closes the gap.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::env::{
    render_frame, ArmConfig, ArtifactKind, ArtifactSpec, Episode, TaskSpec,
};
use crate::error::{EvaError, Result};
use crate::graph::{evaluate_with_gradients, ComputeGraph, ValueId};
use crate::optim::{adamw_step, clip_grad_norm, OptimizerState};
use crate::rng::{derive_stream, StreamRng};
use crate::tensor::Tensor;

const TIME_EMBED: usize = 8;
const STREAM_FM: u64 = 0xF1;
const STREAM_SAMPLE: u64 = 0xF2;

/// Latent-space and sampler settings for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    /// Steps per trajectory (matches the environment's episode length).
    pub horizon: usize,
    /// Joint count d; the latent carries d + 2 channels per step.
    pub action_dim: usize,
    /// Size of the task one-hot in the condition vector.
    pub n_tasks: usize,
    /// Hidden width of the velocity MLP.
    pub hidden: usize,
    /// Integration steps for both samplers.
    pub n_steps: usize,
    /// Singularity guard: stochastic steps stop at 1 - eps_t.
    pub eps_t: f64,
    /// Diffusion scale for the default constant schedule.
    pub g_scale: f64,
    /// Jitter-channel decode scale (channel -> noise std, world units).
    pub u_scale: f64,
    /// Channel activity below this decodes to "no artifact".
    pub artifact_threshold: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            horizon: 16,
            action_dim: 3,
            n_tasks: 20,
            hidden: 256,
            n_steps: 32,
            eps_t: 1e-3,
            g_scale: 0.25,
            u_scale: 0.3,
            artifact_threshold: 0.05,
        }
    }
}

impl GenConfig {
    pub fn latent_width(&self) -> usize {
        self.action_dim + 2
    }

    pub fn latent_len(&self) -> usize {
        self.horizon * self.latent_width()
    }

    pub fn cond_len(&self) -> usize {
        self.n_tasks + self.action_dim + 4 * self.action_dim
    }

    pub fn input_len(&self) -> usize {
        self.latent_len() + TIME_EMBED + self.cond_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 || self.n_tasks == 0 || self.hidden == 0 {
            return Err(EvaError::InvalidConfig("generator dims must be positive".into()));
        }
        if self.n_steps == 0 {
            return Err(EvaError::InvalidConfig("n_steps must be positive".into()));
        }
        if !(self.eps_t > 0.0 && self.eps_t < 0.5) {
            return Err(EvaError::InvalidConfig("eps_t must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Diffusion schedule g(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GSchedule {
    Constant(f64),
    /// g0 * sqrt(t / (1 - t)); vanishes at t = 0, so per-step densities
    /// exist only for t > 0.
    SqrtRatio(f64),
}

impl GSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            GSchedule::Constant(g0) => *g0,
            GSchedule::SqrtRatio(g0) => g0 * (t / (1.0 - t)).max(0.0).sqrt(),
        }
    }
}

/// One trajectory latent: `horizon` rows of `width = d + 2` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GenLatent {
    horizon: usize,
    width: usize,
    values: Vec<f64>,
}

impl GenLatent {
    pub fn new(horizon: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != horizon * width {
            return Err(EvaError::ShapeMismatch(format!(
                "latent {horizon}x{width} vs {} values",
                values.len()
            )));
        }
        Ok(GenLatent {
            horizon,
            width,
            values,
        })
    }

    pub fn zeros(horizon: usize, width: usize) -> Self {
        GenLatent {
            horizon,
            width,
            values: vec![0.0; horizon * width],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, step: usize, channel: usize) -> f64 {
        self.values[step * self.width + channel]
    }

    pub fn set(&mut self, step: usize, channel: usize, v: f64) {
        self.values[step * self.width + channel] = v;
    }
}

/// Conditioning context: task one-hot, start configuration, and the decoded
/// poses of the most recent 4 frames (zero-padded when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub task_id: usize,
    pub q_start: Vec<f64>,
    pub history: Option<[Vec<f64>; 4]>,
}

impl Condition {
    pub fn encode(&self, cfg: &GenConfig) -> Result<Vec<f64>> {
        if self.task_id >= cfg.n_tasks {
            return Err(EvaError::InvalidArgument(format!(
                "task id {} outside the {}-task condition vocabulary",
                self.task_id, cfg.n_tasks
            )));
        }
        if self.q_start.len() != cfg.action_dim {
            return Err(EvaError::ShapeMismatch(format!(
                "q_start width {} vs action dim {}",
                self.q_start.len(),
                cfg.action_dim
            )));
        }
        let mut out = vec![0.0; cfg.cond_len()];
        out[self.task_id] = 1.0;
        out[cfg.n_tasks..cfg.n_tasks + cfg.action_dim].copy_from_slice(&self.q_start);
        if let Some(hist) = &self.history {
            for (i, pose) in hist.iter().enumerate() {
                if pose.len() != cfg.action_dim {
                    return Err(EvaError::ShapeMismatch("history pose width".into()));
                }
                let off = cfg.n_tasks + cfg.action_dim * (1 + i);
                out[off..off + cfg.action_dim].copy_from_slice(pose);
            }
        }
        Ok(out)
    }
}

fn time_embedding(t: f64) -> [f64; TIME_EMBED] {
    let mut out = [0.0; TIME_EMBED];
    let mut freq = std::f64::consts::PI;
    for k in 0..TIME_EMBED / 2 {
        out[2 * k] = (freq * t).sin();
        out[2 * k + 1] = (freq * t).cos();
        freq *= 2.0;
    }
    out
}

/// MLP weights of the velocity field v(x, t, c).
#[derive(Debug, Clone)]
pub struct VelocityFieldParams {
    pub input_len: usize,
    pub hidden: usize,
    pub output_len: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl VelocityFieldParams {
    pub fn init(cfg: &GenConfig, seed: u64) -> Self {
        let mut rng = StreamRng::new(seed, 0xF10);
        let (i, h, o) = (cfg.input_len(), cfg.hidden, cfg.latent_len());
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        VelocityFieldParams {
            input_len: i,
            hidden: h,
            output_len: o,
            w1: Tensor::randn(&[i, h], he(i), &mut rng).with_grad(),
            b1: Tensor::zeros(&[1, h]).with_grad(),
            w2: Tensor::randn(&[h, h], he(h), &mut rng).with_grad(),
            b2: Tensor::zeros(&[1, h]).with_grad(),
            // near-zero output layer: the initial field is almost the
            // identity transport, which keeps early SDE rollouts tame
            w3: Tensor::randn(&[h, o], 0.01, &mut rng).with_grad(),
            b3: Tensor::zeros(&[1, o]).with_grad(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
            self.w3.clone(),
            self.b3.clone(),
        ]
    }

    pub fn set_tensors(&mut self, ts: Vec<Tensor>) {
        let mut it = ts.into_iter();
        self.w1 = it.next().unwrap();
        self.b1 = it.next().unwrap();
        self.w2 = it.next().unwrap();
        self.b2 = it.next().unwrap();
        self.w3 = it.next().unwrap();
        self.b3 = it.next().unwrap();
    }

    pub fn digest(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for t in self.tensors() {
            for v in t.data() {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_i64s(
            &format!("{prefix}/meta"),
            vec![
                self.input_len as i64,
                self.hidden as i64,
                self.output_len as i64,
            ],
        );
        for (name, t) in self.named() {
            c.put_tensor(&format!("{prefix}/{name}"), t);
        }
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let meta = c.i64s(&format!("{prefix}/meta"))?;
        if meta.len() != 3 {
            return Err(EvaError::Checkpoint("generator meta malformed".into()));
        }
        let (i, h, o) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let grab = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = c.tensor(&format!("{prefix}/{name}"))?;
            if t.shape() != shape {
                return Err(EvaError::Checkpoint(format!(
                    "{prefix}/{name}: shape {:?} vs expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.with_grad())
        };
        Ok(VelocityFieldParams {
            input_len: i,
            hidden: h,
            output_len: o,
            w1: grab("w1", &[i, h])?,
            b1: grab("b1", &[1, h])?,
            w2: grab("w2", &[h, h])?,
            b2: grab("b2", &[1, h])?,
            w3: grab("w3", &[h, o])?,
            b3: grab("b3", &[1, o])?,
        })
    }
}

fn assemble_input(x: &[f64], t: f64, cond: &[f64], cfg: &GenConfig) -> Vec<f64> {
    let mut input = Vec::with_capacity(cfg.input_len());
    input.extend_from_slice(x);
    input.extend_from_slice(&time_embedding(t));
    input.extend_from_slice(cond);
    input
}

/// Fast eager forward of the velocity MLP (used by the samplers).
pub fn velocity(
    x: &[f64],
    t: f64,
    cond: &[f64],
    params: &VelocityFieldParams,
    cfg: &GenConfig,
) -> Vec<f64> {
    let input = assemble_input(x, t, cond, cfg);
    debug_assert_eq!(input.len(), params.input_len);
    let h = params.hidden;
    let matvec = |w: &Tensor, b: &Tensor, v: &[f64], relu: bool| -> Vec<f64> {
        let cols = w.shape()[1];
        let mut out = b.data().to_vec();
        for (i, vi) in v.iter().enumerate() {
            if *vi == 0.0 {
                continue;
            }
            let row = &w.data()[i * cols..(i + 1) * cols];
            for j in 0..cols {
                out[j] += vi * row[j];
            }
        }
        if relu {
            for o in &mut out {
                *o = o.max(0.0);
            }
        }
        out
    };
    let h1 = matvec(&params.w1, &params.b1, &input, true);
    debug_assert_eq!(h1.len(), h);
    let h2 = matvec(&params.w2, &params.b2, &h1, true);
    matvec(&params.w3, &params.b3, &h2, false)
}

/// Graph forward of the velocity MLP for a batch of assembled input rows.
/// `ids` order matches [`VelocityFieldParams::tensors`].
pub(crate) fn velocity_graph(
    g: &mut ComputeGraph,
    ids: &[ValueId],
    input: ValueId,
) -> Result<ValueId> {
    let z1 = g.matmul(input, ids[0])?;
    let z1 = g.add(z1, ids[1])?;
    let a1 = g.relu(z1)?;
    let z2 = g.matmul(a1, ids[2])?;
    let z2 = g.add(z2, ids[3])?;
    let a2 = g.relu(z2)?;
    let z3 = g.matmul(a2, ids[4])?;
    g.add(z3, ids[5])
}

/// Linear interpolation `(1 - t) x0 + t x1` along the noise-to-data path.
pub fn interpolate(x0: &GenLatent, x1: &GenLatent, t: f64) -> Result<GenLatent> {
    if x0.horizon != x1.horizon || x0.width != x1.width {
        return Err(EvaError::ShapeMismatch("interpolate latent shapes".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(EvaError::InvalidArgument(format!("t {t} outside [0, 1]")));
    }
    let values = x0
        .values
        .iter()
        .zip(&x1.values)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    GenLatent::new(x0.horizon, x0.width, values)
}

/// Score of the path marginal recovered from the velocity:
/// `(t v - x) / (1 - t)`. Undefined at t = 1; callers stay below
/// `1 - eps_t`.
pub fn score_from_velocity(x: &[f64], t: f64, v: &[f64], eps_t: f64) -> Result<Vec<f64>> {
    if t > 1.0 - eps_t {
        return Err(EvaError::InvalidArgument(format!(
            "score singular: t {t} above {}",
            1.0 - eps_t
        )));
    }
    Ok(x.iter()
        .zip(v)
        .map(|(xi, vi)| (t * vi - xi) / (1.0 - t))
        .collect())
}

/// SDE drift `f = v + (g(t)^2 / 2) * score`.
pub fn drift(
    x: &[f64],
    t: f64,
    v: &[f64],
    g_sched: &GSchedule,
    eps_t: f64,
) -> Result<Vec<f64>> {
    let g = g_sched.at(t);
    let score = score_from_velocity(x, t, v, eps_t)?;
    Ok(v.iter()
        .zip(&score)
        .map(|(vi, si)| vi + 0.5 * g * g * si)
        .collect())
}

/// Euler integration of a generic field over the sampler grid: `n` steps
/// from 0 to `1 - eps_t`, then one closing step of length `eps_t`.
/// Returns all visited states (n + 2 entries including the final one).
pub fn euler_path<F>(x0: Vec<f64>, n_steps: usize, eps_t: f64, mut field: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let span = 1.0 - eps_t;
    let dt = span / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 2);
    let mut x = x0;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let f = field(&x, t);
        let next: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi + fi * dt).collect();
        states.push(x);
        x = next;
    }
    states.push(x.clone());
    // closing step from 1 - eps_t to 1
    let f = field(&x, span);
    let last: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi + fi * eps_t).collect();
    states.push(last);
    states
}

/// Deterministic flow sample: Euler ODE from x0 ~ N(0, I) to t = 1.
pub fn sample_ode(
    cond: &Condition,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    n_steps: usize,
    seed: u64,
) -> Result<GenLatent> {
    Ok(sample_ode_states(cond, params, cfg, n_steps, seed)?
        .pop()
        .expect("euler_path returns states"))
}

/// Like [`sample_ode`] but returns every visited state; the last entry is
/// the final latent.
pub fn sample_ode_states(
    cond: &Condition,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<GenLatent>> {
    cfg.validate()?;
    if n_steps == 0 {
        return Err(EvaError::InvalidArgument("n_steps must be >= 1".into()));
    }
    let cvec = cond.encode(cfg)?;
    let mut rng = StreamRng::new(seed, STREAM_SAMPLE);
    let mut x0 = vec![0.0; cfg.latent_len()];
    rng.fill_normal(&mut x0);
    let states = euler_path(x0, n_steps, cfg.eps_t, |x, t| {
        velocity(x, t, &cvec, params, cfg)
    });
    states
        .into_iter()
        .map(|s| GenLatent::new(cfg.horizon, cfg.latent_width(), s))
        .collect()
}

/// The recorded denoising path of one stochastic rollout.
#[derive(Debug, Clone)]
pub struct SdeTrajectory {
    /// N + 1 grid times `0 = t_0 < ... < t_N = 1 - eps_t`.
    pub timesteps: Vec<f64>,
    /// N + 1 states visited by the stochastic steps.
    pub states: Vec<GenLatent>,
    /// N standard-normal draws, one per stochastic step.
    pub noises: Vec<Vec<f64>>,
    /// State after the closing deterministic ODE step to t = 1.
    pub final_latent: GenLatent,
    pub condition: Condition,
    pub g_schedule: GSchedule,
}

impl SdeTrajectory {
    pub fn n_steps(&self) -> usize {
        self.noises.len()
    }

    pub fn step_size(&self) -> f64 {
        self.timesteps[1] - self.timesteps[0]
    }
}

// One Euler-Maruyama coordinate update; sampling and replay share this so
// stored states reproduce bit-for-bit.
#[inline]
fn em_step_coord(x: f64, f: f64, dt: f64, g: f64, z: f64) -> f64 {
    x + f * dt + g * dt.sqrt() * z
}

/// Euler-Maruyama sampling of the marginal-preserving SDE; records states,
/// noises, and timesteps so the path can be replayed and re-weighted.
pub fn sample_sde(
    cond: &Condition,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    n_steps: usize,
    g_sched: GSchedule,
    seed: u64,
) -> Result<SdeTrajectory> {
    cfg.validate()?;
    if n_steps == 0 {
        return Err(EvaError::InvalidArgument("n_steps must be >= 1".into()));
    }
    let cvec = cond.encode(cfg)?;
    let span = 1.0 - cfg.eps_t;
    let dt = span / n_steps as f64;
    let mut rng = StreamRng::new(seed, STREAM_SAMPLE);
    let mut x = vec![0.0; cfg.latent_len()];
    rng.fill_normal(&mut x);

    let mut timesteps = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut noises = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = i as f64 * dt;
        timesteps.push(t);
        states.push(GenLatent::new(cfg.horizon, cfg.latent_width(), x.clone())?);
        let v = velocity(&x, t, &cvec, params, cfg);
        let f = drift(&x, t, &v, &g_sched, cfg.eps_t)?;
        let g = g_sched.at(t);
        let mut z = vec![0.0; x.len()];
        rng.fill_normal(&mut z);
        for j in 0..x.len() {
            x[j] = em_step_coord(x[j], f[j], dt, g, z[j]);
        }
        noises.push(z);
    }
    timesteps.push(span);
    states.push(GenLatent::new(cfg.horizon, cfg.latent_width(), x.clone())?);
    // closing deterministic ODE step to t = 1
    let v = velocity(&x, span, &cvec, params, cfg);
    for j in 0..x.len() {
        x[j] += v[j] * cfg.eps_t;
    }
    let final_latent = GenLatent::new(cfg.horizon, cfg.latent_width(), x)?;
    Ok(SdeTrajectory {
        timesteps,
        states,
        noises,
        final_latent,
        condition: cond.clone(),
        g_schedule: g_sched,
    })
}

/// Recomputes `states[i+1]` from `states[i]` and `noises[i]`; true when the
/// stored path replays bit-for-bit.
pub fn replay_matches(
    traj: &SdeTrajectory,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
) -> Result<bool> {
    let cvec = traj.condition.encode(cfg)?;
    let dt = traj.step_size();
    for i in 0..traj.n_steps() {
        let x = traj.states[i].flat();
        let t = traj.timesteps[i];
        let v = velocity(x, t, &cvec, params, cfg);
        let f = drift(x, t, &v, &traj.g_schedule, cfg.eps_t)?;
        let g = traj.g_schedule.at(t);
        for j in 0..x.len() {
            let expect = x[j] + f[j] * dt + g * dt.sqrt() * traj.noises[i][j];
            if expect.to_bits() != traj.states[i + 1].flat()[j].to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Builds the per-step transition log-density
/// `log N(x_next; x + f dt, g^2 dt I)` on a graph. `ids` are the velocity
/// parameter leaves; `x` and `x_next` enter as constants.
pub(crate) fn step_log_prob_graph(
    g: &mut ComputeGraph,
    ids: &[ValueId],
    x: &[f64],
    x_next: &[f64],
    t: f64,
    dt: f64,
    cond_vec: &[f64],
    cfg: &GenConfig,
    g_sched: &GSchedule,
) -> Result<ValueId> {
    let gt = g_sched.at(t);
    if !(gt > 0.0) {
        return Err(EvaError::InvalidArgument(format!(
            "deterministic step (g = 0 at t = {t}) has no transition density"
        )));
    }
    if t > 1.0 - cfg.eps_t {
        return Err(EvaError::InvalidArgument(format!(
            "t {t} beyond the singularity guard"
        )));
    }
    let input = assemble_input(x, t, cond_vec, cfg);
    let input = g.constant(&[1, input.len()], input)?;
    let v = velocity_graph(g, ids, input)?;
    // mean = x + dt * (c1 * v + c2 * x)  with the drift affine in v:
    //   f = v + (g^2/2) (t v - x)/(1 - t) = c1 v + c2 x
    let c1 = 1.0 + 0.5 * gt * gt * t / (1.0 - t);
    let c2 = -0.5 * gt * gt / (1.0 - t);
    let scaled_v = g.mul_scalar(v, dt * c1)?;
    let base: Vec<f64> = x.iter().map(|xi| xi * (1.0 + dt * c2)).collect();
    let base = g.constant(&[1, x.len()], base)?;
    let mean = g.add(base, scaled_v)?;
    let obs = g.constant(&[1, x_next.len()], x_next.to_vec())?;
    g.gauss_log_pdf(mean, obs, gt * dt.sqrt())
}

/// Log-density of one recorded transition under the given parameters.
pub fn step_log_prob(
    x: &GenLatent,
    x_next: &GenLatent,
    t: f64,
    dt: f64,
    cond: &Condition,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    g_sched: &GSchedule,
) -> Result<f64> {
    let cvec = cond.encode(cfg)?;
    let mut g = ComputeGraph::new();
    let ids: Vec<ValueId> = params.tensors().iter().map(|t| g.leaf(t)).collect();
    let out = step_log_prob_graph(
        &mut g,
        &ids,
        x.flat(),
        x_next.flat(),
        t,
        dt,
        &cvec,
        cfg,
        g_sched,
    )?;
    Ok(g.value(out)[0])
}

/// Gaussian transition mean `x + f dt` under the same arithmetic as
/// [`step_log_prob`]; exposed for density cross-checks.
pub fn transition_mean(
    x: &GenLatent,
    t: f64,
    dt: f64,
    cond: &Condition,
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    g_sched: &GSchedule,
) -> Result<Vec<f64>> {
    let cvec = cond.encode(cfg)?;
    let v = velocity(x.flat(), t, &cvec, params, cfg);
    let f = drift(x.flat(), t, &v, g_sched, cfg.eps_t)?;
    Ok(x.flat()
        .iter()
        .zip(&f)
        .map(|(xi, fi)| xi + fi * dt)
        .collect())
}

// --- encode / decode between episodes and latents ---

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Deformation channel value -> rendered length scale, centered so a zero
/// channel means scale 1.
fn deform_scale(channel: f64) -> f64 {
    softplus(channel) / std::f64::consts::LN_2
}

/// Expert episode -> training pair. Joint channels carry the actions,
/// artifact channels are zero (expert data is clean); the condition uses a
/// rest-start history (the pose held for the 4 preceding frames).
pub fn encode_episode(ep: &Episode, cfg: &GenConfig) -> Result<(GenLatent, Condition)> {
    if ep.len() != cfg.horizon {
        return Err(EvaError::ShapeMismatch(format!(
            "episode length {} vs generator horizon {}",
            ep.len(),
            cfg.horizon
        )));
    }
    let mut latent = GenLatent::zeros(cfg.horizon, cfg.latent_width());
    for (t, row) in ep.actions.iter().enumerate() {
        if row.len() != cfg.action_dim {
            return Err(EvaError::ShapeMismatch("action width vs latent".into()));
        }
        for (j, q) in row.iter().enumerate() {
            latent.set(t, j, *q);
        }
    }
    let q_start = ep.actions[0].clone();
    let history = Some([
        q_start.clone(),
        q_start.clone(),
        q_start.clone(),
        q_start.clone(),
    ]);
    Ok((
        latent,
        Condition {
            task_id: ep.task.task_id,
            q_start,
            history,
        },
    ))
}

/// Final latent -> rendered episode. Joint channels are clamped to the
/// joint bounds and become the episode actions; the artifact channels decode
/// to a per-step deformation scale (softplus-centered, scale 1 at zero) and
/// a jitter std `|channel| * u_scale`. The episode-level artifact kind is
/// whichever channel dominates, or none when both stay below the threshold.
pub fn decode_latent(
    latent: &GenLatent,
    task: &TaskSpec,
    arm: &ArmConfig,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Episode> {
    if latent.horizon() != cfg.horizon || latent.width() != cfg.latent_width() {
        return Err(EvaError::ShapeMismatch("latent shape vs config".into()));
    }
    let d = cfg.action_dim;
    let t_len = cfg.horizon;
    let mut actions = Vec::with_capacity(t_len);
    let mut deform_mag = Vec::with_capacity(t_len);
    let mut jitter_mag = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row: Vec<f64> = (0..d)
            .map(|j| latent.get(t, j).clamp(arm.q_min[j], arm.q_max[j]))
            .collect();
        actions.push(row);
        deform_mag.push((deform_scale(latent.get(t, d)) - 1.0).max(0.0));
        jitter_mag.push(latent.get(t, d + 1).abs() * cfg.u_scale);
    }
    let mean_def = deform_mag.iter().sum::<f64>() / t_len as f64;
    let mean_jit = jitter_mag.iter().sum::<f64>() / t_len as f64;
    let (kind, mags) = if mean_def.max(mean_jit) < cfg.artifact_threshold {
        (ArtifactKind::None, None)
    } else if mean_def >= mean_jit {
        (ArtifactKind::Deformation, Some(&deform_mag))
    } else {
        (ArtifactKind::JointJitter, Some(&jitter_mag))
    };

    let mut frames = Vec::with_capacity(t_len);
    for (t, row) in actions.iter().enumerate() {
        let spec = match mags {
            Some(m) if m[t] > 0.0 => ArtifactSpec::new(kind, m[t], [t].into_iter().collect())?,
            _ => ArtifactSpec::none(),
        };
        frames.push(render_frame(row, &spec, t, Some(task.target), arm, seed));
    }

    let artifact = match mags {
        Some(m) => {
            let affected = (0..t_len)
                .filter(|&t| m[t] >= cfg.artifact_threshold)
                .collect();
            ArtifactSpec::new(kind, m.iter().sum::<f64>() / t_len as f64, affected)?
        }
        None => ArtifactSpec::none(),
    };
    Ok(Episode {
        frames,
        actions,
        task: task.clone(),
        artifact,
    })
}

// --- flow-matching training ---

/// Draws the (x0, t) pairs for one batch and assembles the graph inputs.
/// Returns (input rows, target rows).
fn fm_batch_arrays(
    batch: &[(GenLatent, Condition)],
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = StreamRng::new(seed, STREAM_FM);
    let mut inputs = Vec::with_capacity(batch.len() * cfg.input_len());
    let mut targets = Vec::with_capacity(batch.len() * cfg.latent_len());
    for (x1, cond) in batch {
        if x1.horizon() != cfg.horizon || x1.width() != cfg.latent_width() {
            return Err(EvaError::ShapeMismatch("latent shape in batch".into()));
        }
        let t = rng.uniform();
        let mut x0 = vec![0.0; cfg.latent_len()];
        rng.fill_normal(&mut x0);
        let cvec = cond.encode(cfg)?;
        let xt: Vec<f64> = x0
            .iter()
            .zip(x1.flat())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        inputs.extend(assemble_input(&xt, t, &cvec, cfg));
        for (a, b) in x0.iter().zip(x1.flat()) {
            targets.push(b - a);
        }
    }
    Ok((inputs, targets))
}

fn fm_loss_impl(
    batch: &[(GenLatent, Condition)],
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    seed: u64,
    with_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(EvaError::InvalidArgument("empty flow-matching batch".into()));
    }
    let (inputs, targets) = fm_batch_arrays(batch, cfg, seed)?;
    let b = batch.len();
    let tensors = params.tensors();
    let build = |g: &mut ComputeGraph, ids: &[ValueId]| -> Result<ValueId> {
        let input = g.constant(&[b, cfg.input_len()], inputs.clone())?;
        let pred = velocity_graph(g, ids, input)?;
        let tgt = g.constant(&[b, cfg.latent_len()], targets.clone())?;
        let diff = g.sub(tgt, pred)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        g.mul_scalar(s, 1.0 / b as f64)
    };
    if with_grads {
        evaluate_with_gradients(build, &tensors)
    } else {
        let mut g = ComputeGraph::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &ids)?;
        Ok((g.value(out)[0], Vec::new()))
    }
}

/// Mean squared error between the velocity field and the transport vector
/// `x1 - x0` at a random (x0, t) draw per element.
pub fn fm_loss(
    batch: &[(GenLatent, Condition)],
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    seed: u64,
) -> Result<f64> {
    fm_loss_impl(batch, params, cfg, seed, false).map(|(l, _)| l)
}

pub fn fm_loss_grads(
    batch: &[(GenLatent, Condition)],
    params: &VelocityFieldParams,
    cfg: &GenConfig,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    fm_loss_impl(batch, params, cfg, seed, true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_grad_norm: 10.0,
            seed: 0,
        }
    }
}

/// Supervised flow-matching pre-training on expert episodes.
pub fn train_gen(
    dataset: &[(GenLatent, Condition)],
    cfg: &GenConfig,
    train: &GenTrainConfig,
) -> Result<(VelocityFieldParams, Vec<(usize, f64)>)> {
    if dataset.is_empty() {
        return Err(EvaError::InvalidArgument("empty generator dataset".into()));
    }
    let mut params = VelocityFieldParams::init(cfg, train.seed);
    let mut opt = OptimizerState::new(&params.tensors(), train.learning_rate)
        .with_weight_decay(train.weight_decay);
    let mut rng = StreamRng::new(train.seed, 0x6E17);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<(GenLatent, Condition)> = (0..train.batch_size.min(dataset.len()))
            .map(|_| dataset[rng.below(dataset.len())].clone())
            .collect();
        let step_seed = derive_stream(&[train.seed, step as u64]);
        let (loss, mut grads) = fm_loss_grads(&batch, &params, cfg, step_seed)?;
        clip_grad_norm(&mut grads, train.max_grad_norm)?;
        let mut tensors = params.tensors();
        adamw_step(&mut tensors, &grads, &mut opt)?;
        params.set_tensors(tensors);
        losses.push((step, loss));
    }
    Ok((params, losses))
}
