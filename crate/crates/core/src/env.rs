//! Synthetic planar-arm embodiment.
//!
//! A d-joint arm (cumulative-angle chain) rendered into small grayscale
//! frames. The module provides everything the rest of the pipeline treats as
//! "the robot": forward kinematics, frame rendering with optional visual
//! artifacts, scripted minimum-jerk expert demonstrations, dataset
//! generation, artifact injection for reward-validity studies, and
//! safety-limited execution of action sequences.
//!
//! Artifacts corrupt only rendered frames, never the stored ground-truth
//! actions: the failure channel under study is visual artifact -> corrupted
//! action decoding, so the ground truth must stay clean.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{EvaError, Result};
use crate::rng::{derive_stream, StreamRng};

const STREAM_TASK: u64 = 0x11;
const STREAM_START: u64 = 0x22;
const STREAM_JITTER: u64 = 0x33;

/// Arm geometry, limits, and rendering dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmConfig {
    /// Joint count d.
    pub joint_count: usize,
    /// Link lengths, arbitrary length units.
    pub link_lengths: Vec<f64>,
    /// Per-joint position bounds (rad).
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Per-joint velocity limits (rad/s).
    pub v_max: Vec<f64>,
    /// Per-joint acceleration limits (rad/s^2).
    pub a_max: Vec<f64>,
    /// Control interval (s).
    pub dt: f64,
    /// Rendered frame size (pixels).
    pub frame_height: usize,
    pub frame_width: usize,
    /// Frames (= action rows) per episode.
    pub episode_len: usize,
}

impl Default for ArmConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        ArmConfig {
            joint_count: 3,
            link_lengths: vec![1.0, 0.8, 0.6],
            q_min: vec![-PI; 3],
            q_max: vec![PI; 3],
            v_max: vec![1.5; 3],
            a_max: vec![8.0; 3],
            dt: 0.1,
            frame_height: 48,
            frame_width: 48,
            episode_len: 16,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.joint_count;
        if d == 0 {
            return Err(EvaError::InvalidConfig("joint_count must be positive".into()));
        }
        for (name, v) in [
            ("link_lengths", &self.link_lengths),
            ("q_min", &self.q_min),
            ("q_max", &self.q_max),
            ("v_max", &self.v_max),
            ("a_max", &self.a_max),
        ] {
            if v.len() != d {
                return Err(EvaError::InvalidConfig(format!(
                    "{name} has {} entries, expected {d}",
                    v.len()
                )));
            }
        }
        if self
            .link_lengths
            .iter()
            .chain(&self.v_max)
            .chain(&self.a_max)
            .any(|&v| !(v > 0.0))
        {
            return Err(EvaError::InvalidConfig(
                "link lengths and limits must be strictly positive".into(),
            ));
        }
        if self.q_min.iter().zip(&self.q_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(EvaError::InvalidConfig("q_min must be below q_max".into()));
        }
        if !(self.dt > 0.0) {
            return Err(EvaError::InvalidConfig("dt must be positive".into()));
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return Err(EvaError::InvalidConfig(
                "render region must be non-empty".into(),
            ));
        }
        if self.episode_len == 0 {
            return Err(EvaError::InvalidConfig("episode_len must be positive".into()));
        }
        Ok(())
    }

    /// Maximum end-effector distance from the base.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Half-extent of the rendered world window.
    fn view_half_extent(&self) -> f64 {
        self.reach() * 1.08
    }
}

/// The three injected artifact kinds plus the clean case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactKind {
    None,
    /// Rendered link lengths scaled by (1 + magnitude).
    Deformation,
    /// Rendered joint positions displaced by zero-mean noise of std
    /// magnitude (world units), seeded per step.
    JointJitter,
    /// Affected frames show the pose from round(magnitude) steps earlier.
    Discontinuity,
}

impl ArtifactKind {
    pub fn code(self) -> i64 {
        match self {
            ArtifactKind::None => 0,
            ArtifactKind::Deformation => 1,
            ArtifactKind::JointJitter => 2,
            ArtifactKind::Discontinuity => 3,
        }
    }

    pub fn from_code(code: i64) -> Result<Self> {
        Ok(match code {
            0 => ArtifactKind::None,
            1 => ArtifactKind::Deformation,
            2 => ArtifactKind::JointJitter,
            3 => ArtifactKind::Discontinuity,
            other => {
                return Err(EvaError::InvalidArgument(format!(
                    "unknown artifact kind code {other}"
                )))
            }
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            ArtifactKind::None => "none",
            ArtifactKind::Deformation => "deformation",
            ArtifactKind::JointJitter => "joint_jitter",
            ArtifactKind::Discontinuity => "discontinuity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub magnitude: f64,
    pub affected_steps: BTreeSet<usize>,
}

impl ArtifactSpec {
    pub fn none() -> Self {
        ArtifactSpec {
            kind: ArtifactKind::None,
            magnitude: 0.0,
            affected_steps: BTreeSet::new(),
        }
    }

    pub fn new(
        kind: ArtifactKind,
        magnitude: f64,
        affected_steps: BTreeSet<usize>,
    ) -> Result<Self> {
        if !(magnitude >= 0.0) {
            return Err(EvaError::InvalidArgument(format!(
                "artifact magnitude must be non-negative, got {magnitude}"
            )));
        }
        // magnitude == 0 exactly when kind == None
        if (magnitude == 0.0) != (kind == ArtifactKind::None) {
            return Err(EvaError::InvalidArgument(format!(
                "artifact kind {} with magnitude {magnitude}",
                kind.label()
            )));
        }
        Ok(ArtifactSpec {
            kind,
            magnitude,
            affected_steps,
        })
    }

    fn affects(&self, step: usize) -> bool {
        self.kind != ArtifactKind::None && self.affected_steps.contains(&step)
    }
}

/// Grayscale frame with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(EvaError::ShapeMismatch(format!(
                "frame {height}x{width} vs {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EvaError::InvalidArgument(
                "frame pixel outside [0, 1]".into(),
            ));
        }
        Ok(Frame {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Brightness-weighted pixel centroid (row, col); None for a black frame.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mass: f64 = self.pixels.iter().sum();
        if mass <= 0.0 {
            return None;
        }
        let mut r = 0.0;
        let mut c = 0.0;
        for row in 0..self.height {
            for col in 0..self.width {
                let p = self.get(row, col);
                r += p * row as f64;
                c += p * col as f64;
            }
        }
        Some((r / mass, c / mass))
    }
}

/// Desk-scale stand-in for a language instruction: reach the target point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub target: [f64; 2],
    pub success_radius: f64,
}

impl TaskSpec {
    pub fn validate(&self, config: &ArmConfig) -> Result<()> {
        let dist = (self.target[0].powi(2) + self.target[1].powi(2)).sqrt();
        if dist > config.reach() {
            return Err(EvaError::InvalidArgument(format!(
                "target at distance {dist:.3} exceeds reach {:.3}",
                config.reach()
            )));
        }
        if !(self.success_radius > 0.0) {
            return Err(EvaError::InvalidArgument(
                "success_radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One rendered frame sequence with its per-step joint commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    /// T rows of d joint position commands (rad).
    pub actions: Vec<Vec<f64>>,
    pub task: TaskSpec,
    pub artifact: ArtifactSpec,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, config: &ArmConfig) -> Result<()> {
        if self.frames.len() != self.actions.len() {
            return Err(EvaError::InvalidArgument(format!(
                "{} frames vs {} action rows",
                self.frames.len(),
                self.actions.len()
            )));
        }
        for row in &self.actions {
            if row.len() != config.joint_count {
                return Err(EvaError::ShapeMismatch(format!(
                    "action row width {} vs joint count {}",
                    row.len(),
                    config.joint_count
                )));
            }
        }
        Ok(())
    }

    /// Expert data additionally keeps every command inside the joint bounds.
    pub fn validate_expert(&self, config: &ArmConfig) -> Result<()> {
        self.validate(config)?;
        for row in &self.actions {
            for (j, q) in row.iter().enumerate() {
                if *q < config.q_min[j] || *q > config.q_max[j] {
                    return Err(EvaError::InvalidArgument(format!(
                        "expert action {q:.4} outside bounds for joint {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HaltReason {
    VelocityLimit,
    AccelerationLimit,
    JointBound,
}

impl HaltReason {
    pub fn label(self) -> &'static str {
        match self {
            HaltReason::VelocityLimit => "velocity_limit",
            HaltReason::AccelerationLimit => "acceleration_limit",
            HaltReason::JointBound => "joint_bound",
        }
    }
}

/// Outcome of executing an action sequence under safety limits.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionReport {
    pub executed_steps: usize,
    pub halted: bool,
    pub halt_reason: Option<HaltReason>,
    pub success: bool,
    pub final_state: Vec<f64>,
}

/// Positions of every joint (link endpoints) for configuration `q`, with
/// angles summed cumulatively from the base.
pub fn forward_kinematics(q: &[f64], config: &ArmConfig) -> Vec<[f64; 2]> {
    fk_with_links(q, &config.link_lengths)
}

fn fk_with_links(q: &[f64], links: &[f64]) -> Vec<[f64; 2]> {
    assert_eq!(q.len(), links.len(), "joint/link count mismatch");
    let mut angle = 0.0;
    let mut pos = [0.0, 0.0];
    let mut out = Vec::with_capacity(q.len());
    for (qi, li) in q.iter().zip(links) {
        angle += qi;
        pos = [pos[0] + li * angle.cos(), pos[1] + li * angle.sin()];
        out.push(pos);
    }
    out
}

/// End-effector position for configuration `q`.
pub fn end_effector(q: &[f64], config: &ArmConfig) -> [f64; 2] {
    *forward_kinematics(q, config).last().expect("d >= 1")
}

fn world_to_pixel(p: [f64; 2], config: &ArmConfig) -> (f64, f64) {
    let ext = config.view_half_extent();
    let col = (p[0] / ext * 0.5 + 0.5) * (config.frame_width - 1) as f64;
    let row = (0.5 - p[1] / ext * 0.5) * (config.frame_height - 1) as f64;
    (row, col)
}

fn dist_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let ab2 = abx * abx + aby * aby;
    let t = if ab2 > 0.0 {
        ((apx * abx + apy * aby) / ab2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

struct Canvas {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Canvas {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    fn blend(&mut self, row: usize, col: usize, v: f64) {
        let p = &mut self.pixels[row * self.width + col];
        *p = p.max(v.clamp(0.0, 1.0));
    }

    fn for_box<F: Fn(f64, f64) -> f64>(
        &mut self,
        lo: (f64, f64),
        hi: (f64, f64),
        pad: f64,
        cover: F,
    ) {
        let r0 = ((lo.0.min(hi.0) - pad).floor().max(0.0)) as usize;
        let r1 = ((lo.0.max(hi.0) + pad).ceil().max(0.0) as usize)
            .min(self.height.saturating_sub(1));
        let c0 = ((lo.1.min(hi.1) - pad).floor().max(0.0)) as usize;
        let c1 = ((lo.1.max(hi.1) + pad).ceil().max(0.0) as usize)
            .min(self.width.saturating_sub(1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let v = cover(r as f64, c as f64);
                if v > 0.0 {
                    self.blend(r, c, v);
                }
            }
        }
    }

    /// Anti-aliased segment of total width 2 px.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64)) {
        self.for_box(a, b, 2.0, |r, c| 1.5 - dist_point_segment((r, c), a, b));
    }

    fn disc(&mut self, center: (f64, f64), radius: f64) {
        self.for_box(center, center, radius + 1.5, |r, c| {
            let d = ((r - center.0).powi(2) + (c - center.1).powi(2)).sqrt();
            radius + 0.5 - d
        });
    }

    fn ring(&mut self, center: (f64, f64), radius: f64) {
        self.for_box(center, center, radius + 1.5, |r, c| {
            let d = ((r - center.0).powi(2) + (c - center.1).powi(2)).sqrt();
            1.0 - (d - radius).abs()
        });
    }

    fn into_frame(self) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            pixels: self.pixels,
        }
    }
}

/// Rasterizes the arm at configuration `q` plus an optional target marker.
///
/// Deformation scales rendered link lengths by `(1 + magnitude)` on affected
/// steps; joint jitter displaces rendered joint positions by zero-mean
/// Gaussian noise of std `magnitude`, seeded per `(seed, step)`.
/// Discontinuity has no per-frame effect here: pose substitution is applied
/// by the episode-level callers that hold the action history.
pub fn render_frame(
    q: &[f64],
    artifact: &ArtifactSpec,
    step: usize,
    target: Option<[f64; 2]>,
    config: &ArmConfig,
    seed: u64,
) -> Frame {
    let links: Vec<f64> = if artifact.kind == ArtifactKind::Deformation && artifact.affects(step) {
        config
            .link_lengths
            .iter()
            .map(|l| l * (1.0 + artifact.magnitude))
            .collect()
    } else {
        config.link_lengths.clone()
    };
    let mut points = vec![[0.0, 0.0]];
    points.extend(fk_with_links(q, &links));

    if artifact.kind == ArtifactKind::JointJitter && artifact.affects(step) {
        let mut rng = StreamRng::new(seed, derive_stream(&[STREAM_JITTER, step as u64]));
        for p in points.iter_mut().skip(1) {
            p[0] += artifact.magnitude * rng.normal();
            p[1] += artifact.magnitude * rng.normal();
        }
    }

    let mut canvas = Canvas::new(config.frame_height, config.frame_width);
    if let Some(t) = target {
        canvas.ring(world_to_pixel(t, config), 3.0);
    }
    for w in points.windows(2) {
        canvas.segment(world_to_pixel(w[0], config), world_to_pixel(w[1], config));
    }
    let ee = *points.last().expect("at least one link");
    canvas.disc(world_to_pixel(ee, config), 2.0);
    canvas.into_frame()
}

/// Renders a full action sequence, applying discontinuity pose substitution
/// on affected steps.
pub fn render_episode_frames(
    actions: &[Vec<f64>],
    artifact: &ArtifactSpec,
    target: Option<[f64; 2]>,
    config: &ArmConfig,
    seed: u64,
) -> Vec<Frame> {
    let lag = artifact.magnitude.round() as usize;
    actions
        .iter()
        .enumerate()
        .map(|(step, q)| {
            let pose = if artifact.kind == ArtifactKind::Discontinuity && artifact.affects(step) {
                &actions[step.saturating_sub(lag)]
            } else {
                q
            };
            render_frame(pose, artifact, step, target, config, seed)
        })
        .collect()
}

/// Smooth 0 -> 1 ramp `10 tau^3 - 15 tau^4 + 6 tau^5` with zero velocity and
/// acceleration at both ends.
pub fn min_jerk_profile(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvaError::InvalidArgument(format!(
            "tau {tau} outside [0, 1]"
        )));
    }
    Ok(tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau)))
}

/// Per-joint interpolation from `start` to `goal` along the minimum-jerk
/// profile, sampled at `steps` points.
pub fn plan_min_jerk(start: &[f64], goal: &[f64], steps: usize) -> Vec<Vec<f64>> {
    assert_eq!(start.len(), goal.len());
    assert!(steps >= 1);
    (0..steps)
        .map(|t| {
            let tau = if steps == 1 {
                1.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            let s = min_jerk_profile(tau).expect("tau in range");
            start
                .iter()
                .zip(goal)
                .map(|(a, b)| a + (b - a) * s)
                .collect()
        })
        .collect()
}

/// Both elbow branches of planar two-link IK for link lengths (a, b).
fn ik_two_link(target: [f64; 2], a: f64, b: f64) -> Option<[[f64; 2]; 2]> {
    let r2 = target[0] * target[0] + target[1] * target[1];
    let cos_q2 = (r2 - a * a - b * b) / (2.0 * a * b);
    if cos_q2.abs() > 1.0 + 1e-9 {
        return None;
    }
    let q2 = cos_q2.clamp(-1.0, 1.0).acos();
    let base = target[1].atan2(target[0]);
    let mut out = [[0.0; 2]; 2];
    for (i, s) in [1.0f64, -1.0].iter().enumerate() {
        let q2s = s * q2;
        let q1 = base - (b * q2s.sin()).atan2(a + b * q2s.cos());
        out[i] = [wrap_angle(q1), q2s];
    }
    Some(out)
}

fn wrap_angle(q: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (q + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        w = PI;
    }
    w
}

// Peak |s'| and |s''| of the minimum-jerk profile on [0, 1].
const MIN_JERK_PEAK_VEL: f64 = 1.875;
const MIN_JERK_PEAK_ACC: f64 = 5.7735;
const LIMIT_SAFETY: f64 = 0.9;

/// Largest |goal - start| per joint that keeps a T-step minimum-jerk ramp
/// inside the velocity and acceleration limits with margin.
fn delta_budget(config: &ArmConfig, steps: usize) -> Vec<f64> {
    let duration = (steps.max(2) - 1) as f64 * config.dt;
    (0..config.joint_count)
        .map(|j| {
            let by_vel = config.v_max[j] * LIMIT_SAFETY * duration / MIN_JERK_PEAK_VEL;
            let by_acc = config.a_max[j] * LIMIT_SAFETY * duration * duration / MIN_JERK_PEAK_ACC;
            by_vel.min(by_acc)
        })
        .collect()
}

/// Goal configuration whose end effector sits exactly on `target`: the first
/// two joints solve two-link IK with the remaining links held straight
/// (joint angles 0), picking the elbow branch closest to `start` in L2.
fn solve_goal(start: &[f64], target: [f64; 2], config: &ArmConfig) -> Result<Vec<f64>> {
    let a = config.link_lengths[0];
    let b: f64 = config.link_lengths[1..].iter().sum();
    let branches = ik_two_link(target, a, b).ok_or_else(|| {
        EvaError::InvalidArgument(format!(
            "target ({:.3}, {:.3}) outside the reachable annulus [{:.3}, {:.3}]",
            target[0],
            target[1],
            (a - b).abs(),
            a + b
        ))
    })?;
    let pick = branches
        .iter()
        .min_by(|x, y| {
            let dx = (x[0] - start[0]).powi(2) + (x[1] - start[1]).powi(2);
            let dy = (y[0] - start[0]).powi(2) + (y[1] - start[1]).powi(2);
            dx.partial_cmp(&dy).expect("finite angles")
        })
        .expect("two branches");
    let mut goal = vec![0.0; config.joint_count];
    goal[0] = pick[0];
    goal[1] = pick[1];
    Ok(goal)
}

/// Scripted smooth reaching demonstration: sample a start configuration,
/// solve IK for the goal, interpolate along the minimum-jerk profile, and
/// render artifact-free frames. The resulting sequence respects the
/// velocity and acceleration limits; if a check still fails the plan is
/// regenerated over a longer horizon.
pub fn generate_expert_episode(task: &TaskSpec, config: &ArmConfig, seed: u64) -> Result<Episode> {
    config.validate()?;
    task.validate(config)?;
    if config.joint_count < 2 {
        return Err(EvaError::InvalidConfig(
            "expert generation needs at least two joints".into(),
        ));
    }

    let mut rng = StreamRng::new(seed, STREAM_START);
    let mut start: Vec<f64> = (0..config.joint_count)
        .map(|j| rng.uniform_in(config.q_min[j] * 0.7, config.q_max[j] * 0.7))
        .collect();
    let goal = solve_goal(&start, task.target, config)?;

    // Pull the start toward the goal until the minimum-jerk ramp fits the
    // limits at the configured episode length.
    let budget = delta_budget(config, config.episode_len);
    for j in 0..config.joint_count {
        let delta = start[j] - goal[j];
        if delta.abs() > budget[j] {
            start[j] = goal[j] + delta.signum() * budget[j];
        }
    }

    let mut steps = config.episode_len;
    loop {
        let actions = plan_min_jerk(&start, &goal, steps);
        if limit_violation(&actions, config).is_none() {
            let frames = render_episode_frames(
                &actions,
                &ArtifactSpec::none(),
                Some(task.target),
                config,
                seed,
            );
            let episode = Episode {
                frames,
                actions,
                task: task.clone(),
                artifact: ArtifactSpec::none(),
            };
            episode.validate_expert(config)?;
            return Ok(episode);
        }
        steps *= 2;
        if steps > config.episode_len * 16 {
            return Err(EvaError::InvalidArgument(
                "could not fit demonstration inside limits".into(),
            ));
        }
    }
}

/// First (step, reason) at which the sequence violates a limit, treating the
/// first row as the resting initial pose.
fn limit_violation(actions: &[Vec<f64>], config: &ArmConfig) -> Option<(usize, HaltReason)> {
    let dt = config.dt;
    for (t, row) in actions.iter().enumerate() {
        for j in 0..config.joint_count {
            if row[j] < config.q_min[j] || row[j] > config.q_max[j] {
                return Some((t, HaltReason::JointBound));
            }
            if t >= 1 {
                let v = (row[j] - actions[t - 1][j]) / dt;
                if v.abs() > config.v_max[j] {
                    return Some((t, HaltReason::VelocityLimit));
                }
            }
            if t >= 2 {
                let acc = (row[j] - 2.0 * actions[t - 1][j] + actions[t - 2][j]) / (dt * dt);
                if acc.abs() > config.a_max[j] {
                    return Some((t, HaltReason::AccelerationLimit));
                }
            }
        }
    }
    None
}

/// Uniformly samples a reachable target in the annulus the IK can solve.
pub fn sample_task(task_id: usize, config: &ArmConfig, seed: u64) -> TaskSpec {
    let a = config.link_lengths[0];
    let b: f64 = config.link_lengths[1..].iter().sum();
    let r_lo = ((a - b).abs() * 1.15).max(0.25 * config.reach());
    let r_hi = 0.92 * config.reach();
    let mut rng = StreamRng::new(seed, derive_stream(&[STREAM_TASK, task_id as u64]));
    let r = rng.uniform_in(r_lo, r_hi);
    let phi = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    TaskSpec {
        task_id,
        target: [r * phi.cos(), r * phi.sin()],
        success_radius: 0.1,
    }
}

/// Expert demonstrations for `n_tasks` sampled tasks, `episodes_per_task`
/// each, deterministically derived from `seed`.
pub fn generate_dataset(
    n_tasks: usize,
    episodes_per_task: usize,
    config: &ArmConfig,
    seed: u64,
) -> Result<Vec<Episode>> {
    if n_tasks == 0 || episodes_per_task == 0 {
        return Err(EvaError::InvalidArgument(
            "dataset counts must be positive".into(),
        ));
    }
    let mut episodes = Vec::with_capacity(n_tasks * episodes_per_task);
    for task_id in 0..n_tasks {
        let task = sample_task(task_id, config, seed);
        for e in 0..episodes_per_task {
            let ep_seed = derive_stream(&[seed, task_id as u64, e as u64]);
            let episode = generate_expert_episode(&task, config, ep_seed)?;
            if episode.len() != config.episode_len {
                return Err(EvaError::InvalidArgument(format!(
                    "episode for task {task_id} required {} steps, config allows {}",
                    episode.len(),
                    config.episode_len
                )));
            }
            episodes.push(episode);
        }
    }
    Ok(episodes)
}

/// Steps through joint position commands, halting at the first velocity,
/// acceleration, or bound violation. Success means completing every step
/// and ending with the end effector inside the task's success radius.
pub fn execute_actions(
    actions: &[Vec<f64>],
    task: &TaskSpec,
    config: &ArmConfig,
) -> ExecutionReport {
    if actions.is_empty() {
        return ExecutionReport {
            executed_steps: 0,
            halted: false,
            halt_reason: None,
            success: false,
            final_state: vec![0.0; config.joint_count],
        };
    }
    for row in actions {
        assert_eq!(row.len(), config.joint_count, "action row width");
    }
    if let Some((step, reason)) = limit_violation(actions, config) {
        let last = if step == 0 { 0 } else { step - 1 };
        return ExecutionReport {
            executed_steps: step,
            halted: true,
            halt_reason: Some(reason),
            success: false,
            final_state: actions[last].clone(),
        };
    }
    let final_state = actions.last().expect("nonempty").clone();
    let ee = end_effector(&final_state, config);
    let dist = ((ee[0] - task.target[0]).powi(2) + (ee[1] - task.target[1]).powi(2)).sqrt();
    ExecutionReport {
        executed_steps: actions.len(),
        halted: false,
        halt_reason: None,
        success: dist <= task.success_radius,
        final_state,
    }
}

/// Re-renders the affected frames of an expert episode with a visual
/// artifact. Actions are left untouched: the artifact corrupts only what
/// the IDM sees.
pub fn inject_artifacts(
    episode: &Episode,
    spec: &ArtifactSpec,
    config: &ArmConfig,
    seed: u64,
) -> Result<Episode> {
    if spec.kind == ArtifactKind::None || spec.magnitude == 0.0 {
        return Err(EvaError::InvalidArgument(
            "inject_artifacts requires an artifact kind with positive magnitude".into(),
        ));
    }
    if let Some(&bad) = spec.affected_steps.iter().find(|&&s| s >= episode.len()) {
        return Err(EvaError::InvalidArgument(format!(
            "affected step {bad} outside episode of length {}",
            episode.len()
        )));
    }
    let mut out = episode.clone();
    out.artifact = spec.clone();
    let lag = spec.magnitude.round() as usize;
    for &step in &spec.affected_steps {
        let pose = if spec.kind == ArtifactKind::Discontinuity {
            &episode.actions[step.saturating_sub(lag)]
        } else {
            &episode.actions[step]
        };
        out.frames[step] = render_frame(pose, spec, step, Some(episode.task.target), config, seed);
    }
    Ok(out)
}

// --- dataset container I/O ---

pub fn save_dataset(episodes: &[Episode], config: &ArmConfig, path: &Path) -> Result<()> {
    let mut c = Container::new();
    c.put_i64s(
        "meta",
        vec![
            episodes.len() as i64,
            config.episode_len as i64,
            config.frame_height as i64,
            config.frame_width as i64,
            config.joint_count as i64,
        ],
    );
    for (i, ep) in episodes.iter().enumerate() {
        let t = ep.len();
        let (h, w) = (config.frame_height, config.frame_width);
        let mut frames = Vec::with_capacity(t * h * w);
        for f in &ep.frames {
            frames.extend_from_slice(f.pixels());
        }
        c.put_f64s(&format!("ep{i}/frames"), &[t, h, w], frames);
        let mut actions = Vec::with_capacity(t * config.joint_count);
        for row in &ep.actions {
            actions.extend_from_slice(row);
        }
        c.put_f64s(&format!("ep{i}/actions"), &[t, config.joint_count], actions);
        c.put_f64s(
            &format!("ep{i}/task"),
            &[4],
            vec![
                ep.task.task_id as f64,
                ep.task.target[0],
                ep.task.target[1],
                ep.task.success_radius,
            ],
        );
        c.put_f64s(
            &format!("ep{i}/artifact"),
            &[2],
            vec![ep.artifact.kind.code() as f64, ep.artifact.magnitude],
        );
    }
    c.save(path)
}

pub fn load_dataset(path: &Path, config: &ArmConfig) -> Result<Vec<Episode>> {
    let c = Container::load(path)?;
    let meta = c.i64s("meta")?;
    if meta.len() != 5 {
        return Err(EvaError::Checkpoint("dataset meta record malformed".into()));
    }
    let n = meta[0] as usize;
    let (t, h, w, d) = (
        meta[1] as usize,
        meta[2] as usize,
        meta[3] as usize,
        meta[4] as usize,
    );
    if h != config.frame_height || w != config.frame_width || d != config.joint_count {
        return Err(EvaError::InvalidConfig(format!(
            "dataset geometry {h}x{w} d={d} does not match config"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let frames_flat = c.f64s(&format!("ep{i}/frames"))?;
        let actions_flat = c.f64s(&format!("ep{i}/actions"))?;
        let task_rec = c.f64s(&format!("ep{i}/task"))?;
        let art_rec = c.f64s(&format!("ep{i}/artifact"))?;
        if frames_flat.len() != t * h * w || actions_flat.len() != t * d || task_rec.len() != 4 {
            return Err(EvaError::Checkpoint(format!("episode {i} records malformed")));
        }
        let frames = (0..t)
            .map(|s| Frame::new(h, w, frames_flat[s * h * w..(s + 1) * h * w].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let actions = (0..t)
            .map(|s| actions_flat[s * d..(s + 1) * d].to_vec())
            .collect();
        let kind = ArtifactKind::from_code(art_rec[0] as i64)?;
        let artifact = if kind == ArtifactKind::None {
            ArtifactSpec::none()
        } else {
            ArtifactSpec::new(kind, art_rec[1], BTreeSet::new())?
        };
        out.push(Episode {
            frames,
            actions,
            task: TaskSpec {
                task_id: task_rec[0] as usize,
                target: [task_rec[1], task_rec[2]],
                success_radius: task_rec[3],
            },
            artifact,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_link_config() -> ArmConfig {
        ArmConfig {
            joint_count: 2,
            link_lengths: vec![1.0, 1.0],
            q_min: vec![-PI; 2],
            q_max: vec![PI; 2],
            v_max: vec![1.5; 2],
            a_max: vec![8.0; 2],
            ..ArmConfig::default()
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fk_straight_arm() {
        let cfg = two_link_config();
        let pts = forward_kinematics(&[0.0, 0.0], &cfg);
        assert!(close(pts[0][0], 1.0, 1e-12) && close(pts[0][1], 0.0, 1e-12));
        assert!(close(pts[1][0], 2.0, 1e-12) && close(pts[1][1], 0.0, 1e-12));
    }

    #[test]
    fn fk_quarter_turn() {
        let cfg = two_link_config();
        let pts = forward_kinematics(&[PI / 2.0, 0.0], &cfg);
        assert!(close(pts[0][0], 0.0, 1e-12) && close(pts[0][1], 1.0, 1e-12));
        assert!(close(pts[1][0], 0.0, 1e-12) && close(pts[1][1], 2.0, 1e-12));
    }

    #[test]
    fn fk_cumulative_angles() {
        let cfg = two_link_config();
        let pts = forward_kinematics(&[PI / 2.0, -PI / 2.0], &cfg);
        assert!(close(pts[0][0], 0.0, 1e-12) && close(pts[0][1], 1.0, 1e-12));
        assert!(close(pts[1][0], 1.0, 1e-12) && close(pts[1][1], 1.0, 1e-12));
    }

    #[test]
    fn fk_stays_within_reach() {
        let cfg = ArmConfig::default();
        let mut rng = StreamRng::new(99, 0);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| rng.uniform_in(-PI, PI)).collect();
            let ee = end_effector(&q, &cfg);
            let dist = (ee[0] * ee[0] + ee[1] * ee[1]).sqrt();
            assert!(dist <= cfg.reach() + 1e-9, "distance {dist}");
        }
    }

    #[test]
    fn min_jerk_endpoints_and_midpoint() {
        assert_eq!(min_jerk_profile(0.0).unwrap(), 0.0);
        assert_eq!(min_jerk_profile(1.0).unwrap(), 1.0);
        assert!(close(min_jerk_profile(0.5).unwrap(), 0.5, 1e-12));
        assert!(close(min_jerk_profile(0.25).unwrap(), 0.103515625, 1e-12));
        assert!(min_jerk_profile(-0.1).is_err());
        assert!(min_jerk_profile(1.1).is_err());
    }

    #[test]
    fn min_jerk_monotone_with_flat_ends() {
        let h = 1e-4;
        let mut prev = 0.0;
        for i in 0..=256 {
            let tau = i as f64 / 256.0;
            let s = min_jerk_profile(tau).unwrap();
            assert!(s + 1e-12 >= prev, "profile decreased at {tau}");
            prev = s;
        }
        // first/second derivative ~ 0 at both endpoints
        for t in [0.0f64, 1.0] {
            let f = |x: f64| min_jerk_profile(x.clamp(0.0, 1.0)).unwrap();
            let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
            let d2 = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
            assert!(d1.abs() < 1e-3, "slope {d1} at {t}");
            assert!(d2.abs() < 1e-3, "curvature {d2} at {t}");
        }
    }

    #[test]
    fn plan_with_equal_endpoints_is_constant() {
        let start = vec![0.3, -0.2, 0.1];
        let rows = plan_min_jerk(&start, &start, 16);
        assert_eq!(rows.len(), 16);
        for row in &rows {
            assert_eq!(row, &start);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = ArmConfig::default();
        let art = ArtifactSpec::new(
            ArtifactKind::JointJitter,
            0.1,
            [3usize].into_iter().collect(),
        )
        .unwrap();
        let q = [0.4, -0.3, 0.2];
        let a = render_frame(&q, &art, 3, Some([1.0, 0.5]), &cfg, 42);
        let b = render_frame(&q, &art, 3, Some([1.0, 0.5]), &cfg, 42);
        assert_eq!(a, b);
        // a different seed moves the jittered joints
        let c = render_frame(&q, &art, 3, Some([1.0, 0.5]), &cfg, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn deformation_pushes_centroid_outward() {
        let cfg = ArmConfig::default();
        let q = [0.9, 0.3, -0.2];
        let clean = render_frame(&q, &ArtifactSpec::none(), 0, None, &cfg, 1);
        let art = ArtifactSpec::new(
            ArtifactKind::Deformation,
            0.5,
            [0usize].into_iter().collect(),
        )
        .unwrap();
        let deformed = render_frame(&q, &art, 0, None, &cfg, 1);
        let base = world_to_pixel([0.0, 0.0], &cfg);
        let dist = |f: &Frame| {
            let (r, c) = f.centroid().unwrap();
            ((r - base.0).powi(2) + (c - base.1).powi(2)).sqrt()
        };
        assert!(
            dist(&deformed) > dist(&clean),
            "deformed {} vs clean {}",
            dist(&deformed),
            dist(&clean)
        );
    }

    #[test]
    fn zero_render_region_rejected() {
        let cfg = ArmConfig {
            frame_height: 0,
            ..ArmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn artifact_spec_invariant() {
        assert!(ArtifactSpec::new(ArtifactKind::Deformation, 0.0, BTreeSet::new()).is_err());
        assert!(ArtifactSpec::new(ArtifactKind::None, 0.3, BTreeSet::new()).is_err());
        assert!(ArtifactSpec::new(ArtifactKind::None, 0.0, BTreeSet::new()).is_ok());
    }

    #[test]
    fn expert_episode_round_trips_through_execution() {
        let cfg = ArmConfig::default();
        for task_id in 0..4 {
            let task = sample_task(task_id, &cfg, 7);
            let ep = generate_expert_episode(&task, &cfg, 100 + task_id as u64).unwrap();
            assert_eq!(ep.len(), cfg.episode_len);
            let report = execute_actions(&ep.actions, &task, &cfg);
            assert!(!report.halted, "halted: {:?}", report.halt_reason);
            assert!(report.success, "expert episode should reach target");
        }
    }

    #[test]
    fn expert_episode_is_deterministic() {
        let cfg = ArmConfig::default();
        let task = sample_task(0, &cfg, 5);
        let a = generate_expert_episode(&task, &cfg, 9).unwrap();
        let b = generate_expert_episode(&task, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn velocity_violation_halts_with_reason() {
        let cfg = ArmConfig::default();
        let task = sample_task(0, &cfg, 5);
        let ep = generate_expert_episode(&task, &cfg, 11).unwrap();
        let mut actions = ep.actions.clone();
        // jump by 10x the per-step velocity budget at step 8
        actions[8][0] = actions[7][0] + 10.0 * cfg.v_max[0] * cfg.dt;
        let report = execute_actions(&actions, &task, &cfg);
        assert!(report.halted);
        assert_eq!(report.halt_reason, Some(HaltReason::VelocityLimit));
        assert_eq!(report.executed_steps, 8);
        assert!(!report.success);
    }

    #[test]
    fn empty_sequence_reports_zero_steps() {
        let cfg = ArmConfig::default();
        let task = sample_task(0, &cfg, 5);
        let report = execute_actions(&[], &task, &cfg);
        assert_eq!(report.executed_steps, 0);
        assert!(!report.success);
        assert!(!report.halted);
    }

    #[test]
    fn discontinuity_rewinds_affected_frames() {
        let cfg = ArmConfig::default();
        let task = sample_task(1, &cfg, 5);
        let ep = generate_expert_episode(&task, &cfg, 13).unwrap();
        let spec = ArtifactSpec::new(
            ArtifactKind::Discontinuity,
            3.0,
            (5..=8).collect::<BTreeSet<_>>(),
        )
        .unwrap();
        let injected = inject_artifacts(&ep, &spec, &cfg, 13).unwrap();
        for s in 5..=8usize {
            assert_eq!(injected.frames[s], ep.frames[s - 3], "frame {s}");
        }
        // unaffected steps bit-identical, actions untouched
        for s in (0..5).chain(9..ep.len()) {
            assert_eq!(injected.frames[s], ep.frames[s]);
        }
        assert_eq!(injected.actions, ep.actions);
    }

    #[test]
    fn inject_rejects_bad_specs() {
        let cfg = ArmConfig::default();
        let task = sample_task(1, &cfg, 5);
        let ep = generate_expert_episode(&task, &cfg, 13).unwrap();
        let out_of_range = ArtifactSpec::new(
            ArtifactKind::Deformation,
            0.5,
            [99usize].into_iter().collect(),
        )
        .unwrap();
        assert!(inject_artifacts(&ep, &out_of_range, &cfg, 1).is_err());
        assert!(inject_artifacts(&ep, &ArtifactSpec::none(), &cfg, 1).is_err());
    }

    #[test]
    fn dataset_generation_and_io_round_trip() {
        let cfg = ArmConfig::default();
        let eps = generate_dataset(2, 3, &cfg, 21).unwrap();
        assert_eq!(eps.len(), 6);
        for ep in &eps {
            ep.validate_expert(&cfg).unwrap();
        }
        let dir = std::env::temp_dir().join("eva-env-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.eva1");
        save_dataset(&eps, &cfg, &path).unwrap();
        let back = load_dataset(&path, &cfg).unwrap();
        assert_eq!(back, eps);
    }

    #[test]
    fn dataset_file_is_byte_deterministic() {
        let cfg = ArmConfig::default();
        let dir = std::env::temp_dir().join("eva-env-test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("d1.eva1"), dir.join("d2.eva1"));
        let e1 = generate_dataset(1, 2, &cfg, 3).unwrap();
        let e2 = generate_dataset(1, 2, &cfg, 3).unwrap();
        save_dataset(&e1, &cfg, &p1).unwrap();
        save_dataset(&e2, &cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn sampled_tasks_are_solvable() {
        let cfg = ArmConfig::default();
        for id in 0..20 {
            let task = sample_task(id, &cfg, 1234);
            task.validate(&cfg).unwrap();
            let a = cfg.link_lengths[0];
            let b: f64 = cfg.link_lengths[1..].iter().sum();
            assert!(ik_two_link(task.target, a, b).is_some(), "task {id}");
        }
    }
}
