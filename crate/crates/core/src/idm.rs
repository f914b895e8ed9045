//! Inverse dynamics model: a temporal window of frames -> the action at the
//! window center.
//!
//! Architecture: two strided 3x3 conv layers (window frames stacked along
//! the channel dimension), ReLU after each, then per-channel spatial softmax
//! producing one expected 2-D keypoint per channel, then an MLP from the
//! concatenated keypoints to the d joint commands. An ablation variant
//! replaces the spatial softmax with global average pooling.
//!
//! Targets are standardized per joint during training; the de-standardizing
//! affine lives inside the forward graph, so the model always emits actions
//! in radians. Trained once on expert data, then frozen as the reward's
//! action decoder.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::env::{ArmConfig, Episode, Frame};
use crate::error::{EvaError, Result};
use crate::graph::{evaluate_with_gradients, ComputeGraph, ValueId};
use crate::optim::{adamw_step, clip_grad_norm, OptimizerState};
use crate::rng::{derive_stream, StreamRng};
use crate::tensor::Tensor;

const CONV1_OUT: usize = 8;
const HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdmVariant {
    SpatialSoftmax,
    GlobalAvgPool,
}

impl IdmVariant {
    fn code(self) -> i64 {
        match self {
            IdmVariant::SpatialSoftmax => 0,
            IdmVariant::GlobalAvgPool => 1,
        }
    }

    fn from_code(code: i64) -> Result<Self> {
        match code {
            0 => Ok(IdmVariant::SpatialSoftmax),
            1 => Ok(IdmVariant::GlobalAvgPool),
            other => Err(EvaError::Checkpoint(format!(
                "unknown IDM variant code {other}"
            ))),
        }
    }
}

/// Conv + head parameters plus the per-joint action standardization the
/// head was trained under.
#[derive(Debug, Clone)]
pub struct IdmParams {
    pub variant: IdmVariant,
    /// Temporal context radius k: windows hold 2k+1 frames.
    pub context_radius: usize,
    pub channels: usize,
    pub action_dim: usize,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
    action_mean: Vec<f64>,
    action_std: Vec<f64>,
}

impl IdmParams {
    /// Freshly initialized model. The head starts at zero so an untrained
    /// model predicts exactly the standardization mean (zero by default).
    pub fn init(
        variant: IdmVariant,
        context_radius: usize,
        channels: usize,
        action_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = StreamRng::new(seed, 0x1D3);
        let in_ch = 2 * context_radius + 1;
        let head_in = match variant {
            IdmVariant::SpatialSoftmax => 2 * channels,
            IdmVariant::GlobalAvgPool => channels,
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        IdmParams {
            variant,
            context_radius,
            channels,
            action_dim,
            conv1_w: Tensor::randn(&[CONV1_OUT, in_ch, 3, 3], he(in_ch * 9), &mut rng).with_grad(),
            conv1_b: Tensor::zeros(&[CONV1_OUT]).with_grad(),
            conv2_w: Tensor::randn(&[channels, CONV1_OUT, 3, 3], he(CONV1_OUT * 9), &mut rng)
                .with_grad(),
            conv2_b: Tensor::zeros(&[channels]).with_grad(),
            fc1_w: Tensor::randn(&[head_in, HIDDEN], he(head_in), &mut rng).with_grad(),
            fc1_b: Tensor::zeros(&[1, HIDDEN]).with_grad(),
            fc2_w: Tensor::zeros(&[HIDDEN, action_dim]).with_grad(),
            fc2_b: Tensor::zeros(&[1, action_dim]).with_grad(),
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    pub fn set_standardization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        assert_eq!(mean.len(), self.action_dim);
        assert_eq!(std.len(), self.action_dim);
        self.action_mean = mean;
        self.action_std = std;
    }

    fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.conv1_w.clone(),
            self.conv1_b.clone(),
            self.conv2_w.clone(),
            self.conv2_b.clone(),
            self.fc1_w.clone(),
            self.fc1_b.clone(),
            self.fc2_w.clone(),
            self.fc2_b.clone(),
        ]
    }

    fn set_tensors(&mut self, ts: Vec<Tensor>) {
        let mut it = ts.into_iter();
        self.conv1_w = it.next().unwrap();
        self.conv1_b = it.next().unwrap();
        self.conv2_w = it.next().unwrap();
        self.conv2_b = it.next().unwrap();
        self.fc1_w = it.next().unwrap();
        self.fc1_b = it.next().unwrap();
        self.fc2_w = it.next().unwrap();
        self.fc2_b = it.next().unwrap();
    }

    /// Fingerprint of all parameter bytes; used to assert frozenness.
    pub fn digest(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for t in self.tensors() {
            for v in t.data() {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        for v in self.action_mean.iter().chain(&self.action_std) {
            acc ^= v.to_bits();
            acc = acc.wrapping_mul(0x1000_0000_01b3);
        }
        acc
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        c.put_i64s(
            &format!("{prefix}/meta"),
            vec![
                self.variant.code(),
                self.context_radius as i64,
                self.channels as i64,
                self.action_dim as i64,
            ],
        );
        for (name, t) in self.named() {
            c.put_tensor(&format!("{prefix}/{name}"), t);
        }
        c.put_f64s(
            &format!("{prefix}/action_mean"),
            &[self.action_dim],
            self.action_mean.clone(),
        );
        c.put_f64s(
            &format!("{prefix}/action_std"),
            &[self.action_dim],
            self.action_std.clone(),
        );
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let meta = c.i64s(&format!("{prefix}/meta"))?;
        if meta.len() != 4 {
            return Err(EvaError::Checkpoint("IDM meta record malformed".into()));
        }
        let mut p = IdmParams::init(
            IdmVariant::from_code(meta[0])?,
            meta[1] as usize,
            meta[2] as usize,
            meta[3] as usize,
            0,
        );
        let mut ts = Vec::new();
        for (name, t) in p.named() {
            let loaded = c.tensor(&format!("{prefix}/{name}"))?;
            if loaded.shape() != t.shape() {
                return Err(EvaError::Checkpoint(format!(
                    "{prefix}/{name}: shape {:?} vs expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            ts.push(loaded.with_grad());
        }
        p.set_tensors(ts);
        p.action_mean = c.f64s(&format!("{prefix}/action_mean"))?.to_vec();
        p.action_std = c.f64s(&format!("{prefix}/action_std"))?.to_vec();
        Ok(p)
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.w", &self.conv1_w),
            ("conv1.b", &self.conv1_b),
            ("conv2.w", &self.conv2_w),
            ("conv2.b", &self.conv2_b),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
        ]
    }
}

/// [-1, 1]-normalized grid coordinate for index `i` of `n`.
fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Per-channel softmax over the spatial map followed by the expected grid
/// coordinate: `F: [C, H, W] -> C` pairs `(x_c, y_c)` in `[-1, 1]^2`.
pub fn spatial_softmax(features: &Tensor) -> Result<Vec<[f64; 2]>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(EvaError::ShapeMismatch(format!(
            "spatial_softmax expects [C, H, W], got {shape:?}"
        )));
    }
    let mut g = ComputeGraph::new();
    let f = g.constant(shape, features.data().to_vec())?;
    let out = spatial_softmax_graph(&mut g, f, shape[0], shape[1], shape[2])?;
    Ok(g.value(out).chunks(2).map(|p| [p[0], p[1]]).collect())
}

/// Graph form of [`spatial_softmax`]; output shape `[C, 2]`.
fn spatial_softmax_graph(
    g: &mut ComputeGraph,
    features: ValueId,
    c: usize,
    h: usize,
    w: usize,
) -> Result<ValueId> {
    let flat = g.reshape(features, &[c, h * w])?;
    let probs = g.softmax_rows(flat)?;
    let mut grid = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            grid.push(grid_coord(i, h));
            grid.push(grid_coord(j, w));
        }
    }
    let grid = g.constant(&[h * w, 2], grid)?;
    g.matmul(probs, grid)
}

struct IdmLeaves {
    ids: Vec<ValueId>,
}

impl IdmLeaves {
    fn conv1(&self) -> (ValueId, ValueId) {
        (self.ids[0], self.ids[1])
    }
    fn conv2(&self) -> (ValueId, ValueId) {
        (self.ids[2], self.ids[3])
    }
    fn fc1(&self) -> (ValueId, ValueId) {
        (self.ids[4], self.ids[5])
    }
    fn fc2(&self) -> (ValueId, ValueId) {
        (self.ids[6], self.ids[7])
    }
}

/// Shared forward pass: window `[2k+1, H, W]` -> `[1, d]` action estimate
/// in radians (the standardization affine is folded in as constants).
fn forward_graph(
    g: &mut ComputeGraph,
    params: &IdmParams,
    leaves: &IdmLeaves,
    window: ValueId,
) -> Result<ValueId> {
    let (c1w, c1b) = leaves.conv1();
    let (c2w, c2b) = leaves.conv2();
    let (f1w, f1b) = leaves.fc1();
    let (f2w, f2b) = leaves.fc2();

    let h1 = g.conv2d(window, c1w, c1b, 2, 1)?;
    let h1 = g.relu(h1)?;
    let h2 = g.conv2d(h1, c2w, c2b, 2, 1)?;
    let features = g.relu(h2)?;
    let fshape = g.shape(features).to_vec();
    let (c, fh, fw) = (fshape[0], fshape[1], fshape[2]);

    let head_in = match params.variant {
        IdmVariant::SpatialSoftmax => {
            let keypoints = spatial_softmax_graph(g, features, c, fh, fw)?;
            g.reshape(keypoints, &[1, 2 * c])?
        }
        IdmVariant::GlobalAvgPool => {
            let flat = g.reshape(features, &[c, fh * fw])?;
            let pool = g.constant(&[fh * fw, 1], vec![1.0 / (fh * fw) as f64; fh * fw])?;
            let pooled = g.matmul(flat, pool)?;
            g.reshape(pooled, &[1, c])?
        }
    };

    let z1 = g.matmul(head_in, f1w)?;
    let z1 = g.add(z1, f1b)?;
    let a1 = g.relu(z1)?;
    let z2 = g.matmul(a1, f2w)?;
    let out_std = g.add(z2, f2b)?;

    // de-standardize: out = net * std + mean
    let std_c = g.constant(&[1, params.action_dim], params.action_std.clone())?;
    let mean_c = g.constant(&[1, params.action_dim], params.action_mean.clone())?;
    let scaled = g.mul(out_std, std_c)?;
    g.add(scaled, mean_c)
}

/// Stacks the `2k+1` frames around `center` along the channel dimension,
/// clamp-replicating at episode boundaries.
pub fn window_tensor(frames: &[Frame], center: usize, k: usize) -> Tensor {
    assert!(!frames.is_empty());
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Vec::with_capacity((2 * k + 1) * h * w);
    for off in -(k as isize)..=(k as isize) {
        let idx = (center as isize + off).clamp(0, frames.len() as isize - 1) as usize;
        data.extend_from_slice(frames[idx].pixels());
    }
    Tensor::new(vec![2 * k + 1, h, w], data).expect("frame pixels are finite")
}

/// Predicted action (radians) for one window.
pub fn idm_forward(window: &Tensor, params: &IdmParams) -> Result<Vec<f64>> {
    let expected = 2 * params.context_radius + 1;
    if params.variant != IdmVariant::SpatialSoftmax && params.variant != IdmVariant::GlobalAvgPool
        || window.shape().len() != 3
        || window.shape()[0] != expected
    {
        return Err(EvaError::ShapeMismatch(format!(
            "window shape {:?}, expected [{expected}, H, W]",
            window.shape()
        )));
    }
    let mut g = ComputeGraph::new();
    let leaves = IdmLeaves {
        ids: params.tensors().iter().map(|t| g.leaf(t)).collect(),
    };
    let win = g.constant(window.shape(), window.data().to_vec())?;
    let out = forward_graph(&mut g, params, &leaves, win)?;
    Ok(g.value(out).to_vec())
}

/// Mean over the batch of the squared L2 error between predictions and
/// ground-truth actions.
pub fn idm_loss(params: &IdmParams, batch: &[(Tensor, Vec<f64>)]) -> Result<f64> {
    let (loss, _) = idm_loss_and_grads(params, batch, false)?;
    Ok(loss)
}

fn idm_loss_and_grads(
    params: &IdmParams,
    batch: &[(Tensor, Vec<f64>)],
    with_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(EvaError::InvalidArgument("empty IDM batch".into()));
    }
    let tensors = params.tensors();
    let build = |g: &mut ComputeGraph, ids: &[ValueId]| -> Result<ValueId> {
        let leaves = IdmLeaves { ids: ids.to_vec() };
        let mut total: Option<ValueId> = None;
        for (window, target) in batch {
            let win = g.constant(window.shape(), window.data().to_vec())?;
            let pred = forward_graph(g, params, &leaves, win)?;
            let tgt = g.constant(&[1, target.len()], target.clone())?;
            let diff = g.sub(pred, tgt)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        g.mul_scalar(total.expect("nonempty batch"), 1.0 / batch.len() as f64)
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

/// Slides the IDM window over every frame index (edge-clamped), producing
/// exactly one action row per frame.
pub fn decode_actions(frames: &[Frame], params: &IdmParams) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    (0..frames.len())
        .map(|t| idm_forward(&window_tensor(frames, t, params.context_radius), params))
        .collect()
}

/// Fraction of action entries (over windows and joints) predicted within
/// `tol` radians of ground truth.
pub fn accuracy_within(params: &IdmParams, episodes: &[Episode], tol: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ep in episodes {
        let decoded = decode_actions(&ep.frames, params)?;
        for (pred, gt) in decoded.iter().zip(&ep.actions) {
            for (p, g) in pred.iter().zip(gt) {
                if (p - g).abs() <= tol {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvaError::InvalidArgument("no evaluation windows".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Episodes held out for validation (fraction, at least one episode).
    pub holdout_fraction: f64,
    pub context_radius: usize,
    pub channels: usize,
    pub variant: IdmVariant,
    pub seed: u64,
}

impl Default for IdmTrainConfig {
    fn default() -> Self {
        IdmTrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            max_grad_norm: 10.0,
            holdout_fraction: 0.1,
            context_radius: 1,
            channels: 16,
            variant: IdmVariant::SpatialSoftmax,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdmEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct IdmTrainOutput {
    pub params: IdmParams,
    pub metrics: Vec<IdmEpochMetrics>,
    /// Indices of held-out episodes in the input dataset.
    pub holdout: Vec<usize>,
}

/// Supervised minibatch training on expert episodes. Deterministic given
/// the config seed; boundary windows clamp-replicate edge frames.
pub fn train_idm(
    dataset: &[Episode],
    arm: &ArmConfig,
    cfg: &IdmTrainConfig,
) -> Result<IdmTrainOutput> {
    if dataset.is_empty() {
        return Err(EvaError::InvalidArgument("empty IDM dataset".into()));
    }
    if dataset
        .iter()
        .any(|ep| ep.artifact.kind != crate::env::ArtifactKind::None)
    {
        return Err(EvaError::InvalidArgument(
            "IDM training data must be artifact-free expert episodes".into(),
        ));
    }

    // Episode-level train/validation split.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = StreamRng::new(cfg.seed, 0x5B17);
    rng.shuffle(&mut order);
    let n_val = ((dataset.len() as f64 * cfg.holdout_fraction).round() as usize)
        .clamp(1, dataset.len().saturating_sub(1).max(1));
    let (val_eps, train_eps) = order.split_at(n_val.min(order.len() - 1).max(1));

    // Per-joint standardization from the training split.
    let d = arm.joint_count;
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for &e in train_eps {
        for row in &dataset[e].actions {
            for j in 0..d {
                mean[j] += row[j];
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut var = vec![0.0; d];
    for &e in train_eps {
        for row in &dataset[e].actions {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count.max(1) as f64).sqrt().max(1e-6))
        .collect();

    let mut params = IdmParams::init(cfg.variant, cfg.context_radius, cfg.channels, d, cfg.seed);
    params.set_standardization(mean, std);

    let mut samples: Vec<(usize, usize)> = train_eps
        .iter()
        .flat_map(|&e| (0..dataset[e].len()).map(move |t| (e, t)))
        .collect();
    let val_samples: Vec<(usize, usize)> = val_eps
        .iter()
        .flat_map(|&e| (0..dataset[e].len()).map(move |t| (e, t)))
        .collect();

    let make_batch = |idx: &[(usize, usize)]| -> Vec<(Tensor, Vec<f64>)> {
        idx.iter()
            .map(|&(e, t)| {
                (
                    window_tensor(&dataset[e].frames, t, cfg.context_radius),
                    dataset[e].actions[t].clone(),
                )
            })
            .collect()
    };

    let mut opt = OptimizerState::new(&params.tensors(), cfg.learning_rate)
        .with_weight_decay(cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut erng = StreamRng::new(cfg.seed, derive_stream(&[0xE10C, epoch as u64]));
        erng.shuffle(&mut samples);
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in samples.chunks(cfg.batch_size) {
            let batch = make_batch(chunk);
            let (loss, mut grads) = idm_loss_and_grads(&params, &batch, true)?;
            clip_grad_norm(&mut grads, cfg.max_grad_norm)?;
            let mut tensors = params.tensors();
            adamw_step(&mut tensors, &grads, &mut opt)?;
            params.set_tensors(tensors);
            train_loss += loss;
            batches += 1;
        }
        let val_loss = if val_samples.is_empty() {
            f64::NAN
        } else {
            idm_loss(&params, &make_batch(&val_samples))?
        };
        metrics.push(IdmEpochMetrics {
            epoch,
            train_loss: train_loss / batches.max(1) as f64,
            val_loss,
        });
    }
    Ok(IdmTrainOutput {
        params,
        metrics,
        holdout: val_eps.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, sample_task, generate_expert_episode};
    use crate::graph::finite_difference_gradient;

    #[test]
    fn uniform_features_center_keypoints() {
        let f = Tensor::full(&[4, 5, 5], 0.3);
        let kp = spatial_softmax(&f).unwrap();
        for p in kp {
            assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn peaked_feature_map_hits_corner() {
        let mut data = vec![0.0; 25];
        data[0] = 50.0;
        let f = Tensor::new(vec![1, 5, 5], data).unwrap();
        let kp = spatial_softmax(&f).unwrap();
        assert!((kp[0][0] + 1.0).abs() < 1e-6, "{:?}", kp[0]);
        assert!((kp[0][1] + 1.0).abs() < 1e-6, "{:?}", kp[0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = StreamRng::new(3, 0);
        let f = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let shifted =
            Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let a = spatial_softmax(&f).unwrap();
        let b = spatial_softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn keypoints_stay_in_unit_box_and_probs_normalize() {
        for seed in 0..20 {
            let mut rng = StreamRng::new(seed, 1);
            let f = Tensor::randn(&[3, 6, 6], 3.0, &mut rng);
            for p in spatial_softmax(&f).unwrap() {
                assert!(p[0].abs() <= 1.0 + 1e-12 && p[1].abs() <= 1.0 + 1e-12);
            }
            // row-softmax normalization within 1e-9 per channel
            let mut g = ComputeGraph::new();
            let c = g.constant(f.shape(), f.data().to_vec()).unwrap();
            let flat = g.reshape(c, &[3, 36]).unwrap();
            let probs = g.softmax_rows(flat).unwrap();
            for row in g.value(probs).chunks(36) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifting_a_blob_moves_the_keypoint_with_it() {
        let mut a = vec![0.0; 49];
        let mut b = vec![0.0; 49];
        a[3 * 7 + 3] = 8.0; // center cell
        b[4 * 7 + 3] = 8.0; // one row down
        let ka = spatial_softmax(&Tensor::new(vec![1, 7, 7], a).unwrap()).unwrap();
        let kb = spatial_softmax(&Tensor::new(vec![1, 7, 7], b).unwrap()).unwrap();
        assert!(kb[0][0] > ka[0][0], "row coordinate should increase");
        assert!((kb[0][1] - ka[0][1]).abs() < 1e-9, "col unchanged");
    }

    #[test]
    fn zero_head_predicts_zero() {
        let params = IdmParams::init(IdmVariant::SpatialSoftmax, 1, 8, 3, 7);
        let mut rng = StreamRng::new(1, 2);
        let window = Tensor::randn(&[3, 16, 16], 0.2, &mut rng);
        let window = Tensor::new(
            window.shape().to_vec(),
            window.data().iter().map(|v| v.abs().min(1.0)).collect(),
        )
        .unwrap();
        let out = idm_forward(&window, &params).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| *v == 0.0), "{out:?}");
    }

    #[test]
    fn gap_variant_output_width_matches() {
        let params = IdmParams::init(IdmVariant::GlobalAvgPool, 1, 8, 3, 7);
        let mut rng = StreamRng::new(1, 2);
        let window = Tensor::randn(&[3, 16, 16], 0.1, &mut rng);
        let out = idm_forward(&window, &params).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn constant_feature_map_pools_to_constant() {
        // the GAP path collapses a constant [C, H, W] map to that constant
        let mut g = ComputeGraph::new();
        let f = g.constant(&[2, 3, 3], vec![0.7; 18]).unwrap();
        let flat = g.reshape(f, &[2, 9]).unwrap();
        let pool = g.constant(&[9, 1], vec![1.0 / 9.0; 9]).unwrap();
        let pooled = g.matmul(flat, pool).unwrap();
        for v in g.value(pooled) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let params = IdmParams::init(IdmVariant::SpatialSoftmax, 1, 8, 3, 7);
        let mut rng = StreamRng::new(4, 0);
        let w = Tensor::randn(&[3, 16, 16], 0.1, &mut rng);
        // zero head -> prediction (0,0,0); target (1,0,0) -> loss 1.0
        let loss = idm_loss(&params, &[(w.clone(), vec![1.0, 0.0, 0.0])]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12, "loss {loss}");
        // predictions == targets -> 0
        let zero = idm_loss(&params, &[(w.clone(), vec![0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(zero, 0.0);
        // batch of losses 1 and 9 -> mean 5
        let two = idm_loss(
            &params,
            &[
                (w.clone(), vec![1.0, 0.0, 0.0]),
                (w, vec![3.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        assert!((two - 5.0).abs() < 1e-12, "loss {two}");
    }

    #[test]
    fn idm_gradients_match_finite_differences() {
        // small geometry so the check is fast
        let mut params = IdmParams::init(IdmVariant::SpatialSoftmax, 1, 4, 2, 11);
        let mut rng = StreamRng::new(8, 0);
        // give the zero head some signal
        params.fc2_w = Tensor::randn(&[HIDDEN, 2], 0.05, &mut rng).with_grad();
        params.fc2_b = Tensor::randn(&[1, 2], 0.05, &mut rng).with_grad();
        let window = Tensor::randn(&[3, 8, 8], 0.3, &mut rng);
        let batch = vec![(window, vec![0.4, -0.2])];

        let tensors = params.tensors();
        let build = |g: &mut ComputeGraph, ids: &[ValueId]| {
            let leaves = IdmLeaves { ids: ids.to_vec() };
            let (win, tgt) = &batch[0];
            let w = g.constant(win.shape(), win.data().to_vec())?;
            let pred = forward_graph(g, &params, &leaves, w)?;
            let t = g.constant(&[1, 2], tgt.clone())?;
            let diff = g.sub(pred, t)?;
            let sq = g.mul(diff, diff)?;
            g.sum(sq)
        };
        let (_, grads) = evaluate_with_gradients(build, &tensors).unwrap();
        let fd = finite_difference_gradient(build, &tensors, 1e-5).unwrap();
        for (i, (ga, gf)) in grads.iter().zip(&fd).enumerate() {
            for (a, f) in ga.data().iter().zip(gf.data()) {
                assert!((a - f).abs() <= 1e-5, "param {i}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn decode_preserves_length_and_is_deterministic() {
        let arm = ArmConfig::default();
        let task = sample_task(0, &arm, 3);
        let ep = generate_expert_episode(&task, &arm, 17).unwrap();
        let params = IdmParams::init(IdmVariant::SpatialSoftmax, 1, 8, 3, 5);
        let a = decode_actions(&ep.frames, &params).unwrap();
        let b = decode_actions(&ep.frames, &params).unwrap();
        assert_eq!(a.len(), ep.len());
        assert_eq!(a, b);
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let arm = ArmConfig::default();
        let dataset = generate_dataset(2, 2, &arm, 77).unwrap();
        let cfg = IdmTrainConfig {
            epochs: 2,
            batch_size: 16,
            channels: 8,
            ..IdmTrainConfig::default()
        };
        let out = train_idm(&dataset, &arm, &cfg).unwrap();
        let first = &out.metrics[0];
        let last = out.metrics.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "loss {} -> {}",
            first.train_loss,
            last.train_loss
        );
    }

    #[test]
    fn training_rejects_artifact_episodes() {
        let arm = ArmConfig::default();
        let mut dataset = generate_dataset(1, 2, &arm, 7).unwrap();
        let spec = crate::env::ArtifactSpec::new(
            crate::env::ArtifactKind::Deformation,
            0.5,
            [0usize].into_iter().collect(),
        )
        .unwrap();
        dataset[0] = crate::env::inject_artifacts(&dataset[0], &spec, &arm, 1).unwrap();
        assert!(train_idm(&dataset, &arm, &IdmTrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = IdmParams::init(IdmVariant::SpatialSoftmax, 1, 8, 3, 42);
        let mut c = Container::new();
        params.save_into(&mut c, "idm");
        let back = IdmParams::load_from(&c, "idm").unwrap();
        assert_eq!(back.digest(), params.digest());
    }
}
