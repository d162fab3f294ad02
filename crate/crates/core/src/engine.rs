//! Staged training: stage 1 trains the tracker against the frozen analytic
//! segmenter, stage 2 freezes the tracker and trains the refiner on
//! precomputed tracker outputs. One optimizer step per iteration, AdamW
//! with decoupled weight decay, a single step-function learning-rate drop,
//! and newline-delimited JSON metrics.

use crate::error::{DvtError, Result};
use crate::graph::{Gradients, Graph, ParamId, ParamStore};
use crate::loss::{
    LossWeights, MatchSourceRule, align_seg_predictions, match_refiner, match_tracker,
    refiner_loss, tracker_loss,
};
use crate::refiner::{RefinerConfig, RefinerParams, forward_refiner};
use crate::synth::{Dataset, FramePrediction, stub_predictions};
use crate::tensor::Tensor;
use crate::tracker::{TrackerConfig, TrackerParams, forward_clip, track_video};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    /// The learning rate drops by 10x at floor(lr_drop_frac * max_iter).
    pub lr_drop_frac: f64,
    pub clip_len: usize,
    /// Clips averaged into one optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            weight_decay: 5e-2,
            max_iter: 3000,
            lr_drop_frac: 0.7,
            clip_len: 5,
            grad_accum: 1,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for stage 2; only the clip length differs.
    pub fn refiner_default() -> Self {
        TrainConfig {
            clip_len: 21,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(DvtError::Config("base_lr must be finite and > 0".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(DvtError::Config("weight_decay must be finite and >= 0".into()));
        }
        if !(self.lr_drop_frac > 0.0 && self.lr_drop_frac < 1.0) {
            return Err(DvtError::Config("lr_drop_frac must lie in (0, 1)".into()));
        }
        if self.clip_len == 0 {
            return Err(DvtError::Config("clip_len must be >= 1".into()));
        }
        if self.grad_accum == 0 {
            return Err(DvtError::Config("grad_accum must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn lr_drop_at(&self) -> usize {
        (self.lr_drop_frac * self.max_iter as f64).floor() as usize
    }

    /// Step-function schedule over 0-based step indices.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.lr_drop_at() {
            self.base_lr
        } else {
            self.base_lr * 0.1
        }
    }
}

/// AdamW with bias correction and decoupled weight decay:
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
/// Frozen parameters are skipped entirely.
pub struct AdamW {
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let ids: Vec<ParamId> = store.ids().collect();
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape().to_vec());
        AdamW {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let theta = store.value(id);
            let shape = theta.shape().to_vec();
            let n = theta.numel();
            let zero_grad;
            let g = match grads.get(id) {
                Some(g) => {
                    g.assert_finite(store.name(id))?;
                    g.data()
                }
                None => {
                    zero_grad = vec![0.0; n];
                    &zero_grad
                }
            };
            let mut m = self.m[k].data().to_vec();
            let mut v = self.v[k].data().to_vec();
            let mut value = theta.data().to_vec();
            for i in 0..n {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + EPS) + lr * wd * value[i];
            }
            self.m[k] = Tensor::new(shape.clone(), m)?;
            self.v[k] = Tensor::new(shape.clone(), v)?;
            store.set_value(id, Tensor::new(shape, value)?)?;
        }
        Ok(())
    }
}

/// A contiguous frame window of one video with clip-local ground truth.
#[derive(Clone, Debug)]
pub struct Clip {
    pub video: usize,
    pub start: usize,
    pub len: usize,
}

impl Clip {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Uniformly samples a contiguous window. Windows longer than the video
/// degrade to the whole video.
pub fn sample_clip<R: Rng>(video_idx: usize, frames: usize, clip_len: usize, rng: &mut R) -> Clip {
    let len = clip_len.min(frames);
    let start = rng.gen_range(0..=frames - len);
    Clip {
        video: video_idx,
        start,
        len,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub class_loss: f64,
    pub mask_loss: f64,
}

/// Writes one JSON object per line.
pub fn write_metrics<W: Write>(mut out: W, records: &[IterRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn check_compat(dim: usize, classes: usize, data: &Dataset, stage: &str) -> Result<()> {
    if dim != data.config.dim || classes != data.config.classes {
        return Err(DvtError::Config(format!(
            "{stage} config (dim {dim}, classes {classes}) does not match dataset \
             (dim {}, classes {})",
            data.config.dim, data.config.classes
        )));
    }
    Ok(())
}

fn training_error(iter: usize, e: DvtError) -> DvtError {
    DvtError::Training(format!("aborted at iteration {}: {e}", iter + 1))
}

/// Stage 1: trains tracker parameters against the frozen segmenter stub.
/// Deterministic given the seed; returns per-iteration metrics.
pub fn train_tracker(
    store: &mut ParamStore,
    tcfg: &TrackerConfig,
    params: &TrackerParams,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<IterRecord>> {
    cfg.validate()?;
    check_compat(tcfg.dim, tcfg.classes, data, "tracker")?;
    if data.videos.is_empty() {
        return Err(DvtError::Config("dataset has no videos".into()));
    }
    let stub: Vec<Vec<FramePrediction>> = data
        .videos
        .iter()
        .map(|v| stub_predictions(&data.config, v))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamW::new(store);
    let mut records = Vec::with_capacity(cfg.max_iter);
    for iter in 0..cfg.max_iter {
        let mut accum: Option<Gradients> = None;
        let mut loss_v = 0.0;
        let mut class_v = 0.0;
        let mut mask_v = 0.0;
        for _ in 0..cfg.grad_accum {
            let clip = sample_clip(
                rng.gen_range(0..data.videos.len()),
                data.config.frames,
                cfg.clip_len,
                &mut rng,
            );
            let video = &data.videos[clip.video];
            let (grads, l, c, m) = (|| -> Result<(Gradients, f64, f64, f64)> {
                let mut g = Graph::new(&*store);
                let queries = &video.queries[clip.range()];
                let pixels = &video.pixel_features[clip.range()];
                let fwd = forward_clip(&mut g, tcfg, params, queries, pixels)?;
                let seg = align_seg_predictions(
                    &stub[clip.video][clip.range()],
                    &fwd.permutations,
                )?;
                let own: Vec<FramePrediction> = (0..clip.len)
                    .map(|t| FramePrediction {
                        class_logits: g.value(fwd.class_logits[t]).clone(),
                        mask_logits: g.value(fwd.mask_logits[t]).clone(),
                    })
                    .collect();
                let tracks = clip_tracks(&video.gt, clip.range());
                let rule = MatchSourceRule {
                    max_iter: cfg.max_iter,
                    current_iter: iter,
                };
                let assignment = match_tracker(&seg, &own, &tracks, &rule, &cfg.loss)?;
                let loss =
                    tracker_loss(&mut g, &fwd.class_logits, &fwd.mask_logits, &tracks, &assignment, &cfg.loss)?;
                let grads = g.backward(loss.total)?;
                Ok((
                    grads,
                    g.value(loss.total).data()[0],
                    g.value(loss.class).data()[0],
                    g.value(loss.mask).data()[0],
                ))
            })()
            .map_err(|e| training_error(iter, e))?;
            match &mut accum {
                Some(a) => a.accumulate(&grads),
                None => accum = Some(grads),
            }
            loss_v += l;
            class_v += c;
            mask_v += m;
        }
        let scale = 1.0 / cfg.grad_accum as f64;
        let mut grads = accum.expect("grad_accum >= 1");
        grads.scale(scale);
        let lr = cfg.lr_at(iter);
        adam.step(store, &grads, lr, cfg.weight_decay)
            .map_err(|e| training_error(iter, e))?;
        records.push(IterRecord {
            iter: iter + 1,
            lr,
            loss: loss_v * scale,
            class_loss: class_v * scale,
            mask_loss: mask_v * scale,
        });
    }
    Ok(records)
}

/// Stage 2: freezes every tracker parameter, precomputes whole-video
/// tracker outputs once, and trains the refiner on windows of them.
pub fn train_refiner(
    store: &mut ParamStore,
    tcfg: &TrackerConfig,
    tparams: &TrackerParams,
    rcfg: &RefinerConfig,
    rparams: &RefinerParams,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<IterRecord>> {
    cfg.validate()?;
    check_compat(rcfg.dim, rcfg.classes, data, "refiner")?;
    if data.videos.is_empty() {
        return Err(DvtError::Config("dataset has no videos".into()));
    }
    store.freeze_prefix("tracker.");

    // The tracker is frozen, so its whole-video outputs are constants.
    let tracked: Vec<crate::tracker::TrackedSequence> = data
        .videos
        .iter()
        .map(|v| track_video(store, tcfg, tparams, &v.queries, &v.pixel_features))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamW::new(store);
    let mut records = Vec::with_capacity(cfg.max_iter);
    for iter in 0..cfg.max_iter {
        let mut accum: Option<Gradients> = None;
        let mut loss_v = 0.0;
        let mut class_v = 0.0;
        let mut mask_v = 0.0;
        for _ in 0..cfg.grad_accum {
            let clip = sample_clip(
                rng.gen_range(0..data.videos.len()),
                data.config.frames,
                cfg.clip_len,
                &mut rng,
            );
            let video = &data.videos[clip.video];
            let seq = &tracked[clip.video];
            let (grads, l, c, m) = (|| -> Result<(Gradients, f64, f64, f64)> {
                let mut g = Graph::new(&*store);
                let q_nodes: Vec<_> = seq.q_tr[clip.range()]
                    .iter()
                    .map(|q| g.input(q.clone()))
                    .collect();
                let pixels = &video.pixel_features[clip.range()];
                let fwd = forward_refiner(&mut g, rcfg, rparams, &q_nodes, pixels)?;
                let own_masks: Vec<Tensor> = fwd
                    .mask_logits
                    .iter()
                    .map(|&n| g.value(n).clone())
                    .collect();
                let tracks = clip_tracks(&video.gt, clip.range());
                let rule = MatchSourceRule {
                    max_iter: cfg.max_iter,
                    current_iter: iter,
                };
                let assignment = match_refiner(
                    &seq.predictions[clip.range()],
                    g.value(fwd.video_class_logits),
                    &own_masks,
                    &tracks,
                    &rule,
                    &cfg.loss,
                )?;
                let loss = refiner_loss(
                    &mut g,
                    fwd.video_class_logits,
                    &fwd.mask_logits,
                    &tracks,
                    &assignment,
                    &cfg.loss,
                )?;
                let grads = g.backward(loss.total)?;
                Ok((
                    grads,
                    g.value(loss.total).data()[0],
                    g.value(loss.class).data()[0],
                    g.value(loss.mask).data()[0],
                ))
            })()
            .map_err(|e| training_error(iter, e))?;
            match &mut accum {
                Some(a) => a.accumulate(&grads),
                None => accum = Some(grads),
            }
            loss_v += l;
            class_v += c;
            mask_v += m;
        }
        let scale = 1.0 / cfg.grad_accum as f64;
        let mut grads = accum.expect("grad_accum >= 1");
        grads.scale(scale);
        let lr = cfg.lr_at(iter);
        adam.step(store, &grads, lr, cfg.weight_decay)
            .map_err(|e| training_error(iter, e))?;
        records.push(IterRecord {
            iter: iter + 1,
            lr,
            loss: loss_v * scale,
            class_loss: class_v * scale,
            mask_loss: mask_v * scale,
        });
    }
    Ok(records)
}

/// Ground truth restricted to a frame window; tracks invisible across the
/// whole window are dropped by the matching stage.
pub fn clip_tracks(
    gt: &[crate::synth::GroundTruthTrack],
    range: std::ops::Range<usize>,
) -> Vec<crate::loss::ClipTrack> {
    gt.iter()
        .map(|t| crate::loss::ClipTrack {
            class_label: t.class_label,
            masks: t.masks[range.clone()].to_vec(),
        })
        .collect()
}
