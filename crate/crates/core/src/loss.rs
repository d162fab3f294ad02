//! Set-prediction matching and losses. Ground-truth tracks are matched to
//! prediction slots by Hungarian assignment over pairwise costs; matched
//! pairs are supervised with class cross-entropy plus binary cross-entropy
//! and dice on masks, and unmatched slots are pushed to the no-object
//! class. The tracker is matched per track on the frame where the track
//! first becomes visible in the clip; the refiner is matched once per clip
//! at video level. Early in training, costs come from the upstream stage's
//! predictions; halfway through, the stage being trained takes over.

use crate::assign::{Assignment, CostMatrix, hungarian_min};
use crate::error::{DvtError, Result};
use crate::graph::{Graph, NodeId};
use crate::synth::FramePrediction;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_cls, self.lambda_bce, self.lambda_dice];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(DvtError::Config("loss weights must be finite and >= 0".into()));
        }
        if !self.no_object_weight.is_finite()
            || self.no_object_weight <= 0.0
            || self.no_object_weight > 1.0
        {
            return Err(DvtError::Config(
                "no_object_weight must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Which prediction source feeds the matching cost: the upstream stage's
/// predictions for the first half of training, the trained stage's own
/// predictions from iteration floor(max_iter/2) onward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchSourceRule {
    pub max_iter: usize,
    pub current_iter: usize,
}

impl MatchSourceRule {
    pub fn use_own_predictions(&self) -> bool {
        self.current_iter >= self.max_iter / 2
    }
}

/// Ground truth restricted to a sampled clip: per-frame masks (empty when
/// absent) and the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTrack {
    pub class_label: usize,
    pub masks: Vec<Vec<bool>>,
}

impl ClipTrack {
    pub fn visible_at(&self, t: usize) -> bool {
        self.masks[t].iter().any(|&b| b)
    }

    /// First frame inside the clip where the track is visible.
    pub fn first_visible(&self) -> Option<usize> {
        (0..self.masks.len()).find(|&t| self.visible_at(t))
    }
}

/// Binary-cross-entropy and dice on raw logits, matching the graph ops
/// bit for bit: bce is the mean of max(z,0) - z*y + ln(1+e^-|z|); dice is
/// computed on sigmoid activations with additive smoothing 1.
pub fn mask_losses(pred_logits: &[f64], gt: &[bool]) -> (f64, f64) {
    debug_assert_eq!(pred_logits.len(), gt.len());
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut pred_sum = 0.0;
    let mut gt_sum = 0.0;
    for (&z, &b) in pred_logits.iter().zip(gt) {
        let y = if b { 1.0 } else { 0.0 };
        bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let s = sigmoid(z);
        inter += s * y;
        pred_sum += s;
        gt_sum += y;
    }
    let n = pred_logits.len().max(1) as f64;
    let dice = 1.0 - (2.0 * inter + 1.0) / (pred_sum + gt_sum + 1.0);
    (bce / n, dice)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Matching cost between one prediction slot and one ground-truth instance
/// on a single frame: -lambda_cls * p(class) + lambda_bce * bce +
/// lambda_dice * dice.
pub fn pairwise_match_cost(
    class_logits_row: &[f64],
    mask_logits_row: &[f64],
    class_label: usize,
    gt_mask: &[bool],
    w: &LossWeights,
) -> f64 {
    let probs = softmax_row(class_logits_row);
    let (bce, dice) = mask_losses(mask_logits_row, gt_mask);
    -w.lambda_cls * probs[class_label] + w.lambda_bce * bce + w.lambda_dice * dice
}

/// A clip-level assignment: pairs of (track index, slot index) for every
/// track that is visible somewhere in the clip. Tracks never visible in
/// the clip are dropped from supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl TrackAssignment {
    pub fn slot_of(&self, track: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(i, _)| *i == track)
            .map(|(_, s)| *s)
    }
}

fn assignment_from(vis: &[usize], a: Assignment) -> TrackAssignment {
    TrackAssignment {
        pairs: vis
            .iter()
            .zip(&a.mapping)
            .map(|(&track, &slot)| (track, slot))
            .collect(),
        total_cost: a.total_cost,
    }
}

/// Matches tracks to slots on each track's first visible frame in the
/// clip. Costs read the frozen segmenter's aligned predictions before the
/// switch point and the tracker's own predictions after it.
pub fn match_tracker(
    seg_aligned: &[FramePrediction],
    tracker_preds: &[FramePrediction],
    tracks: &[ClipTrack],
    rule: &MatchSourceRule,
    w: &LossWeights,
) -> Result<TrackAssignment> {
    let source = if rule.use_own_predictions() {
        tracker_preds
    } else {
        seg_aligned
    };
    if source.len() != tracks.first().map_or(source.len(), |t| t.masks.len()) {
        return Err(DvtError::ShapeMismatch {
            op: "match_tracker",
            left: vec![source.len()],
            right: vec![tracks[0].masks.len()],
        });
    }
    let vis: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].first_visible().is_some())
        .collect();
    if vis.is_empty() {
        return Ok(TrackAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let slots = source[0].class_logits.leading();
    let mut values = Vec::with_capacity(vis.len() * slots);
    for &i in &vis {
        let f = tracks[i].first_visible().expect("filtered to visible");
        let pred = &source[f];
        for j in 0..slots {
            values.push(pairwise_match_cost(
                pred.class_logits.row(j),
                pred.mask_logits.row(j),
                tracks[i].class_label,
                &tracks[i].masks[f],
                w,
            ));
        }
    }
    let cost = CostMatrix::new(vis.len(), slots, values)?;
    Ok(assignment_from(&vis, hungarian_min(&cost)?))
}

/// Matches tracks to slots once per clip at video level. The class term
/// uses the mean per-frame probability for the tracker source and the
/// video-level probability for the refiner source; mask terms average over
/// the clip length, counting only frames where the track is present.
pub fn match_refiner(
    tracker_preds: &[FramePrediction],
    refiner_video_class_logits: &crate::tensor::Tensor,
    refiner_mask_logits: &[crate::tensor::Tensor],
    tracks: &[ClipTrack],
    rule: &MatchSourceRule,
    w: &LossWeights,
) -> Result<TrackAssignment> {
    let frames = tracker_preds.len();
    if refiner_mask_logits.len() != frames {
        return Err(DvtError::ShapeMismatch {
            op: "match_refiner",
            left: vec![refiner_mask_logits.len()],
            right: vec![frames],
        });
    }
    let vis: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].first_visible().is_some())
        .collect();
    if vis.is_empty() {
        return Ok(TrackAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let own = rule.use_own_predictions();
    let slots = refiner_video_class_logits.leading();

    // Per-slot class probabilities under the selected source.
    let class_probs: Vec<Vec<f64>> = (0..slots)
        .map(|j| {
            if own {
                softmax_row(refiner_video_class_logits.row(j))
            } else {
                let mut mean = vec![0.0; tracker_preds[0].class_logits.last_dim()];
                for pred in tracker_preds {
                    for (m, p) in mean.iter_mut().zip(softmax_row(pred.class_logits.row(j))) {
                        *m += p;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= frames as f64);
                mean
            }
        })
        .collect();

    let mut values = Vec::with_capacity(vis.len() * slots);
    for &i in &vis {
        for j in 0..slots {
            let mut mask_cost = 0.0;
            for t in 0..frames {
                if !tracks[i].visible_at(t) {
                    continue;
                }
                let row = if own {
                    refiner_mask_logits[t].row(j)
                } else {
                    tracker_preds[t].mask_logits.row(j)
                };
                let (bce, dice) = mask_losses(row, &tracks[i].masks[t]);
                mask_cost += w.lambda_bce * bce + w.lambda_dice * dice;
            }
            values.push(
                -w.lambda_cls * class_probs[j][tracks[i].class_label]
                    + mask_cost / frames as f64,
            );
        }
    }
    let cost = CostMatrix::new(vis.len(), slots, values)?;
    Ok(assignment_from(&vis, hungarian_min(&cost)?))
}

/// Class targets and normalized row weights for one frame or one video:
/// matched, present pairs supervise the track's class at weight 1;
/// everything else supervises no-object at the configured down-weight.
fn class_targets(
    slots: usize,
    classes: usize,
    pairs: &[(usize, usize)],
    present: impl Fn(usize) -> bool,
    tracks: &[ClipTrack],
    w: &LossWeights,
) -> (Vec<usize>, Vec<f64>) {
    let mut targets = vec![classes; slots];
    for &(i, s) in pairs {
        if present(i) {
            targets[s] = tracks[i].class_label;
        }
    }
    let raw: Vec<f64> = targets
        .iter()
        .map(|&t| if t == classes { w.no_object_weight } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    (targets, raw.into_iter().map(|r| r / total).collect())
}

fn mask_targets(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// A clip loss split into its class and mask parts; total = class + mask.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub class: NodeId,
    pub mask: NodeId,
}

fn pair_mask_loss(
    g: &mut Graph,
    mask_logits: NodeId,
    slot: usize,
    gt: &[bool],
    w: &LossWeights,
    acc: NodeId,
) -> Result<NodeId> {
    let row = g.gather_rows(mask_logits, vec![slot])?;
    let targets = mask_targets(gt);
    let bce = g.bce_with_logits(row, targets.clone())?;
    let bce = g.scale(bce, w.lambda_bce);
    let acc = g.add(acc, bce)?;
    let dice = g.dice_with_logits(row, targets)?;
    let dice = g.scale(dice, w.lambda_dice);
    g.add(acc, dice)
}

/// Tracker training loss over a clip: for every frame, weighted class
/// cross-entropy over all slots plus mask losses for matched pairs on the
/// frames where the track is present. Plain sum over frames and pairs.
pub fn tracker_loss(
    g: &mut Graph,
    class_logits: &[NodeId],
    mask_logits: &[NodeId],
    tracks: &[ClipTrack],
    assignment: &TrackAssignment,
    w: &LossWeights,
) -> Result<LossNodes> {
    let frames = class_logits.len();
    let mut class_loss = g.zero();
    let mut mask_loss = g.zero();
    for t in 0..frames {
        let (slots, width) = g.value(class_logits[t]).as_2d();
        let classes = width - 1;
        let (targets, weights) = class_targets(
            slots,
            classes,
            &assignment.pairs,
            |i| tracks[i].visible_at(t),
            tracks,
            w,
        );
        let ce = g.weighted_cross_entropy(class_logits[t], targets, weights)?;
        let ce = g.scale(ce, w.lambda_cls);
        class_loss = g.add(class_loss, ce)?;

        for &(i, s) in &assignment.pairs {
            if !tracks[i].visible_at(t) {
                continue;
            }
            mask_loss = pair_mask_loss(g, mask_logits[t], s, &tracks[i].masks[t], w, mask_loss)?;
        }
    }
    let total = g.add(class_loss, mask_loss)?;
    Ok(LossNodes {
        total,
        class: class_loss,
        mask: mask_loss,
    })
}

/// Refiner training loss over a clip: one video-level weighted class
/// cross-entropy plus per-frame mask losses for matched pairs on frames
/// where the track is present.
pub fn refiner_loss(
    g: &mut Graph,
    video_class_logits: NodeId,
    mask_logits: &[NodeId],
    tracks: &[ClipTrack],
    assignment: &TrackAssignment,
    w: &LossWeights,
) -> Result<LossNodes> {
    let (slots, width) = g.value(video_class_logits).as_2d();
    let classes = width - 1;
    let (targets, weights) = class_targets(
        slots,
        classes,
        &assignment.pairs,
        |_| true,
        tracks,
        w,
    );
    let ce = g.weighted_cross_entropy(video_class_logits, targets, weights)?;
    let class_loss = g.scale(ce, w.lambda_cls);
    let mut mask_loss = g.zero();
    for t in 0..mask_logits.len() {
        for &(i, s) in &assignment.pairs {
            if !tracks[i].visible_at(t) {
                continue;
            }
            mask_loss = pair_mask_loss(g, mask_logits[t], s, &tracks[i].masks[t], w, mask_loss)?;
        }
    }
    let total = g.add(class_loss, mask_loss)?;
    Ok(LossNodes {
        total,
        class: class_loss,
        mask: mask_loss,
    })
}

/// Reorders raw segmenter predictions into tracked slot order so their
/// slot indices line up with tracker outputs: tracked slot s at frame t
/// shows raw slot perm[t][s].
pub fn align_seg_predictions(
    seg_preds: &[FramePrediction],
    permutations: &[Vec<usize>],
) -> Result<Vec<FramePrediction>> {
    if seg_preds.len() != permutations.len() {
        return Err(DvtError::ShapeMismatch {
            op: "align_seg_predictions",
            left: vec![seg_preds.len()],
            right: vec![permutations.len()],
        });
    }
    seg_preds
        .iter()
        .zip(permutations)
        .map(|(pred, perm)| {
            Ok(FramePrediction {
                class_logits: crate::assign::permute_rows(&pred.class_logits, perm)?,
                mask_logits: crate::assign::permute_rows(&pred.mask_logits, perm)?,
            })
        })
        .collect()
}
