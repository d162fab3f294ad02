//! Inference modes and tracking-quality metrics. Online mode runs the
//! tracker alone; offline mode refines the whole video at once; semi-online
//! mode refines disjoint consecutive windows of tracker outputs, so track
//! identities still come from tracker slot indices and no cross-window
//! re-association is needed.
//!
//! Metrics treat slot indices as track identities. Per frame, visible
//! ground-truth instances are matched to slots by mask IoU (Hungarian,
//! counting only pairs with IoU >= 0.5). An instance's anchor is the slot
//! it matches on its first matched frame; association accuracy is the
//! fraction of visible instance-frames matched to the anchor slot, so a
//! value of 1 means every visible frame matched and never changed slots.

use crate::assign::{CostMatrix, hungarian_min};
use crate::error::{DvtError, Result};
use crate::graph::ParamStore;
use crate::loss::softmax_row;
use crate::refiner::{RefinerConfig, RefinerParams, refine_video};
use crate::synth::{Dataset, GroundTruthTrack, mask_iou};
use crate::tensor::Tensor;
use crate::tracker::{TrackerConfig, TrackerParams, track_video};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Online,
    SemiOnline(usize),
    Offline,
}

impl InferenceMode {
    pub fn validate(&self) -> Result<()> {
        if let InferenceMode::SemiOnline(0) = self {
            return Err(DvtError::Config(
                "semi-online window length must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_refiner(&self) -> bool {
        !matches!(self, InferenceMode::Online)
    }
}

/// Whole-video predictions with slot indices as identities: per-frame mask
/// logits and thresholded masks, plus one video-level class distribution
/// per slot (mean per-frame probability online, the temporal-weighting
/// head offline, per-window average semi-online).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub mask_logits: Vec<Tensor>,
    pub masks: Vec<Vec<Vec<bool>>>,
    pub class_probs: Vec<Vec<f64>>,
}

fn threshold_masks(mask_logits: &[Tensor]) -> Vec<Vec<Vec<bool>>> {
    mask_logits
        .iter()
        .map(|m| {
            let (slots, _) = m.as_2d();
            (0..slots)
                .map(|s| m.row(s).iter().map(|&v| v > 0.0).collect())
                .collect()
        })
        .collect()
}

/// Runs one video through the pipeline under the given mode.
pub fn infer(
    store: &ParamStore,
    tcfg: &TrackerConfig,
    tparams: &TrackerParams,
    refiner: Option<(&RefinerConfig, &RefinerParams)>,
    mode: InferenceMode,
    queries: &[Tensor],
    pixels: &[Tensor],
) -> Result<VideoPrediction> {
    mode.validate()?;
    let tracked = track_video(store, tcfg, tparams, queries, pixels)?;
    let frames = queries.len();
    match mode {
        InferenceMode::Online => {
            let mask_logits: Vec<Tensor> = tracked
                .predictions
                .iter()
                .map(|p| p.mask_logits.clone())
                .collect();
            let slots = tracked.predictions[0].class_logits.leading();
            let width = tracked.predictions[0].class_logits.last_dim();
            let class_probs: Vec<Vec<f64>> = (0..slots)
                .map(|s| {
                    let mut mean = vec![0.0; width];
                    for p in &tracked.predictions {
                        for (m, q) in mean.iter_mut().zip(softmax_row(p.class_logits.row(s))) {
                            *m += q;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= frames as f64);
                    mean
                })
                .collect();
            Ok(VideoPrediction {
                masks: threshold_masks(&mask_logits),
                mask_logits,
                class_probs,
            })
        }
        InferenceMode::Offline | InferenceMode::SemiOnline(_) => {
            let (rcfg, rparams) = refiner.ok_or_else(|| {
                DvtError::Config("offline and semi-online modes need a refiner".into())
            })?;
            let window = match mode {
                InferenceMode::SemiOnline(c) => c.min(frames),
                _ => frames,
            };
            let mut mask_logits = Vec::with_capacity(frames);
            let mut prob_sums: Vec<Vec<f64>> = Vec::new();
            let mut windows = 0usize;
            let mut start = 0;
            while start < frames {
                let end = (start + window).min(frames);
                let refined = refine_video(
                    store,
                    rcfg,
                    rparams,
                    &tracked.q_tr[start..end],
                    &pixels[start..end],
                )?;
                mask_logits.extend(refined.mask_logits);
                let slots = refined.video_class_logits.leading();
                if prob_sums.is_empty() {
                    prob_sums = vec![vec![0.0; refined.video_class_logits.last_dim()]; slots];
                }
                for s in 0..slots {
                    for (acc, p) in prob_sums[s]
                        .iter_mut()
                        .zip(softmax_row(refined.video_class_logits.row(s)))
                    {
                        *acc += p;
                    }
                }
                windows += 1;
                start = end;
            }
            for row in &mut prob_sums {
                for p in row.iter_mut() {
                    *p /= windows as f64;
                }
            }
            Ok(VideoPrediction {
                masks: threshold_masks(&mask_logits),
                mask_logits,
                class_probs: prob_sums,
            })
        }
    }
}

/// matched[t][i] = slot matched to ground-truth track i at frame t, if the
/// track is visible there and some slot overlaps it with IoU >= 0.5.
fn frame_matches(
    pred: &VideoPrediction,
    gt: &[GroundTruthTrack],
) -> Vec<Vec<Option<(usize, f64)>>> {
    let frames = pred.masks.len();
    let slots = pred.masks.first().map_or(0, |f| f.len());
    (0..frames)
        .map(|t| {
            let visible: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].visible_at(t)).collect();
            let mut out: Vec<Option<(usize, f64)>> = vec![None; gt.len()];
            if visible.is_empty() || slots == 0 {
                return out;
            }
            let mut ious = vec![0.0; visible.len() * slots];
            for (r, &i) in visible.iter().enumerate() {
                for s in 0..slots {
                    ious[r * slots + s] = mask_iou(&gt[i].masks[t], &pred.masks[t][s]);
                }
            }
            let cost = CostMatrix::new(
                visible.len(),
                slots,
                ious.iter().map(|&v| -v).collect(),
            )
            .expect("rectangular iou matrix");
            let a = hungarian_min(&cost).expect("feasible iou matching");
            for (r, &i) in visible.iter().enumerate() {
                let s = a.mapping[r];
                let iou = ious[r * slots + s];
                if iou >= 0.5 {
                    out[i] = Some((s, iou));
                }
            }
            out
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub id_switches: usize,
    pub association_accuracy: f64,
    pub mean_iou: f64,
}

/// All three per-video tracking metrics from one matching pass. Videos
/// with no visible ground truth score perfectly by convention.
pub fn tracking_metrics(pred: &VideoPrediction, gt: &[GroundTruthTrack]) -> TrackingMetrics {
    let matches = frame_matches(pred, gt);
    let frames = matches.len();
    let mut switches = 0;
    let mut anchor_hits = 0usize;
    let mut visible_pairs = 0usize;
    let mut iou_sum = 0.0;
    for i in 0..gt.len() {
        let mut anchor: Option<usize> = None;
        let mut prev: Option<usize> = None;
        for t in 0..frames {
            if !gt[i].visible_at(t) {
                continue;
            }
            visible_pairs += 1;
            if let Some((s, iou)) = matches[t][i] {
                iou_sum += iou;
                if anchor.is_none() {
                    anchor = Some(s);
                }
                if anchor == Some(s) {
                    anchor_hits += 1;
                }
                if let Some(p) = prev {
                    if p != s {
                        switches += 1;
                    }
                }
                prev = Some(s);
            }
        }
    }
    let (association_accuracy, mean_iou) = if visible_pairs == 0 {
        (1.0, 1.0)
    } else {
        (
            anchor_hits as f64 / visible_pairs as f64,
            iou_sum / visible_pairs as f64,
        )
    };
    TrackingMetrics {
        id_switches: switches,
        association_accuracy,
        mean_iou,
    }
}

/// Frames where a ground-truth instance's matched slot differs from its
/// previously matched slot.
pub fn id_switches(pred: &VideoPrediction, gt: &[GroundTruthTrack]) -> usize {
    tracking_metrics(pred, gt).id_switches
}

/// Tube IoU: intersection and union summed over all frames of the video.
fn tube_iou(pred: &[Vec<Vec<bool>>], slot: usize, gt: &GroundTruthTrack) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (t, frame) in pred.iter().enumerate() {
        for (p, g) in frame[slot].iter().zip(&gt.masks[t]) {
            inter += (*p && *g) as usize;
            union += (*p || *g) as usize;
        }
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// Average precision over score-ranked slot detections across videos.
/// Each slot yields one detection: its best non-background class and that
/// class's probability as score. A detection is a true positive when an
/// unmatched same-class ground-truth track in the same video overlaps it
/// with tube IoU >= threshold. All-point interpolation.
pub fn tube_ap(
    preds: &[VideoPrediction],
    gts: &[&[GroundTruthTrack]],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(DvtError::ShapeMismatch {
            op: "tube_ap",
            left: vec![preds.len()],
            right: vec![gts.len()],
        });
    }
    struct Det {
        video: usize,
        slot: usize,
        class: usize,
        score: f64,
    }
    let mut dets = Vec::new();
    for (v, pred) in preds.iter().enumerate() {
        for (slot, probs) in pred.class_probs.iter().enumerate() {
            let classes = probs.len() - 1;
            let (class, &score) = probs[..classes]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("at least one class");
            dets.push(Det {
                video: v,
                slot,
                class,
                score,
            });
        }
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.video.cmp(&b.video))
            .then(a.slot.cmp(&b.slot))
    });
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();

    let mut out = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        if total_gt == 0 {
            out.push(0.0);
            continue;
        }
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp_flags = Vec::with_capacity(dets.len());
        for d in &dets {
            let gt = gts[d.video];
            let best = (0..gt.len())
                .filter(|&i| !taken[d.video][i] && gt[i].class_label == d.class)
                .map(|i| (i, tube_iou(&preds[d.video].masks, d.slot, &gt[i])))
                .filter(|&(_, iou)| iou >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, _)) => {
                    taken[d.video][i] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        // Precision envelope over the ranked list, area under P(R).
        let mut precisions = Vec::with_capacity(dets.len());
        let mut tp = 0usize;
        for (k, &is_tp) in tp_flags.iter().enumerate() {
            tp += is_tp as usize;
            precisions.push(tp as f64 / (k + 1) as f64);
        }
        for k in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[k] = precisions[k].max(precisions[k + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        let mut tp = 0usize;
        for (k, &is_tp) in tp_flags.iter().enumerate() {
            if is_tp {
                tp += 1;
                let recall = tp as f64 / total_gt as f64;
                ap += (recall - prev_recall) * precisions[k];
                prev_recall = recall;
            }
        }
        out.push(ap);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub video: usize,
    pub id_switches: usize,
    pub association_accuracy: f64,
    pub mean_iou: f64,
}

/// Aggregate metrics are plain means over videos; tube AP is computed
/// jointly across all videos from score-ranked detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub videos: Vec<VideoReport>,
    pub id_switches: f64,
    pub id_switches_total: usize,
    pub association_accuracy: f64,
    pub mean_iou: f64,
    pub tube_ap_50: f64,
    pub tube_ap_75: f64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    /// Flat per-video table; one header line, one row per video.
    pub fn per_video_csv(&self) -> String {
        let mut s = String::from("video,id_switches,association_accuracy,mean_iou\n");
        for v in &self.videos {
            s.push_str(&format!(
                "{},{},{},{}\n",
                v.video, v.id_switches, v.association_accuracy, v.mean_iou
            ));
        }
        s
    }
}

/// Evaluates a whole dataset under one inference mode.
pub fn evaluate(
    store: &ParamStore,
    tcfg: &TrackerConfig,
    tparams: &TrackerParams,
    refiner: Option<(&RefinerConfig, &RefinerParams)>,
    mode: InferenceMode,
    data: &Dataset,
) -> Result<EvalReport> {
    mode.validate()?;
    if mode.needs_refiner() && refiner.is_none() {
        return Err(DvtError::Config(
            "offline and semi-online modes need a refiner".into(),
        ));
    }
    let start = std::time::Instant::now();
    let mut preds = Vec::with_capacity(data.videos.len());
    let mut videos = Vec::with_capacity(data.videos.len());
    for (i, video) in data.videos.iter().enumerate() {
        let pred = infer(
            store,
            tcfg,
            tparams,
            refiner,
            mode,
            &video.queries,
            &video.pixel_features,
        )?;
        let m = tracking_metrics(&pred, &video.gt);
        videos.push(VideoReport {
            video: i,
            id_switches: m.id_switches,
            association_accuracy: m.association_accuracy,
            mean_iou: m.mean_iou,
        });
        preds.push(pred);
    }
    let gts: Vec<&[GroundTruthTrack]> = data.videos.iter().map(|v| v.gt.as_slice()).collect();
    let aps = tube_ap(&preds, &gts, &[0.5, 0.75])?;
    let n = videos.len().max(1) as f64;
    Ok(EvalReport {
        mode,
        id_switches: videos.iter().map(|v| v.id_switches as f64).sum::<f64>() / n,
        id_switches_total: videos.iter().map(|v| v.id_switches).sum(),
        association_accuracy: videos.iter().map(|v| v.association_accuracy).sum::<f64>() / n,
        mean_iou: videos.iter().map(|v| v.mean_iou).sum::<f64>() / n,
        tube_ap_50: aps[0],
        tube_ap_75: aps[1],
        runtime_seconds: start.elapsed().as_secs_f64(),
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::build_refiner;
    use crate::synth::{SynthConfig, generate_dataset};
    use crate::tracker::build_tracker;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            frames: 5,
            slots: 4,
            instances: 2,
            dim: 16,
            classes: 3,
            grid_h: 6,
            grid_w: 6,
            occlusion_len: (2, 3),
            seed: 21,
            ..SynthConfig::default()
        }
    }

    fn tiny_models() -> (ParamStore, TrackerConfig, TrackerParams, RefinerConfig, RefinerParams)
    {
        let mut store = ParamStore::new();
        let tcfg = TrackerConfig {
            dim: 16,
            classes: 3,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            ..TrackerConfig::default()
        };
        let rcfg = RefinerConfig {
            dim: 16,
            classes: 3,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            conv_kernel: 3,
            ..RefinerConfig::default()
        };
        let tparams = build_tracker(&mut store, &tcfg, 31).unwrap();
        let rparams = build_refiner(&mut store, &rcfg, 32).unwrap();
        (store, tcfg, tparams, rcfg, rparams)
    }

    #[test]
    fn online_mode_ignores_the_refiner() {
        let data = generate_dataset(&tiny_synth()).unwrap();
        let (store, tcfg, tparams, rcfg, rparams) = tiny_models();
        let v = &data.videos[0];
        let with = infer(
            &store,
            &tcfg,
            &tparams,
            Some((&rcfg, &rparams)),
            InferenceMode::Online,
            &v.queries,
            &v.pixel_features,
        )
        .unwrap();
        let without = infer(
            &store,
            &tcfg,
            &tparams,
            None,
            InferenceMode::Online,
            &v.queries,
            &v.pixel_features,
        )
        .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn semi_online_full_length_is_bit_identical_to_offline() {
        let data = generate_dataset(&tiny_synth()).unwrap();
        let (store, tcfg, tparams, rcfg, rparams) = tiny_models();
        for v in &data.videos {
            let off = infer(
                &store,
                &tcfg,
                &tparams,
                Some((&rcfg, &rparams)),
                InferenceMode::Offline,
                &v.queries,
                &v.pixel_features,
            )
            .unwrap();
            for c in [data.config.frames, data.config.frames + 3] {
                let semi = infer(
                    &store,
                    &tcfg,
                    &tparams,
                    Some((&rcfg, &rparams)),
                    InferenceMode::SemiOnline(c),
                    &v.queries,
                    &v.pixel_features,
                )
                .unwrap();
                assert_eq!(off, semi);
            }
        }
    }

    #[test]
    fn semi_online_windows_match_independent_refinement() {
        let data = generate_dataset(&tiny_synth()).unwrap();
        let (store, tcfg, tparams, rcfg, rparams) = tiny_models();
        let v = &data.videos[0];
        let c = 2;
        let semi = infer(
            &store,
            &tcfg,
            &tparams,
            Some((&rcfg, &rparams)),
            InferenceMode::SemiOnline(c),
            &v.queries,
            &v.pixel_features,
        )
        .unwrap();
        let tracked = track_video(&store, &tcfg, &tparams, &v.queries, &v.pixel_features).unwrap();
        let mut t = 0;
        while t < data.config.frames {
            let end = (t + c).min(data.config.frames);
            let window =
                refine_video(&store, &rcfg, &rparams, &tracked.q_tr[t..end], &v.pixel_features[t..end])
                    .unwrap();
            for (k, m) in window.mask_logits.iter().enumerate() {
                assert_eq!(&semi.mask_logits[t + k], m);
            }
            t = end;
        }
    }

    #[test]
    fn refined_modes_require_a_refiner() {
        let data = generate_dataset(&tiny_synth()).unwrap();
        let (store, tcfg, tparams, _, _) = tiny_models();
        let v = &data.videos[0];
        for mode in [InferenceMode::Offline, InferenceMode::SemiOnline(2)] {
            let r = infer(&store, &tcfg, &tparams, None, mode, &v.queries, &v.pixel_features);
            assert!(matches!(r, Err(DvtError::Config(_))));
        }
        assert!(InferenceMode::SemiOnline(0).validate().is_err());
    }

    fn gt(class: usize, masks: Vec<Vec<bool>>) -> GroundTruthTrack {
        let first = (0..masks.len())
            .find(|&t| masks[t].iter().any(|&b| b))
            .unwrap_or(0);
        GroundTruthTrack {
            instance_id: 0,
            class_label: class,
            masks,
            first_appearance: first,
        }
    }

    /// Four cells, two disjoint instances, three frames.
    fn two_track_gt() -> Vec<GroundTruthTrack> {
        let a = vec![true, true, false, false];
        let b = vec![false, false, true, true];
        vec![
            gt(0, vec![a.clone(), a.clone(), a.clone()]),
            gt(1, vec![b.clone(), b.clone(), b.clone()]),
        ]
    }

    fn perfect_prediction(gts: &[GroundTruthTrack], slots: usize) -> VideoPrediction {
        let frames = gts[0].masks.len();
        let cells = gts[0].masks[0].len();
        let classes = 1 + gts.iter().map(|g| g.class_label).max().unwrap();
        let masks: Vec<Vec<Vec<bool>>> = (0..frames)
            .map(|t| {
                (0..slots)
                    .map(|s| {
                        gts.get(s)
                            .map(|g| g.masks[t].clone())
                            .unwrap_or_else(|| vec![false; cells])
                    })
                    .collect()
            })
            .collect();
        let mask_logits = masks
            .iter()
            .map(|frame| {
                Tensor::new(
                    vec![slots, cells],
                    frame
                        .iter()
                        .flat_map(|row| row.iter().map(|&b| if b { 9.0 } else { -9.0 }))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let class_probs = (0..slots)
            .map(|s| {
                let mut p = vec![0.01; classes + 1];
                match gts.get(s) {
                    Some(g) => p[g.class_label] = 0.9,
                    None => p[classes] = 0.9,
                }
                p
            })
            .collect();
        VideoPrediction {
            mask_logits,
            masks,
            class_probs,
        }
    }

    #[test]
    fn perfect_tracking_scores_perfectly() {
        let gts = two_track_gt();
        let pred = perfect_prediction(&gts, 3);
        let m = tracking_metrics(&pred, &gts);
        assert_eq!(m.id_switches, 0);
        assert_eq!(m.association_accuracy, 1.0);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn slot_swap_counts_one_switch_per_instance() {
        let gts = two_track_gt();
        let mut pred = perfect_prediction(&gts, 2);
        // From frame 1 onward the two slots exchange masks.
        for t in 1..3 {
            pred.masks[t].swap(0, 1);
        }
        let m = tracking_metrics(&pred, &gts);
        assert_eq!(m.id_switches, 2);
        // Frame 0 matches the anchor; frames 1 and 2 do not.
        assert!((m.association_accuracy - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn random_shuffles_match_an_independent_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts = two_track_gt();
        for _ in 0..50 {
            let base = perfect_prediction(&gts, 3);
            let frames = base.masks.len();
            let slots = 3;
            // perm[t][s] = source slot shown at slot s in frame t.
            let perms: Vec<Vec<usize>> = (0..frames)
                .map(|_| {
                    let mut p: Vec<usize> = (0..slots).collect();
                    for i in (1..slots).rev() {
                        p.swap(i, rng.gen_range(0..=i));
                    }
                    p
                })
                .collect();
            let mut pred = base.clone();
            for t in 0..frames {
                pred.masks[t] = perms[t].iter().map(|&src| base.masks[t][src].clone()).collect();
            }
            // Oracle: instance i sits at the slot showing source slot i.
            let mut expected = 0;
            for i in 0..gts.len() {
                let mut prev: Option<usize> = None;
                for (t, perm) in perms.iter().enumerate() {
                    if !gts[i].visible_at(t) {
                        continue;
                    }
                    let slot = perm.iter().position(|&src| src == i).unwrap();
                    if let Some(p) = prev {
                        if p != slot {
                            expected += 1;
                        }
                    }
                    prev = Some(slot);
                }
            }
            assert_eq!(id_switches(&pred, &gts), expected);
        }
    }

    #[test]
    fn metrics_ignore_gt_order_and_consistent_slot_relabeling() {
        let gts = two_track_gt();
        let pred = perfect_prediction(&gts, 3);
        let m = tracking_metrics(&pred, &gts);

        let swapped_gt: Vec<GroundTruthTrack> = vec![gts[1].clone(), gts[0].clone()];
        assert_eq!(tracking_metrics(&pred, &swapped_gt), m);

        // One fixed slot permutation applied to every frame.
        let perm = [2usize, 0, 1];
        let mut relabeled = pred.clone();
        for t in 0..pred.masks.len() {
            relabeled.masks[t] = perm.iter().map(|&s| pred.masks[t][s].clone()).collect();
        }
        relabeled.class_probs = perm.iter().map(|&s| pred.class_probs[s].clone()).collect();
        assert_eq!(tracking_metrics(&relabeled, &gts), m);
    }

    #[test]
    fn perfect_predictions_reach_ap_one() {
        let gts = two_track_gt();
        let pred = perfect_prediction(&gts, 3);
        let aps = tube_ap(&[pred], &[&gts], &[0.5, 0.75]).unwrap();
        assert_eq!(aps, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_predictions_score_zero_ap() {
        let gts = two_track_gt();
        let mut pred = perfect_prediction(&gts, 3);
        for frame in &mut pred.masks {
            for m in frame.iter_mut() {
                m.iter_mut().for_each(|b| *b = false);
            }
        }
        let aps = tube_ap(&[pred], &[&gts], &[0.5, 0.75]).unwrap();
        assert_eq!(aps, vec![0.0, 0.0]);
    }

    #[test]
    fn ranked_ap_matches_hand_computed_curve() {
        // Two ground-truth tracks of the same class; three detections
        // ranked by score: true positive (0.9), false positive with an
        // empty mask (0.8), true positive (0.7). Precision at the two TP
        // ranks is 1 and 2/3, recalls 1/2 and 1, so AP = 1/2 + (2/3)/2.
        let gts = vec![
            gt(0, vec![vec![true, false, false, false]; 2]),
            gt(0, vec![vec![false, false, true, false]; 2]),
        ];
        let masks: Vec<Vec<Vec<bool>>> = (0..2)
            .map(|_| {
                vec![
                    vec![true, false, false, false],
                    vec![false, false, false, false],
                    vec![false, false, true, false],
                ]
            })
            .collect();
        let mask_logits = masks
            .iter()
            .map(|frame| {
                Tensor::new(
                    vec![3, 4],
                    frame
                        .iter()
                        .flat_map(|r| r.iter().map(|&b| if b { 9.0 } else { -9.0 }))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let pred = VideoPrediction {
            mask_logits,
            masks,
            class_probs: vec![
                vec![0.9, 0.05],
                vec![0.8, 0.1],
                vec![0.7, 0.2],
            ],
        };
        let aps = tube_ap(&[pred], &[&gts], &[0.5]).unwrap();
        let expect = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((aps[0] - expect).abs() < 1e-12, "{} vs {expect}", aps[0]);
    }

    #[test]
    fn evaluate_aggregates_are_video_means() {
        let data = generate_dataset(&tiny_synth()).unwrap();
        let (store, tcfg, tparams, rcfg, rparams) = tiny_models();
        let report = evaluate(
            &store,
            &tcfg,
            &tparams,
            Some((&rcfg, &rparams)),
            InferenceMode::SemiOnline(3),
            &data,
        )
        .unwrap();
        assert_eq!(report.videos.len(), data.videos.len());
        let n = report.videos.len() as f64;
        let mean_acc: f64 =
            report.videos.iter().map(|v| v.association_accuracy).sum::<f64>() / n;
        assert!((report.association_accuracy - mean_acc).abs() < 1e-12);
        assert!(report.association_accuracy >= 0.0 && report.association_accuracy <= 1.0);
        assert!(report.mean_iou >= 0.0 && report.mean_iou <= 1.0);
        assert!(report.tube_ap_50 >= 0.0 && report.tube_ap_50 <= 1.0);
        assert!(report.runtime_seconds >= 0.0);
        let csv = report.per_video_csv();
        assert_eq!(csv.lines().count(), data.videos.len() + 1);
        assert!(csv.starts_with("video,id_switches,"));
    }

    #[test]
    fn eval_report_round_trips_through_json() {
        let report = EvalReport {
            mode: InferenceMode::SemiOnline(4),
            videos: vec![VideoReport {
                video: 0,
                id_switches: 1,
                association_accuracy: 0.75,
                mean_iou: 0.5,
            }],
            id_switches: 1.0,
            id_switches_total: 1,
            association_accuracy: 0.75,
            mean_iou: 0.5,
            tube_ap_50: 0.25,
            tube_ap_75: 0.0,
            runtime_seconds: 0.01,
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
