use crate::error::{DvtError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Scale of the identity subspace of each instance code. Base identity
/// directions are constructed mutually orthogonal, so cross-instance mask
/// logits carry no identity term at all.
const IDENT_SCALE: f64 = 3.0;
/// Magnitude of the class marker written into the reserved subspace.
const CLASS_MARK: f64 = 0.5;
/// Query-side polarity value.
const POLARITY: f64 = 1.0;
/// Std-dev of background-slot and pixel-background noise.
const BG_SIGMA: f64 = 0.05;
/// Small positive polarity for background slots keeps their decoded masks
/// near-empty without making them look like instances.
const BG_SLOT_POLARITY: f64 = 0.2;
/// Gain of the analytic class head.
const CLASS_GAIN: f64 = 4.0;
/// No-object bias sits halfway up the class marker's logit, so marked slots
/// clear it and background slots fall below it.
const NO_OBJECT_BIAS: f64 = CLASS_GAIN * CLASS_MARK / 2.0;
/// Identity cosine of a near-duplicate pair (constructed exactly; the
/// duplicate's orthogonal component is itself orthogonal to every other
/// code, so duplicates only cross-talk with their own partner).
const DUP_COS: f64 = 0.5;
/// Own-mask inner product of a query with its pixel footprint.
const OWN_LOGIT: f64 = IDENT_SCALE * IDENT_SCALE + CLASS_MARK * CLASS_MARK + POLARITY * POLARITY;
/// Worst cross-instance inner product: the near-duplicate partner.
const DUP_LOGIT: f64 =
    IDENT_SCALE * IDENT_SCALE * DUP_COS + CLASS_MARK * CLASS_MARK + POLARITY * POLARITY;
/// Background pixels carry this polarity. Centered so a slot's own-mask
/// logit lands at +(OWN_LOGIT-DUP_LOGIT)/2 and its duplicate partner's at
/// the mirror image below zero; every other slot pair sits far lower. The
/// +-2.25 margin absorbs the worst additive boosts a pixel picks up from
/// overlapping rectangles (one extra cover adds POLARITY^2 plus at most
/// CLASS_MARK^2) with room left for drift and observation noise.
const PIXEL_BG_POLARITY: f64 = -(OWN_LOGIT + DUP_LOGIT) / (2.0 * POLARITY);

/// Everything the generator needs to synthesize one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// Frames per video (T).
    pub frames: usize,
    /// Query slots per frame; at least `instances`.
    pub slots: usize,
    /// True instances per video.
    pub instances: usize,
    /// Embedding dim; the last 1 + classes dims are reserved.
    pub dim: usize,
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Per-instance probability of one absence window.
    pub occlusion_prob: f64,
    /// Inclusive window length range.
    pub occlusion_len: (usize, usize),
    /// Random-walk drift per frame, applied to the instance code.
    pub sigma_motion: f64,
    /// I.i.d. per-frame observation noise on queries.
    pub sigma_obs: f64,
    /// Probability that an instance is spawned as a near-duplicate of an
    /// earlier one.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 20,
            frames: 24,
            slots: 10,
            instances: 8,
            dim: 64,
            classes: 4,
            grid_h: 24,
            grid_w: 24,
            occlusion_prob: 0.3,
            occlusion_len: (3, 8),
            sigma_motion: 0.02,
            sigma_obs: 0.05,
            distractor_prob: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances > self.slots {
            return Err(DvtError::Config(format!(
                "instances ({}) must not exceed slots ({})",
                self.instances, self.slots
            )));
        }
        if self.frames == 0 {
            return Err(DvtError::Config("frames must be >= 1".into()));
        }
        if self.num_videos == 0 {
            return Err(DvtError::Config("num_videos must be >= 1".into()));
        }
        if self.sigma_motion < 0.0 || self.sigma_obs < 0.0 {
            return Err(DvtError::Config("noise sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob)
            || !(0.0..=1.0).contains(&self.distractor_prob)
        {
            return Err(DvtError::Config("probabilities must lie in [0,1]".into()));
        }
        if self.dim < self.classes + 1 + self.instances {
            return Err(DvtError::Config(format!(
                "dim ({}) too small for {} classes plus reserved dims and {} \
                 orthogonal identity codes",
                self.dim, self.classes, self.instances
            )));
        }
        if self.classes == 0 {
            return Err(DvtError::Config("classes must be >= 1".into()));
        }
        if self.grid_h < 4 || self.grid_w < 4 {
            return Err(DvtError::Config("grid must be at least 4x4".into()));
        }
        if self.occlusion_len.0 == 0
            || self.occlusion_len.0 > self.occlusion_len.1
            || (self.frames > 1 && self.occlusion_len.1 >= self.frames)
        {
            return Err(DvtError::Config(format!(
                "occlusion_len {:?} invalid for {} frames",
                self.occlusion_len, self.frames
            )));
        }
        Ok(())
    }

    /// First dim of the reserved class subspace.
    pub fn class_offset(&self) -> usize {
        self.dim - self.classes - 1
    }

    /// Dim of the polarity channel.
    pub fn polarity_dim(&self) -> usize {
        self.dim - 1
    }

    pub fn pixels(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// One true instance: its class, per-frame masks, first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrack {
    pub instance_id: usize,
    pub class_label: usize,
    /// T masks over the flattened grid; an all-false mask means absent.
    pub masks: Vec<Vec<bool>>,
    pub first_appearance: usize,
}

impl GroundTruthTrack {
    pub fn visible_at(&self, t: usize) -> bool {
        self.masks[t].iter().any(|&b| b)
    }
}

/// One synthetic video: per-frame query sets, pixel features, ground truth,
/// and the planted slot-to-instance map used only by tests.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    /// T tensors of shape [slots, dim], slot order shuffled per frame.
    pub queries: Vec<Tensor>,
    /// T tensors of shape [grid_h*grid_w, dim].
    pub pixel_features: Vec<Tensor>,
    pub gt: Vec<GroundTruthTrack>,
    /// planted[t][slot] = Some(instance index) for slots carrying a visible
    /// instance at frame t, None for background-noise slots.
    pub planted: Vec<Vec<Option<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub videos: Vec<SynthVideo>,
}

/// Analytic per-frame prediction: class logits [slots, classes+1] and mask
/// logits [slots, pixels].
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both uniforms drawn unconditionally to keep the stream
    // length deterministic.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn video_rng(seed: u64, video_idx: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((video_idx as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(mixed)
}

struct InstanceSpec {
    code: Vec<f64>,
    class_label: usize,
    center: (f64, f64),
    velocity: (f64, f64),
    half: (f64, f64),
    /// Absence window [start, end); empty when start == end.
    absent: (usize, usize),
}

/// Random unit vector orthogonal to every vector in `basis`.
fn fresh_orthonormal(rng: &mut ChaCha8Rng, d_ident: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d_ident).map(|_| gaussian(rng)).collect();
        for b in basis {
            let along: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= along * c;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

fn build_instances(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<InstanceSpec> {
    let d_ident = cfg.class_offset();
    let mut specs: Vec<InstanceSpec> = Vec::with_capacity(cfg.instances);
    // Orthonormal directions consumed so far; each instance uses exactly one,
    // which `SynthConfig::validate` guarantees fits inside the identity
    // subspace.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.instances);
    for n in 0..cfg.instances {
        let duplicate_of = if n > 0 && rng.gen::<f64>() < cfg.distractor_prob {
            Some(rng.gen_range(0..n))
        } else {
            None
        };

        let fresh = fresh_orthonormal(rng, d_ident, &basis);
        let (ident, class_label) = match duplicate_of {
            // Near-duplicate pair: same class, identity cosine exactly
            // DUP_COS against its partner. The orthogonal component is a
            // fresh basis direction, so the duplicate stays orthogonal to
            // every unrelated code.
            Some(m) => {
                let base: Vec<f64> = specs[m].code[..d_ident]
                    .iter()
                    .map(|&x| x / IDENT_SCALE)
                    .collect();
                let sin = (1.0 - DUP_COS * DUP_COS).sqrt();
                let v: Vec<f64> = base
                    .iter()
                    .zip(&fresh)
                    .map(|(b, o)| DUP_COS * b + sin * o)
                    .collect();
                (v, specs[m].class_label)
            }
            None => (fresh.clone(), rng.gen_range(0..cfg.classes)),
        };
        basis.push(fresh);

        let mut code = vec![0.0; cfg.dim];
        for (i, x) in ident.iter().enumerate() {
            code[i] = x * IDENT_SCALE;
        }
        code[cfg.class_offset() + class_label] = CLASS_MARK;
        code[cfg.polarity_dim()] = POLARITY;

        let center = (
            rng.gen::<f64>() * (cfg.grid_w - 1) as f64,
            rng.gen::<f64>() * (cfg.grid_h - 1) as f64,
        );
        let velocity = (
            rng.gen::<f64>() * 3.0 - 1.5,
            rng.gen::<f64>() * 3.0 - 1.5,
        );
        let half = (
            2.0 + rng.gen::<f64>() * 4.0,
            2.0 + rng.gen::<f64>() * 4.0,
        );

        let absent = if cfg.frames > 1 && rng.gen::<f64>() < cfg.occlusion_prob {
            let len = rng.gen_range(cfg.occlusion_len.0..=cfg.occlusion_len.1);
            let len = len.min(cfg.frames - 1);
            let start = rng.gen_range(0..=cfg.frames - len);
            (start, start + len)
        } else {
            (0, 0)
        };

        specs.push(InstanceSpec {
            code,
            class_label,
            center,
            velocity,
            half,
            absent,
        });
    }
    specs
}

fn rect_mask(cfg: &SynthConfig, center: (f64, f64), half: (f64, f64)) -> Vec<bool> {
    let mut mask = vec![false; cfg.pixels()];
    for y in 0..cfg.grid_h {
        for x in 0..cfg.grid_w {
            if (x as f64 - center.0).abs() <= half.0 && (y as f64 - center.1).abs() <= half.1 {
                mask[y * cfg.grid_w + x] = true;
            }
        }
    }
    mask
}

fn generate_video(cfg: &SynthConfig, video_idx: usize) -> SynthVideo {
    let mut rng = video_rng(cfg.seed, video_idx);
    let specs = build_instances(cfg, &mut rng);

    // Per-instance drifted code and rectangle trajectory per frame.
    let mut drift = vec![vec![0.0; cfg.dim]; cfg.instances];
    let mut centers: Vec<(f64, f64)> = specs.iter().map(|s| s.center).collect();
    let mut velocities: Vec<(f64, f64)> = specs.iter().map(|s| s.velocity).collect();

    let mut queries = Vec::with_capacity(cfg.frames);
    let mut pixel_features = Vec::with_capacity(cfg.frames);
    let mut planted = Vec::with_capacity(cfg.frames);
    let mut masks: Vec<Vec<Vec<bool>>> = vec![Vec::with_capacity(cfg.frames); cfg.instances];

    for t in 0..cfg.frames {
        // Advance motion and drift (frame 0 uses the initial state).
        if t > 0 {
            for n in 0..cfg.instances {
                // Appearance drifts inside the identity subspace; class
                // marks and polarity are structural and stay exact.
                for d in drift[n][..cfg.class_offset()].iter_mut() {
                    *d += cfg.sigma_motion * gaussian(&mut rng);
                }
                let (cx, cy) = centers[n];
                let (vx, vy) = velocities[n];
                let mut nx = cx + vx;
                let mut ny = cy + vy;
                if nx < 0.0 || nx > (cfg.grid_w - 1) as f64 {
                    velocities[n].0 = -vx;
                    nx = nx.clamp(0.0, (cfg.grid_w - 1) as f64);
                }
                if ny < 0.0 || ny > (cfg.grid_h - 1) as f64 {
                    velocities[n].1 = -vy;
                    ny = ny.clamp(0.0, (cfg.grid_h - 1) as f64);
                }
                centers[n] = (nx, ny);
            }
        }

        let visible: Vec<usize> = (0..cfg.instances)
            .filter(|&n| {
                let (s, e) = specs[n].absent;
                !(s..e).contains(&t)
            })
            .collect();

        // Drifted codes for this frame (shared by pixels and queries).
        let frame_codes: Vec<Vec<f64>> = (0..cfg.instances)
            .map(|n| {
                specs[n]
                    .code
                    .iter()
                    .zip(&drift[n])
                    .map(|(c, d)| c + d)
                    .collect()
            })
            .collect();

        // Masks for every instance (empty when absent).
        for n in 0..cfg.instances {
            if visible.contains(&n) {
                masks[n].push(rect_mask(cfg, centers[n], specs[n].half));
            } else {
                masks[n].push(vec![false; cfg.pixels()]);
            }
        }

        // Uniform random slot permutation; visible instances occupy its
        // prefix positions, remaining slots become background noise.
        let mut slot_of = vec![None; cfg.slots];
        let mut order: Vec<usize> = (0..cfg.slots).collect();
        for i in (1..cfg.slots).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (k, &n) in visible.iter().enumerate() {
            slot_of[order[k]] = Some(n);
        }

        let mut qdata = vec![0.0; cfg.slots * cfg.dim];
        for s in 0..cfg.slots {
            let row = &mut qdata[s * cfg.dim..(s + 1) * cfg.dim];
            match slot_of[s] {
                Some(n) => {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = round_f32(frame_codes[n][j] + cfg.sigma_obs * gaussian(&mut rng));
                    }
                }
                None => {
                    for (j, v) in row.iter_mut().enumerate() {
                        let mut val = BG_SIGMA * gaussian(&mut rng);
                        if j == cfg.polarity_dim() {
                            val += BG_SLOT_POLARITY;
                        }
                        *v = round_f32(val);
                    }
                }
            }
        }

        let mut pdata = vec![0.0; cfg.pixels() * cfg.dim];
        for p in 0..cfg.pixels() {
            let row = &mut pdata[p * cfg.dim..(p + 1) * cfg.dim];
            for (j, v) in row.iter_mut().enumerate() {
                let mut val = BG_SIGMA * gaussian(&mut rng);
                if j == cfg.polarity_dim() {
                    val += PIXEL_BG_POLARITY;
                }
                *v = val;
            }
            for &n in &visible {
                if masks[n][t][p] {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += frame_codes[n][j];
                    }
                }
            }
            for v in row.iter_mut() {
                *v = round_f32(*v);
            }
        }

        queries.push(Tensor::new(vec![cfg.slots, cfg.dim], qdata).expect("constructed"));
        pixel_features.push(Tensor::new(vec![cfg.pixels(), cfg.dim], pdata).expect("constructed"));
        planted.push(slot_of);
    }

    let gt = (0..cfg.instances)
        .map(|n| {
            let tracks = std::mem::take(&mut masks[n]);
            let first_appearance = tracks
                .iter()
                .position(|m| m.iter().any(|&b| b))
                .expect("every instance is visible somewhere");
            GroundTruthTrack {
                instance_id: n,
                class_label: specs[n].class_label,
                masks: tracks,
                first_appearance,
            }
        })
        .collect();

    SynthVideo {
        queries,
        pixel_features,
        gt,
        planted,
    }
}

/// Deterministic dataset synthesis; per-video RNG streams are derived from
/// (seed, video index) so the result is independent of generation order.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let videos = (0..cfg.num_videos)
        .map(|i| generate_video(cfg, i))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        videos,
    })
}

/// Analytic segmenter heads: class logits read the reserved subspace through
/// a fixed affine map, mask logits are raw inner products with the pixel
/// features. No trained weights anywhere.
pub fn stub_predictions(cfg: &SynthConfig, video: &SynthVideo) -> Vec<FramePrediction> {
    let off = cfg.class_offset();
    video
        .queries
        .iter()
        .zip(&video.pixel_features)
        .map(|(q, px)| {
            let mut class_logits = vec![0.0; cfg.slots * (cfg.classes + 1)];
            for s in 0..cfg.slots {
                let row = q.row(s);
                for c in 0..cfg.classes {
                    class_logits[s * (cfg.classes + 1) + c] = CLASS_GAIN * row[off + c];
                }
                class_logits[s * (cfg.classes + 1) + cfg.classes] = NO_OBJECT_BIAS;
            }
            let mut mask_logits = vec![0.0; cfg.slots * cfg.pixels()];
            for s in 0..cfg.slots {
                let qrow = q.row(s);
                for p in 0..cfg.pixels() {
                    let dot: f64 = qrow.iter().zip(px.row(p)).map(|(a, b)| a * b).sum();
                    mask_logits[s * cfg.pixels() + p] = dot;
                }
            }
            FramePrediction {
                class_logits: Tensor::new(vec![cfg.slots, cfg.classes + 1], class_logits)
                    .expect("constructed"),
                mask_logits: Tensor::new(vec![cfg.slots, cfg.pixels()], mask_logits)
                    .expect("constructed"),
            }
        })
        .collect()
}

/// Intersection-over-union of two boolean masks; empty-vs-empty counts as 1.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{hungarian_min, match_adjacent, CostMatrix, CostMetric};

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            frames: 3,
            slots: 3,
            instances: 2,
            dim: 16,
            classes: 3,
            grid_h: 8,
            grid_w: 8,
            occlusion_prob: 0.0,
            occlusion_len: (1, 2),
            sigma_motion: 0.0,
            sigma_obs: 0.0,
            distractor_prob: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn rejects_more_instances_than_slots() {
        let cfg = SynthConfig {
            instances: 11,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(DvtError::Config(_))));
    }

    #[test]
    fn noiseless_planted_permutation_recovered_exactly() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&cfg).unwrap();
        for video in &ds.videos {
            for t in 1..cfg.frames {
                let (_, perm) =
                    match_adjacent(&video.queries[t - 1], &video.queries[t], CostMetric::Cosine)
                        .unwrap();
                // Slot s of the reordered current frame must carry the same
                // instance the previous frame had in slot s.
                for s in 0..cfg.slots {
                    if let Some(inst) = video.planted[t - 1][s] {
                        assert_eq!(video.planted[t][perm[s]], Some(inst));
                    }
                }
            }
        }
    }

    #[test]
    fn single_frame_video_first_appearance_is_zero() {
        let cfg = SynthConfig {
            frames: 1,
            occlusion_len: (1, 1),
            ..tiny_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for video in &ds.videos {
            for track in &video.gt {
                assert_eq!(track.first_appearance, 0);
            }
        }
    }

    #[test]
    fn first_appearance_is_min_visible_frame() {
        let cfg = SynthConfig {
            occlusion_prob: 1.0,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for video in &ds.videos {
            for track in &video.gt {
                let min_visible = track
                    .masks
                    .iter()
                    .position(|m| m.iter().any(|&b| b))
                    .unwrap();
                assert_eq!(track.first_appearance, min_visible);
                assert!(track.visible_at(track.first_appearance));
            }
        }
    }

    #[test]
    fn determinism_same_config_same_dataset() {
        let cfg = tiny_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn base_codes_keep_pairwise_angle_above_30_degrees() {
        let cfg = SynthConfig {
            distractor_prob: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let cos30 = 30f64.to_radians().cos();
        for video in &ds.videos {
            // Recover codes from frame-0 queries (noise sigma 0.05 barely
            // moves a norm-2.8 embedding; allow slack on the bound).
            let q = &video.queries[0];
            let planted = &video.planted[0];
            let inst_slots: Vec<usize> =
                (0..cfg.slots).filter(|&s| planted[s].is_some()).collect();
            for (ai, &a) in inst_slots.iter().enumerate() {
                for &b in &inst_slots[ai + 1..] {
                    let ra = q.row(a);
                    let rb = q.row(b);
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!(
                        dot / (na * nb) <= cos30 + 0.05,
                        "instances too close: cos = {}",
                        dot / (na * nb)
                    );
                }
            }
        }
    }

    #[test]
    fn stub_classes_decode_on_noiseless_video() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&cfg).unwrap();
        for video in &ds.videos {
            let preds = stub_predictions(&cfg, video);
            for t in 0..cfg.frames {
                for s in 0..cfg.slots {
                    let row = preds[t].class_logits.row(s);
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    match video.planted[t][s] {
                        Some(inst) => assert_eq!(argmax, video.gt[inst].class_label),
                        None => assert_eq!(argmax, cfg.classes),
                    }
                }
            }
        }
    }

    #[test]
    fn stub_masks_reach_high_iou_on_default_config() {
        // The generator is built so the analytic decoder clears 0.9 mean
        // IoU; checked on the default desk config across five seeds.
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..5u64 {
            let cfg = SynthConfig {
                num_videos: 2,
                seed,
                ..SynthConfig::default()
            };
            let ds = generate_dataset(&cfg).unwrap();
            for video in &ds.videos {
                let preds = stub_predictions(&cfg, video);
                for t in 0..cfg.frames {
                    let visible: Vec<usize> = (0..cfg.instances)
                        .filter(|&n| video.gt[n].visible_at(t))
                        .collect();
                    if visible.is_empty() {
                        continue;
                    }
                    // Hungarian matching of stub masks to GT by IoU cost.
                    let stub_masks: Vec<Vec<bool>> = (0..cfg.slots)
                        .map(|s| {
                            preds[t].mask_logits.row(s).iter().map(|&v| v > 0.0).collect()
                        })
                        .collect();
                    let mut cost = Vec::new();
                    for &n in &visible {
                        for s in 0..cfg.slots {
                            cost.push(1.0 - mask_iou(&video.gt[n].masks[t], &stub_masks[s]));
                        }
                    }
                    let cm = CostMatrix::new(visible.len(), cfg.slots, cost).unwrap();
                    let assignment = hungarian_min(&cm).unwrap();
                    for (vi, &s) in assignment.mapping.iter().enumerate() {
                        total += mask_iou(&video.gt[visible[vi]].masks[t], &stub_masks[s]);
                        count += 1;
                    }
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean >= 0.9, "mean stub IoU {mean}");
    }

    #[test]
    fn planted_slot_has_maximal_mask_overlap() {
        let cfg = tiny_cfg();
        let ds = generate_dataset(&cfg).unwrap();
        let video = &ds.videos[0];
        let preds = stub_predictions(&cfg, video);
        for t in 0..cfg.frames {
            for s in 0..cfg.slots {
                if let Some(inst) = video.planted[t][s] {
                    let gt_mask = &video.gt[inst].masks[t];
                    let iou_of = |slot: usize| {
                        let m: Vec<bool> = preds[t]
                            .mask_logits
                            .row(slot)
                            .iter()
                            .map(|&v| v > 0.0)
                            .collect();
                        mask_iou(gt_mask, &m)
                    };
                    let own = iou_of(s);
                    for other in 0..cfg.slots {
                        if other != s {
                            assert!(own >= iou_of(other));
                        }
                    }
                }
            }
        }
    }
}
