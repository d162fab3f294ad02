//! Temporal refiner: takes the tracker's per-frame queries for a whole
//! clip and refines them offline through blocks of short-term temporal
//! convolution, long-term temporal self-attention, per-frame cross-attention
//! back to the tracker queries, and an FFN. A learned temporal weighting
//! collapses each slot's trajectory into one video-level query for
//! classification; masks are decoded per frame.
//!
//! Internally a clip lives in slot-major layout: row n*T + t of a
//! [N*T, D] tensor is slot n at frame t, so per-slot temporal work reads
//! contiguous rows and per-frame work gathers strided rows.

use serde::{Deserialize, Serialize};

use crate::error::{DvtError, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::nn::{
    ffn_forward, mha, mlp3_forward, AttentionParams, ConvParams, FfnParams, Initializer,
    LayerNormParams, LinearParams, MlpParams, LAYER_NORM_EPS,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub dim: usize,
    pub classes: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
    pub use_conv: bool,
    pub use_long_attention: bool,
    pub use_cross_attention: bool,
    pub use_ffn: bool,
    /// Adds sinusoidal frame encodings to the long-term attention's query
    /// and key inputs. Off by default; the conv block already sees order.
    pub temporal_pos_encoding: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            dim: 64,
            classes: 4,
            blocks: 6,
            heads: 8,
            ffn_mult: 8,
            conv_kernel: 5,
            use_conv: true,
            use_long_attention: true,
            use_cross_attention: true,
            use_ffn: true,
            temporal_pos_encoding: false,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.blocks == 0 || self.ffn_mult == 0 {
            return Err(DvtError::Config(
                "refiner dim, classes, blocks, and ffn_mult must be positive".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DvtError::Config(format!(
                "refiner dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(DvtError::Config(format!(
                "conv kernel {} must be odd",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefinerBlockParams {
    pub conv_norm: LayerNormParams,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub long_norm: LayerNormParams,
    pub long_attn: AttentionParams,
    pub cross_norm: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct RefinerParams {
    pub blocks: Vec<RefinerBlockParams>,
    pub class_head: LinearParams,
    pub mask_head: MlpParams,
    /// Eq-for-one scalar score per (frame, slot) feeding the temporal
    /// softmax; owned by the classification side of the refiner.
    pub time_weight: LinearParams,
}

/// Registers all refiner parameters under the "refiner." prefix. Second
/// conv layers, attention output projections, and FFN second layers start
/// at zero so an untrained refiner passes its input through unchanged.
pub fn build_refiner(
    store: &mut ParamStore,
    cfg: &RefinerConfig,
    seed: u64,
) -> Result<RefinerParams> {
    cfg.validate()?;
    let mut init = Initializer::new(seed);
    let d = cfg.dim;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for l in 0..cfg.blocks {
        let p = format!("refiner.block{l}");
        blocks.push(RefinerBlockParams {
            conv_norm: init.layer_norm(store, &format!("{p}.conv_norm"), d)?,
            conv1: init.conv(store, &format!("{p}.conv1"), cfg.conv_kernel, d, d, false)?,
            conv2: init.conv(store, &format!("{p}.conv2"), cfg.conv_kernel, d, d, true)?,
            long_norm: init.layer_norm(store, &format!("{p}.long_norm"), d)?,
            long_attn: init.attention(store, &format!("{p}.long"), d, cfg.heads, true)?,
            cross_norm: init.layer_norm(store, &format!("{p}.cross_norm"), d)?,
            cross_attn: init.attention(store, &format!("{p}.cross"), d, cfg.heads, true)?,
            ffn_norm: init.layer_norm(store, &format!("{p}.ffn_norm"), d)?,
            ffn: init.ffn(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult)?,
        });
    }
    let class_head = init.linear(store, "refiner.class_head", d, cfg.classes + 1)?;
    let mask_head = init.mlp3(store, "refiner.mask_head", d)?;
    let time_weight = init.linear(store, "refiner.time_weight", d, 1)?;
    Ok(RefinerParams {
        blocks,
        class_head,
        mask_head,
        time_weight,
    })
}

/// Row indices that pull a frame-major [T*N, D] stack into slot-major
/// order.
fn to_slot_major(n: usize, t: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * t);
    for slot in 0..n {
        for frame in 0..t {
            idx.push(frame * n + slot);
        }
    }
    idx
}

/// Row indices of frame `frame` inside a slot-major stack.
fn frame_rows(n: usize, t: usize, frame: usize) -> Vec<usize> {
    (0..n).map(|slot| slot * t + frame).collect()
}

/// Sinusoidal frame encoding, shape [T, D].
fn sinusoidal_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for frame in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let rate = (frame as f64) / 10000f64.powf(2.0 * pair / d as f64);
            data[frame * d + i] = if i % 2 == 0 { rate.sin() } else { rate.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("constructed length")
}

struct ClipShape {
    slots: usize,
    frames: usize,
}

/// One refiner block over a slot-major clip. `q_tr_frames` are the tracker
/// queries per frame, used as cross-attention keys and values.
fn refine_block(
    g: &mut Graph,
    cfg: &RefinerConfig,
    block: &RefinerBlockParams,
    x: NodeId,
    q_tr_frames: &[NodeId],
    shape: &ClipShape,
) -> Result<NodeId> {
    let (n, t) = (shape.slots, shape.frames);
    let mut x = x;

    if cfg.use_conv {
        let h = g.layer_norm(x, block.conv_norm.gamma, block.conv_norm.beta, LAYER_NORM_EPS)?;
        let mut per_slot = Vec::with_capacity(n);
        for slot in 0..n {
            let rows = g.gather_rows(h, (slot * t..(slot + 1) * t).collect())?;
            let c1 = g.conv1d(rows, block.conv1.kernel, block.conv1.bias)?;
            let c1 = g.gelu(c1);
            let c2 = g.conv1d(c1, block.conv2.kernel, block.conv2.bias)?;
            per_slot.push(c2);
        }
        let delta = g.concat_rows(per_slot)?;
        x = g.add(x, delta)?;
    }

    if cfg.use_long_attention {
        let h = g.layer_norm(x, block.long_norm.gamma, block.long_norm.beta, LAYER_NORM_EPS)?;
        let pe = cfg
            .temporal_pos_encoding
            .then(|| g.input(sinusoidal_encoding(t, cfg.dim)));
        let mut per_slot = Vec::with_capacity(n);
        for slot in 0..n {
            let rows = g.gather_rows(h, (slot * t..(slot + 1) * t).collect())?;
            let qk = match pe {
                Some(pe) => g.add(rows, pe)?,
                None => rows,
            };
            per_slot.push(mha(g, qk, qk, rows, &block.long_attn)?);
        }
        let delta = g.concat_rows(per_slot)?;
        x = g.add(x, delta)?;
    }

    if cfg.use_cross_attention {
        let h = g.layer_norm(x, block.cross_norm.gamma, block.cross_norm.beta, LAYER_NORM_EPS)?;
        let mut per_frame = Vec::with_capacity(t);
        for frame in 0..t {
            let q = g.gather_rows(h, frame_rows(n, t, frame))?;
            let kv = q_tr_frames[frame];
            per_frame.push(mha(g, q, kv, kv, &block.cross_attn)?);
        }
        // Frame-major stack back to slot-major rows.
        let stacked = g.concat_rows(per_frame)?;
        let delta = g.gather_rows(stacked, to_slot_major(n, t))?;
        x = g.add(x, delta)?;
    }

    if cfg.use_ffn {
        let h = g.layer_norm(x, block.ffn_norm.gamma, block.ffn_norm.beta, LAYER_NORM_EPS)?;
        let f = ffn_forward(g, h, &block.ffn)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Learned temporal collapse: per slot, softmax over frames of a scalar
/// score, then the weighted sum of that slot's trajectory. Returns the
/// video-level queries [N, D] and the per-slot weight columns [T, 1].
pub fn temporal_weighting(
    g: &mut Graph,
    q_rf_slot_major: NodeId,
    lin: &LinearParams,
    shape: (usize, usize),
) -> Result<(NodeId, Vec<NodeId>)> {
    let (n, t) = shape;
    let mut rows_out = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for slot in 0..n {
        let rows = g.gather_rows(q_rf_slot_major, (slot * t..(slot + 1) * t).collect())?;
        let scores = g.linear(rows, lin.w, lin.b)?;
        let w = g.softmax(scores, 0)?;
        let w_row = g.reshape(w, vec![1, t])?;
        rows_out.push(g.matmul(w_row, rows)?);
        weights.push(w);
    }
    Ok((g.concat_rows(rows_out)?, weights))
}

/// Graph handles for a refiner pass.
pub struct RefinerForward {
    pub q_rf_slot_major: NodeId,
    pub q_rf_frames: Vec<NodeId>,
    pub video_query: NodeId,
    pub video_class_logits: NodeId,
    pub mask_logits: Vec<NodeId>,
    pub weights: Vec<NodeId>,
}

/// Runs the refiner inside an existing graph. `q_tr_frames` are per-frame
/// [N, D] nodes (tracker outputs or plain inputs); `pixels` are the frames'
/// pixel features for mask decoding.
pub fn forward_refiner(
    g: &mut Graph,
    cfg: &RefinerConfig,
    params: &RefinerParams,
    q_tr_frames: &[NodeId],
    pixels: &[Tensor],
) -> Result<RefinerForward> {
    if q_tr_frames.is_empty() {
        return Err(DvtError::Config("refiner needs at least one frame".into()));
    }
    if q_tr_frames.len() != pixels.len() {
        return Err(DvtError::ShapeMismatch {
            op: "forward_refiner",
            left: vec![q_tr_frames.len()],
            right: vec![pixels.len()],
        });
    }
    let (n, d) = g.value(q_tr_frames[0]).as_2d();
    if d != cfg.dim {
        return Err(DvtError::ShapeMismatch {
            op: "forward_refiner",
            left: g.value(q_tr_frames[0]).shape().to_vec(),
            right: vec![n, cfg.dim],
        });
    }
    let t = q_tr_frames.len();
    let shape = ClipShape { slots: n, frames: t };

    let stacked = g.concat_rows(q_tr_frames.to_vec())?;
    let mut x = g.gather_rows(stacked, to_slot_major(n, t))?;
    for block in &params.blocks {
        x = refine_block(g, cfg, block, x, q_tr_frames, &shape)?;
    }

    let mut q_rf_frames = Vec::with_capacity(t);
    let mut mask_logits = Vec::with_capacity(t);
    for frame in 0..t {
        let q_rf_t = g.gather_rows(x, frame_rows(n, t, frame))?;
        let emb = mlp3_forward(g, q_rf_t, &params.mask_head)?;
        let px = g.input(pixels[frame].clone());
        mask_logits.push(g.matmul_nt(emb, px)?);
        q_rf_frames.push(q_rf_t);
    }

    let (video_query, weights) = temporal_weighting(g, x, &params.time_weight, (n, t))?;
    let video_class_logits = g.linear(video_query, params.class_head.w, params.class_head.b)?;

    Ok(RefinerForward {
        q_rf_slot_major: x,
        q_rf_frames,
        video_query,
        video_class_logits,
        mask_logits,
        weights,
    })
}

/// Offline refinement product: per-frame refined queries and mask logits,
/// one video-level query and class-logit row per slot, and the temporal
/// weights [N, T] that produced the video queries.
#[derive(Clone, Debug)]
pub struct RefinedSequence {
    pub q_rf: Vec<Tensor>,
    pub video_query: Tensor,
    pub video_class_logits: Tensor,
    pub mask_logits: Vec<Tensor>,
    pub weights: Tensor,
}

/// Pure-function wrapper over `forward_refiner` for inference.
pub fn refine_video(
    store: &ParamStore,
    cfg: &RefinerConfig,
    params: &RefinerParams,
    q_tr: &[Tensor],
    pixels: &[Tensor],
) -> Result<RefinedSequence> {
    let mut g = Graph::new(store);
    let frames: Vec<NodeId> = q_tr.iter().map(|q| g.input(q.clone())).collect();
    let fwd = forward_refiner(&mut g, cfg, params, &frames, pixels)?;
    let t = q_tr.len();
    let mut weight_data = Vec::with_capacity(fwd.weights.len() * t);
    for &w in &fwd.weights {
        weight_data.extend_from_slice(g.value(w).data());
    }
    Ok(RefinedSequence {
        q_rf: fwd.q_rf_frames.iter().map(|&id| g.value(id).clone()).collect(),
        video_query: g.value(fwd.video_query).clone(),
        video_class_logits: g.value(fwd.video_class_logits).clone(),
        mask_logits: fwd.mask_logits.iter().map(|&id| g.value(id).clone()).collect(),
        weights: Tensor::new(vec![fwd.weights.len(), t], weight_data)?,
    })
}
