//! Referring tracker: streams a video left to right. Each frame's segmenter
//! queries are aligned to the previous frame by Hungarian matching, then
//! denoised through a stack of blocks, each a referring cross-attention, a
//! standard self-attention over slots, and an FFN, all pre-norm with
//! residuals. Per-frame heads decode class logits and mask-embedding inner
//! products against pixel features.

use serde::{Deserialize, Serialize};

use crate::assign::{match_adjacent, CostMetric};
use crate::error::{DvtError, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::nn::{
    ffn_forward, mha, mlp3_forward, AttentionParams, FfnParams, Initializer, LayerNormParams,
    LinearParams, MlpParams, LAYER_NORM_EPS,
};
use crate::synth::FramePrediction;
use crate::tensor::Tensor;

/// How a frame's denoising input is formed for frames after the first.
/// Frame 0 always starts from its own segmenter queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Zero,
    PrevQTr,
    RawQseg,
    #[default]
    MatchedQseg,
}

/// Residual wiring of the cross-attention sublayer. `Referring` keeps the
/// evolving slot state as the residual path; `Standard` restarts the block
/// from the reference, as a conventional decoder layer would.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionKind {
    #[default]
    Referring,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub dim: usize,
    pub classes: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub init_strategy: InitStrategy,
    pub cross_attention: CrossAttentionKind,
    pub cost_metric: CostMetric,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            dim: 64,
            classes: 4,
            blocks: 6,
            heads: 8,
            ffn_mult: 8,
            init_strategy: InitStrategy::default(),
            cross_attention: CrossAttentionKind::default(),
            cost_metric: CostMetric::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.blocks == 0 || self.ffn_mult == 0 {
            return Err(DvtError::Config(
                "tracker dim, classes, blocks, and ffn_mult must be positive".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DvtError::Config(format!(
                "tracker dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrackerBlockParams {
    pub rca_norm: LayerNormParams,
    pub rca: AttentionParams,
    pub self_norm: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct TrackerParams {
    pub blocks: Vec<TrackerBlockParams>,
    pub class_head: LinearParams,
    pub mask_head: MlpParams,
}

/// Registers all tracker parameters under the "tracker." prefix. Attention
/// output projections and FFN second layers start at zero, so an untrained
/// tracker is an exact identity pipeline over its init.
pub fn build_tracker(
    store: &mut ParamStore,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<TrackerParams> {
    cfg.validate()?;
    let mut init = Initializer::new(seed);
    let d = cfg.dim;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for l in 0..cfg.blocks {
        let p = format!("tracker.block{l}");
        blocks.push(TrackerBlockParams {
            rca_norm: init.layer_norm(store, &format!("{p}.rca_norm"), d)?,
            rca: init.attention(store, &format!("{p}.rca"), d, cfg.heads, true)?,
            self_norm: init.layer_norm(store, &format!("{p}.self_norm"), d)?,
            self_attn: init.attention(store, &format!("{p}.self"), d, cfg.heads, true)?,
            ffn_norm: init.layer_norm(store, &format!("{p}.ffn_norm"), d)?,
            ffn: init.ffn(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult)?,
        });
    }
    let class_head = init.linear(store, "tracker.class_head", d, cfg.classes + 1)?;
    let mask_head = init.mlp3(store, "tracker.mask_head", d)?;
    Ok(TrackerParams {
        blocks,
        class_head,
        mask_head,
    })
}

/// One cross-attention read: the residual path carries `id` while the
/// attention query is `q`. Returns id + MHA(q, k, v).
pub fn referring_cross_attention(
    g: &mut Graph,
    id: NodeId,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    p: &AttentionParams,
) -> Result<NodeId> {
    let a = mha(g, q, k, v, p)?;
    g.add(id, a)
}

/// Denoises one frame: L blocks over the slot state `x`, with the fixed
/// `reference` as the cross-attention query and `keys_values` as its keys
/// and values.
pub fn denoise_frame(
    g: &mut Graph,
    cfg: &TrackerConfig,
    params: &TrackerParams,
    init: NodeId,
    reference: NodeId,
    keys_values: NodeId,
) -> Result<NodeId> {
    let mut x = init;
    for block in &params.blocks {
        let q_in = g.layer_norm(
            reference,
            block.rca_norm.gamma,
            block.rca_norm.beta,
            LAYER_NORM_EPS,
        )?;
        let residual = match cfg.cross_attention {
            CrossAttentionKind::Referring => x,
            CrossAttentionKind::Standard => reference,
        };
        x = referring_cross_attention(g, residual, q_in, keys_values, keys_values, &block.rca)?;

        let s_in = g.layer_norm(
            x,
            block.self_norm.gamma,
            block.self_norm.beta,
            LAYER_NORM_EPS,
        )?;
        let s = mha(g, s_in, s_in, s_in, &block.self_attn)?;
        x = g.add(x, s)?;

        let f_in = g.layer_norm(x, block.ffn_norm.gamma, block.ffn_norm.beta, LAYER_NORM_EPS)?;
        let f = ffn_forward(g, f_in, &block.ffn)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Applies the per-frame heads: class logits [N, C+1] and mask logits
/// [N, P] as inner products of mask embeddings with pixel features.
pub fn apply_heads(
    g: &mut Graph,
    params: &TrackerParams,
    q_tr: NodeId,
    pixels: NodeId,
) -> Result<(NodeId, NodeId)> {
    let class_logits = g.linear(q_tr, params.class_head.w, params.class_head.b)?;
    let emb = mlp3_forward(g, q_tr, &params.mask_head)?;
    let mask_logits = g.matmul_nt(emb, pixels)?;
    Ok((class_logits, mask_logits))
}

/// Graph handles for a clip pass, kept per frame so losses can address any
/// frame. `matched` and `permutations` are the Hungarian alignment outputs;
/// they are data, not graph nodes, because the segmenter is frozen.
pub struct TrackerForward {
    pub q_tr: Vec<NodeId>,
    pub class_logits: Vec<NodeId>,
    pub mask_logits: Vec<NodeId>,
    pub matched: Vec<Tensor>,
    pub permutations: Vec<Vec<usize>>,
}

/// Runs the tracker over a clip inside an existing graph, so a training
/// loss can be attached to the returned nodes. Gradients flow across frames
/// through the previous-frame reference.
pub fn forward_clip(
    g: &mut Graph,
    cfg: &TrackerConfig,
    params: &TrackerParams,
    queries: &[Tensor],
    pixels: &[Tensor],
) -> Result<TrackerForward> {
    if queries.is_empty() {
        return Err(DvtError::Config("tracker needs at least one frame".into()));
    }
    if queries.len() != pixels.len() {
        return Err(DvtError::ShapeMismatch {
            op: "forward_clip",
            left: vec![queries.len()],
            right: vec![pixels.len()],
        });
    }
    let (n, d) = queries[0].as_2d();
    if d != cfg.dim {
        return Err(DvtError::ShapeMismatch {
            op: "forward_clip",
            left: queries[0].shape().to_vec(),
            right: vec![n, cfg.dim],
        });
    }

    let mut out = TrackerForward {
        q_tr: Vec::with_capacity(queries.len()),
        class_logits: Vec::with_capacity(queries.len()),
        mask_logits: Vec::with_capacity(queries.len()),
        matched: Vec::with_capacity(queries.len()),
        permutations: Vec::with_capacity(queries.len()),
    };

    let mut prev_q_tr: Option<NodeId> = None;
    for (t, raw) in queries.iter().enumerate() {
        let (matched, perm) = match t {
            0 => (raw.clone(), (0..n).collect::<Vec<usize>>()),
            _ => match_adjacent(&out.matched[t - 1], raw, cfg.cost_metric)?,
        };
        let kv = g.input(matched.clone());
        let init = match (t, cfg.init_strategy) {
            (0, _) => kv,
            (_, InitStrategy::MatchedQseg) => kv,
            (_, InitStrategy::RawQseg) => g.input(raw.clone()),
            (_, InitStrategy::Zero) => g.input(Tensor::zeros(vec![n, cfg.dim])),
            (_, InitStrategy::PrevQTr) => prev_q_tr.expect("set after frame 0"),
        };
        let reference = match prev_q_tr {
            Some(node) => node,
            None => init,
        };
        let q_tr = denoise_frame(g, cfg, params, init, reference, kv)?;
        let px = g.input(pixels[t].clone());
        let (class_logits, mask_logits) = apply_heads(g, params, q_tr, px)?;

        prev_q_tr = Some(q_tr);
        out.q_tr.push(q_tr);
        out.class_logits.push(class_logits);
        out.mask_logits.push(mask_logits);
        out.matched.push(matched);
        out.permutations.push(perm);
    }
    Ok(out)
}

/// Inference product: denoised queries, per-frame predictions, and the
/// matching permutation applied at each frame. Slot n means the same track
/// in every frame.
#[derive(Clone, Debug)]
pub struct TrackedSequence {
    pub q_tr: Vec<Tensor>,
    pub predictions: Vec<FramePrediction>,
    pub permutations: Vec<Vec<usize>>,
}

/// Streams a full video through the tracker with no gradient consumers.
pub fn track_video(
    store: &ParamStore,
    cfg: &TrackerConfig,
    params: &TrackerParams,
    queries: &[Tensor],
    pixels: &[Tensor],
) -> Result<TrackedSequence> {
    let mut g = Graph::new(store);
    let fwd = forward_clip(&mut g, cfg, params, queries, pixels)?;
    let predictions = fwd
        .class_logits
        .iter()
        .zip(&fwd.mask_logits)
        .map(|(&c, &m)| FramePrediction {
            class_logits: g.value(c).clone(),
            mask_logits: g.value(m).clone(),
        })
        .collect();
    Ok(TrackedSequence {
        q_tr: fwd.q_tr.iter().map(|&id| g.value(id).clone()).collect(),
        predictions,
        permutations: fwd.permutations,
    })
}
