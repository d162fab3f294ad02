use crate::error::{DvtError, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epsilon used by every layer norm in the model. Fixed here so training,
/// checkpoints and gradient checks agree.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Projections of one multi-head attention sublayer. All four maps are D×D;
/// D must divide evenly into `num_heads`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Three-layer MLP used by mask heads.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
}

/// Deterministic weight initializer. Weights draw from a symmetric uniform
/// range scaled by 1/sqrt(fan_in); biases start at zero. Residual-branch
/// output projections are zero-initialized so a freshly built block is an
/// identity map; that choice is load-bearing for warm starts and is covered
/// by tests.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform_tensor(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| (self.rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Tensor::new(shape, data).expect("constructed length")
    }

    pub fn linear(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<LinearParams> {
        let w = store.register(&format!("{prefix}.w"), self.uniform_tensor(vec![d_in, d_out], d_in))?;
        let b = store.register(&format!("{prefix}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(LinearParams { w, b })
    }

    pub fn linear_zero(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<LinearParams> {
        let w = store.register(&format!("{prefix}.w"), Tensor::zeros(vec![d_in, d_out]))?;
        let b = store.register(&format!("{prefix}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(LinearParams { w, b })
    }

    pub fn layer_norm(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
    ) -> Result<LayerNormParams> {
        let gamma = store.register(&format!("{prefix}.gamma"), Tensor::filled(vec![d], 1.0))?;
        let beta = store.register(&format!("{prefix}.beta"), Tensor::zeros(vec![d]))?;
        Ok(LayerNormParams { gamma, beta })
    }

    /// `zero_out` zeroes W_O so the residual branch starts silent.
    pub fn attention(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        num_heads: usize,
        zero_out: bool,
    ) -> Result<AttentionParams> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(DvtError::Config(format!(
                "attention dim {d} not divisible by {num_heads} heads"
            )));
        }
        let wq = self.linear(store, &format!("{prefix}.wq"), d, d)?;
        let wk = self.linear(store, &format!("{prefix}.wk"), d, d)?;
        let wv = self.linear(store, &format!("{prefix}.wv"), d, d)?;
        let wo = if zero_out {
            self.linear_zero(store, &format!("{prefix}.wo"), d, d)?
        } else {
            self.linear(store, &format!("{prefix}.wo"), d, d)?
        };
        Ok(AttentionParams {
            num_heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn ffn(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Result<FfnParams> {
        let lin1 = self.linear(store, &format!("{prefix}.lin1"), d, hidden)?;
        let lin2 = self.linear_zero(store, &format!("{prefix}.lin2"), hidden, d)?;
        Ok(FfnParams { lin1, lin2 })
    }

    pub fn conv(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        d_in: usize,
        d_out: usize,
        zero: bool,
    ) -> Result<ConvParams> {
        let kernel = if zero {
            store.register(&format!("{prefix}.kernel"), Tensor::zeros(vec![k, d_in, d_out]))?
        } else {
            store.register(
                &format!("{prefix}.kernel"),
                self.uniform_tensor(vec![k, d_in, d_out], k * d_in),
            )?
        };
        let bias = store.register(&format!("{prefix}.bias"), Tensor::zeros(vec![d_out]))?;
        Ok(ConvParams { kernel, bias })
    }

    pub fn mlp3(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
    ) -> Result<MlpParams> {
        let layers = (0..3)
            .map(|i| self.linear(store, &format!("{prefix}.lin{i}"), d, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpParams { layers })
    }
}

/// Scaled dot-product multi-head attention: heads computed on column slices
/// of the Q/K/V projections, concatenated, then projected by W_O. Scale is
/// 1/sqrt(D/num_heads).
pub fn mha(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    p: &AttentionParams,
) -> Result<NodeId> {
    if g.value(k).leading() == 0 || g.value(v).leading() == 0 {
        return Err(DvtError::EmptyKeys);
    }
    let d = g.value(q).last_dim();
    if g.value(k).last_dim() != d || g.value(v).last_dim() != d {
        return Err(DvtError::ShapeMismatch {
            op: "mha",
            left: g.value(q).shape().to_vec(),
            right: g.value(k).shape().to_vec(),
        });
    }
    let dh = d / p.num_heads;
    let qp = g.linear(q, p.wq.w, p.wq.b)?;
    let kp = g.linear(k, p.wk.w, p.wk.b)?;
    let vp = g.linear(v, p.wv.w, p.wv.b)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.num_heads);
    for h in 0..p.num_heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled, 1)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(heads)?;
    g.linear(cat, p.wo.w, p.wo.b)
}

pub fn ffn_forward(g: &mut Graph, x: NodeId, p: &FfnParams) -> Result<NodeId> {
    let h = g.linear(x, p.lin1.w, p.lin1.b)?;
    let h = g.gelu(h);
    g.linear(h, p.lin2.w, p.lin2.b)
}

pub fn mlp3_forward(g: &mut Graph, x: NodeId, p: &MlpParams) -> Result<NodeId> {
    let mut h = x;
    for (i, lin) in p.layers.iter().enumerate() {
        h = g.linear(h, lin.w, lin.b)?;
        if i + 1 < p.layers.len() {
            h = g.gelu(h);
        }
    }
    Ok(h)
}
