use crate::error::{DvtError, Result};
use crate::tensor::{
    gelu_grad, gelu_value, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor,
};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle into a [`Graph`]'s node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter registry shared by model construction, the optimizer and
/// checkpointing. Registration order is fixed by construction code, which
/// makes iteration deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(DvtError::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.entries[id.0].value.shape() {
            return Err(DvtError::ShapeMismatch {
                op: "ParamStore::set_value",
                left: self.entries[id.0].value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freeze every parameter whose name starts with `prefix`; returns how
    /// many were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
                n += 1;
            }
        }
        n
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn num_values(&self, prefix: Option<&str>) -> usize {
        self.entries
            .iter()
            .filter(|e| prefix.map_or(true, |p| e.name.starts_with(p)))
            .map(|e| e.value.numel())
            .sum()
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddBias { a: NodeId, bias: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Conv1d { x: NodeId, kernel: NodeId, bias: NodeId },
    GatherRows { a: NodeId, idx: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    WeightedCe { logits: NodeId, targets: Vec<usize>, weights: Vec<f64> },
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
    DiceWithLogits { logits: NodeId, targets: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// All-absent gradients for a store of `len` parameters; absent means
    /// zero to consumers.
    pub fn empty(len: usize) -> Self {
        Gradients {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Merge another pass's gradients into this one (gradient accumulation
    /// across clips in a batch).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads.iter()) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data().iter()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

/// Recorded operation graph. Forward values are computed eagerly as ops are
/// appended; `backward` replays the record once in reverse.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.value(id).clone();
        self.push(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).as_2d();
        let (kb, n) = self.value(b).as_2d();
        if k != kb {
            return Err(DvtError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// a @ b^T with a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).as_2d();
        let (n, kb) = self.value(b).as_2d();
        if k != kb {
            return Err(DvtError::ShapeMismatch {
                op: "matmul_nt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMulNt { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DvtError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { a, c }, value)
    }

    /// Broadcast-add a [d] bias over every row of a's 2D view.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, d) = self.value(a).as_2d();
        if self.value(bias).numel() != d {
            return Err(DvtError::ShapeMismatch {
                op: "add_bias",
                left: self.value(a).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for (x, bv) in data[i * d..(i + 1) * d].iter_mut().zip(b) {
                *x += bv;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias { a, bias }, value))
    }

    /// y = x W + b over the trailing axis.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wn = self.param(w);
        let bn = self.param(b);
        let xw = self.matmul(x, wn)?;
        self.add_bias(xw, bn)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(DvtError::InvalidShape {
                op: "softmax",
                details: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let value = softmax_forward(self.value(a), axis);
        Ok(self.push(Op::Softmax { a, axis }, value))
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
    ) -> Result<NodeId> {
        let d = self.value(a).last_dim();
        if self.store.value(gamma).numel() != d || self.store.value(beta).numel() != d {
            return Err(DvtError::ShapeMismatch {
                op: "layer_norm",
                left: self.value(a).shape().to_vec(),
                right: self.store.value(gamma).shape().to_vec(),
            });
        }
        let gn = self.param(gamma);
        let bn = self.param(beta);
        let value = layer_norm_forward(
            self.value(a),
            self.value(gn).data(),
            self.value(bn).data(),
            eps,
        );
        Ok(self.push(
            Op::LayerNorm {
                a,
                gamma: gn,
                beta: bn,
                eps,
            },
            value,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| gelu_value(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu { a }, value)
    }

    /// Temporal convolution over the rows of x: [T,D_in] with kernel
    /// [k,D_in,D_out], zero padding so the output is [T,D_out]. k must be odd.
    pub fn conv1d(&mut self, x: NodeId, kernel: ParamId, bias: ParamId) -> Result<NodeId> {
        let kshape = self.store.value(kernel).shape().to_vec();
        if kshape.len() != 3 {
            return Err(DvtError::InvalidShape {
                op: "conv1d",
                details: format!("kernel must be [k,D_in,D_out], got {kshape:?}"),
            });
        }
        let (k, din, dout) = (kshape[0], kshape[1], kshape[2]);
        if k % 2 == 0 {
            return Err(DvtError::Config(format!(
                "conv1d kernel width must be odd, got {k}"
            )));
        }
        let (t, xd) = self.value(x).as_2d();
        if xd != din {
            return Err(DvtError::ShapeMismatch {
                op: "conv1d",
                left: self.value(x).shape().to_vec(),
                right: kshape,
            });
        }
        if self.store.value(bias).numel() != dout {
            return Err(DvtError::ShapeMismatch {
                op: "conv1d",
                left: vec![dout],
                right: self.store.value(bias).shape().to_vec(),
            });
        }
        let kn = self.param(kernel);
        let bn = self.param(bias);
        let value = conv1d_forward(
            self.value(x).data(),
            self.value(kn).data(),
            self.value(bn).data(),
            t,
            k,
            din,
            dout,
        );
        Ok(self.push(
            Op::Conv1d {
                x,
                kernel: kn,
                bias: bn,
            },
            value,
        ))
    }

    /// Select rows of a's 2D view, in order, duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (r, d) = self.value(a).as_2d();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DvtError::InvalidShape {
                op: "gather_rows",
                details: format!("row {bad} out of range for {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(Op::GatherRows { a, idx }, value))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DvtError::InvalidShape {
                op: "concat_rows",
                details: "no parts".into(),
            });
        }
        let d = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (r, pd) = self.value(p).as_2d();
            if pd != d {
                return Err(DvtError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![d],
                    right: vec![pd],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(Op::ConcatRows { parts }, value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = self.value(a).as_2d();
        if start + len > d {
            return Err(DvtError::InvalidShape {
                op: "slice_cols",
                details: format!("cols {start}..{} out of range for width {d}", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { a, start, len }, value))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DvtError::InvalidShape {
                op: "concat_cols",
                details: "no parts".into(),
            });
        }
        let r = self.value(parts[0]).leading();
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in &parts {
                if self.value(p).leading() != r {
                    return Err(DvtError::ShapeMismatch {
                        op: "concat_cols",
                        left: vec![r],
                        right: vec![self.value(p).leading()],
                    });
                }
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols { parts }, value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape { a }, value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Scalar zero that participates in the graph (useful as an additive
    /// identity when folding loss terms).
    pub fn zero(&mut self) -> NodeId {
        self.input(Tensor::scalar(0.0))
    }

    /// Sum over rows of weights[r] * cross_entropy(logits[r], targets[r]),
    /// computed with a log-sum-exp shift.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        let (r, c) = self.value(logits).as_2d();
        if targets.len() != r || weights.len() != r {
            return Err(DvtError::InvalidShape {
                op: "weighted_cross_entropy",
                details: format!("{r} rows vs {} targets / {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(DvtError::InvalidShape {
                op: "weighted_cross_entropy",
                details: format!("target class {bad} out of range for {c} classes"),
            });
        }
        let mut total = 0.0;
        for i in 0..r {
            let row = self.value(logits).row(i);
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        let value = Tensor::scalar(total);
        Ok(self.push(Op::WeightedCe { logits, targets, weights }, value))
    }

    /// Mean binary cross-entropy between sigmoid(logits) and 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        if targets.len() != self.value(logits).numel() {
            return Err(DvtError::InvalidShape {
                op: "bce_with_logits",
                details: format!(
                    "{} logits vs {} targets",
                    self.value(logits).numel(),
                    targets.len()
                ),
            });
        }
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(&targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / n);
        Ok(self.push(Op::BceWithLogits { logits, targets }, value))
    }

    /// Soft dice loss 1 - (2*sum(s*y)+1)/(sum(s)+sum(y)+1) with s = sigmoid(logits).
    pub fn dice_with_logits(&mut self, logits: NodeId, targets: Vec<f64>) -> Result<NodeId> {
        if targets.len() != self.value(logits).numel() {
            return Err(DvtError::InvalidShape {
                op: "dice_with_logits",
                details: format!(
                    "{} logits vs {} targets",
                    self.value(logits).numel(),
                    targets.len()
                ),
            });
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(&targets) {
            let s = sigmoid(z);
            num += s * y;
            den += s + y;
        }
        let value = Tensor::scalar(1.0 - (2.0 * num + 1.0) / (den + 1.0));
        Ok(self.push(Op::DiceWithLogits { logits, targets }, value))
    }

    /// Reverse pass from a scalar loss node. Visits each recorded op exactly
    /// once; gradients of shared parameters accumulate additively.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DvtError::InvalidShape {
                op: "backward",
                details: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        lv.assert_finite("loss")?;

        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(gy) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let slot = &mut param_grads[pid.0];
                    let g = slot.get_or_insert_with(|| {
                        Tensor::zeros(self.store.value(*pid).shape().to_vec())
                    });
                    for (a, b) in g.data_mut().iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.value(*a).as_2d();
                    let n = self.value(*b).last_dim();
                    {
                        let ga = ensure(&mut node_grads, *a, m * k);
                        matmul_nt_acc(ga, &gy, self.value(*b).data(), m, n, k);
                    }
                    let gb = ensure(&mut node_grads, *b, k * n);
                    matmul_tn_acc(gb, self.value(*a).data(), &gy, m, k, n);
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = self.value(*a).as_2d();
                    let n = self.value(*b).leading();
                    {
                        let ga = ensure(&mut node_grads, *a, m * k);
                        matmul_acc(ga, &gy, self.value(*b).data(), m, n, k);
                    }
                    let gb = ensure(&mut node_grads, *b, n * k);
                    matmul_tn_acc(gb, &gy, self.value(*a).data(), m, n, k);
                }
                Op::Add { a, b } => {
                    axpy(ensure(&mut node_grads, *a, gy.len()), &gy, 1.0);
                    axpy(ensure(&mut node_grads, *b, gy.len()), &gy, 1.0);
                }
                Op::Scale { a, c } => {
                    axpy(ensure(&mut node_grads, *a, gy.len()), &gy, *c);
                }
                Op::AddBias { a, bias } => {
                    let (r, d) = self.value(*a).as_2d();
                    axpy(ensure(&mut node_grads, *a, gy.len()), &gy, 1.0);
                    let gb = ensure(&mut node_grads, *bias, d);
                    for i in 0..r {
                        for (g, v) in gb.iter_mut().zip(&gy[i * d..(i + 1) * d]) {
                            *g += v;
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    let ga = ensure(&mut node_grads, *a, gy.len());
                    softmax_backward(ga, node.value.shape(), node.value.data(), &gy, *axis);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    layer_norm_backward(
                        &mut node_grads,
                        self.value(*a),
                        self.value(*gamma).data(),
                        *eps,
                        &gy,
                        *a,
                        *gamma,
                        *beta,
                    );
                }
                Op::Gelu { a } => {
                    let x = self.value(*a).data();
                    let ga = ensure(&mut node_grads, *a, gy.len());
                    for ((g, &xv), &gv) in ga.iter_mut().zip(x).zip(&gy) {
                        *g += gv * gelu_grad(xv);
                    }
                }
                Op::Conv1d { x, kernel, bias } => {
                    conv1d_backward(self, &mut node_grads, *x, *kernel, *bias, &gy);
                }
                Op::GatherRows { a, idx } => {
                    let d = self.value(*a).last_dim();
                    let numel = self.value(*a).numel();
                    let ga = ensure(&mut node_grads, *a, numel);
                    for (out_row, &src) in idx.iter().enumerate() {
                        for (g, v) in ga[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(&gy[out_row * d..(out_row + 1) * d])
                        {
                            *g += v;
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let numel = self.value(p).numel();
                        axpy(ensure(&mut node_grads, p, numel), &gy[offset..offset + numel], 1.0);
                        offset += numel;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let (r, d) = self.value(*a).as_2d();
                    let ga = ensure(&mut node_grads, *a, r * d);
                    for i in 0..r {
                        for (g, v) in ga[i * d + start..i * d + start + len]
                            .iter_mut()
                            .zip(&gy[i * len..(i + 1) * len])
                        {
                            *g += v;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let r = node.value.leading();
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.value(p).last_dim();
                        let gp = ensure(&mut node_grads, p, r * d);
                        for i in 0..r {
                            for (g, v) in gp[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&gy[i * total + offset..i * total + offset + d])
                            {
                                *g += v;
                            }
                        }
                        offset += d;
                    }
                }
                Op::Reshape { a } => {
                    axpy(ensure(&mut node_grads, *a, gy.len()), &gy, 1.0);
                }
                Op::Sum { a } => {
                    let numel = self.value(*a).numel();
                    let ga = ensure(&mut node_grads, *a, numel);
                    for g in ga.iter_mut() {
                        *g += gy[0];
                    }
                }
                Op::WeightedCe { logits, targets, weights } => {
                    let (r, c) = self.value(*logits).as_2d();
                    let logits_t = self.value(*logits);
                    let gl = ensure(&mut node_grads, *logits, r * c);
                    for i in 0..r {
                        let row = logits_t.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += gy[0] * weights[i] * (p - ind);
                        }
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let n = targets.len() as f64;
                    let gl = ensure(&mut node_grads, *logits, z.len());
                    for ((g, &zv), &yv) in gl.iter_mut().zip(z).zip(targets) {
                        *g += gy[0] * (sigmoid(zv) - yv) / n;
                    }
                }
                Op::DiceWithLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (&zv, &yv) in z.iter().zip(targets) {
                        let s = sigmoid(zv);
                        num += s * yv;
                        den += s + yv;
                    }
                    let num = 2.0 * num + 1.0;
                    let den = den + 1.0;
                    let gl = ensure(&mut node_grads, *logits, z.len());
                    for ((g, &zv), &yv) in gl.iter_mut().zip(z).zip(targets) {
                        let s = sigmoid(zv);
                        let dds = -(2.0 * yv * den - num) / (den * den);
                        *g += gy[0] * dds * s * (1.0 - s);
                    }
                }
            }
        }

        Ok(Gradients { grads: param_grads })
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; numel])
}

fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(data[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - m).exp();
                data[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[at(j)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("same shape")
}

fn softmax_backward(ga: &mut [f64], shape: &[usize], y: &[f64], gy: &[f64], axis: usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += gy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                ga[at(j)] += y[at(j)] * (gy[at(j)] - dot);
            }
        }
    }
}

fn layer_norm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (rows, d) = x.as_2d();
    let mut data = vec![0.0; rows * d];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sigma = (var + eps).sqrt();
        for j in 0..d {
            data[i * d + j] = gamma[j] * (row[j] - mean) / sigma + beta[j];
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    node_grads: &mut [Option<Vec<f64>>],
    x: &Tensor,
    gamma: &[f64],
    eps: f64,
    gy: &[f64],
    a: NodeId,
    gamma_node: NodeId,
    beta_node: NodeId,
) {
    let (rows, d) = x.as_2d();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    {
        let ga = ensure(node_grads, a, rows * d);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let sigma = (var + eps).sqrt();
            let gyr = &gy[i * d..(i + 1) * d];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mean) / sigma;
                let g = gyr[j] * gamma[j];
                mean_g += g;
                mean_gx += g * xhat;
                dgamma[j] += gyr[j] * xhat;
                dbeta[j] += gyr[j];
            }
            mean_g /= d as f64;
            mean_gx /= d as f64;
            for j in 0..d {
                let xhat = (row[j] - mean) / sigma;
                let g = gyr[j] * gamma[j];
                ga[i * d + j] += (g - mean_g - xhat * mean_gx) / sigma;
            }
        }
    }
    axpy(ensure(node_grads, gamma_node, d), &dgamma, 1.0);
    axpy(ensure(node_grads, beta_node, d), &dbeta, 1.0);
}

fn conv1d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    t_len: usize,
    k: usize,
    din: usize,
    dout: usize,
) -> Tensor {
    let c = (k - 1) / 2;
    let mut out = vec![0.0; t_len * dout];
    for t in 0..t_len {
        let o_row = &mut out[t * dout..(t + 1) * dout];
        o_row.copy_from_slice(bias);
        for j in 0..k {
            let s = t + j;
            if s < c || s - c >= t_len {
                continue;
            }
            let s = s - c;
            let x_row = &x[s * din..(s + 1) * din];
            for (i, &xv) in x_row.iter().enumerate() {
                let k_row = &kernel[(j * din + i) * dout..(j * din + i + 1) * dout];
                for (o, &kv) in o_row.iter_mut().zip(k_row) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::new(vec![t_len, dout], out).expect("constructed length")
}

fn conv1d_backward(
    g: &Graph,
    node_grads: &mut [Option<Vec<f64>>],
    x: NodeId,
    kernel: NodeId,
    bias: NodeId,
    gy: &[f64],
) {
    let (t_len, din) = g.value(x).as_2d();
    let kshape = g.value(kernel).shape().to_vec();
    let (k, dout) = (kshape[0], kshape[2]);
    let c = (k - 1) / 2;
    let xv = g.value(x).data();
    let kv = g.value(kernel).data();

    {
        let gk = ensure(node_grads, kernel, k * din * dout);
        for t in 0..t_len {
            let gy_row = &gy[t * dout..(t + 1) * dout];
            for j in 0..k {
                let s = t + j;
                if s < c || s - c >= t_len {
                    continue;
                }
                let s = s - c;
                for i in 0..din {
                    let xval = xv[s * din + i];
                    let gk_row = &mut gk[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (gkv, &gyv) in gk_row.iter_mut().zip(gy_row) {
                        *gkv += xval * gyv;
                    }
                }
            }
        }
    }
    {
        let gx = ensure(node_grads, x, t_len * din);
        for t in 0..t_len {
            let gy_row = &gy[t * dout..(t + 1) * dout];
            for j in 0..k {
                let s = t + j;
                if s < c || s - c >= t_len {
                    continue;
                }
                let s = s - c;
                for i in 0..din {
                    let k_row = &kv[(j * din + i) * dout..(j * din + i + 1) * dout];
                    let mut acc = 0.0;
                    for (&kvv, &gyv) in k_row.iter().zip(gy_row) {
                        acc += kvv * gyv;
                    }
                    gx[s * din + i] += acc;
                }
            }
        }
    }
    {
        let gb = ensure(node_grads, bias, dout);
        for t in 0..t_len {
            for (gbv, &gyv) in gb.iter_mut().zip(&gy[t * dout..(t + 1) * dout]) {
                *gbv += gyv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(name, shape, data)| {
                store
                    .register(name, Tensor::new(shape.clone(), data.clone()).unwrap())
                    .unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn linear_identity_and_hand_example() {
        let (store, ids) = store_with(&[
            ("w_id", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            ("b0", vec![2], vec![0.0, 0.0]),
            ("w_swap", vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]),
            ("b1", vec![2], vec![1.0, 1.0]),
        ]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let y = g.linear(x, ids[0], ids[1]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x2 = g.input(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let y2 = g.linear(x2, ids[2], ids[3]).unwrap();
        assert_eq!(g.value(y2).data(), &[4.0, 3.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let (store, ids) = store_with(&[
            ("w", vec![3, 2], vec![0.0; 6]),
            ("b", vec![2], vec![0.0; 2]),
        ]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(vec![1, 2]));
        let err = g.linear(x, ids[0], ids[1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_trivial_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 0.5).abs() < 1e-12);

        let x2 = g.input(Tensor::new(vec![1, 2], vec![2.0_f64.ln(), 0.0]).unwrap());
        let y2 = g.softmax(x2, 1).unwrap();
        assert!((g.value(y2).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y2).data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_reference_and_shift_invariance() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vals = vec![0.3, -1.2, 2.5, 0.0, 1.1];
        let x = g.input(Tensor::new(vec![1, 5], vals.clone()).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let denom: f64 = vals.iter().map(|v| v.exp()).sum();
        for (out, v) in g.value(y).data().iter().zip(&vals) {
            assert!((out - v.exp() / denom).abs() < 1e-12);
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.0).collect();
        let xs = g.input(Tensor::new(vec![1, 5], shifted).unwrap());
        let ys = g.softmax(xs, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let total: f64 = g.value(y).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_axis_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let (store, ids) = store_with(&[
            ("gamma", vec![2], vec![1.0, 1.0]),
            ("beta", vec![2], vec![0.0, 0.0]),
        ]);
        let mut g = Graph::new(&store);
        let constant = g.input(Tensor::new(vec![1, 2], vec![3.0, 3.0]).unwrap());
        let y = g.layer_norm(constant, ids[0], ids[1], 1e-5).unwrap();
        for v in g.value(y).data() {
            assert!(v.abs() < 1e-6);
        }

        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y2 = g.layer_norm(x, ids[0], ids[1], 1e-12).unwrap();
        assert!((g.value(y2).data()[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y2).data()[1] + 1.0).abs() < 1e-6);

        // Random vector against the direct formula.
        let vals = vec![0.4, -2.0, 1.3, 0.7];
        let (store2, ids2) = store_with(&[
            ("gamma", vec![4], vec![1.5, 0.5, -1.0, 2.0]),
            ("beta", vec![4], vec![0.1, 0.2, 0.3, 0.4]),
        ]);
        let mut g2 = Graph::new(&store2);
        let x2 = g2.input(Tensor::new(vec![1, 4], vals.clone()).unwrap());
        let eps = 1e-5;
        let y3 = g2.layer_norm(x2, ids2[0], ids2[1], eps).unwrap();
        let mean: f64 = vals.iter().sum::<f64>() / 4.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let gamma = store2.value(ids2[0]).data();
        let beta = store2.value(ids2[1]).data();
        for j in 0..4 {
            let expect = gamma[j] * (vals[j] - mean) / (var + eps).sqrt() + beta[j];
            assert!((g2.value(y3).data()[j] - expect).abs() < 1e-10);
        }

        let (rows, _) = g2.value(y3).as_2d();
        assert_eq!(rows, 1);
    }

    #[test]
    fn conv1d_pointwise_identity_and_single_frame() {
        let ident = vec![1.0, 0.0, 0.0, 1.0];
        let (store, ids) = store_with(&[
            ("k1", vec![1, 2, 2], ident),
            ("b", vec![2], vec![0.0, 0.0]),
            ("k5", vec![5, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5]),
            ("b5", vec![1], vec![0.25]),
        ]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.conv1d(x, ids[0], ids[1]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        // T=1: every tap except the center lands in padding.
        let x1 = g.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y1 = g.conv1d(x1, ids[2], ids[3]).unwrap();
        assert!((g.value(y1).data()[0] - (2.0 * 0.3 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn conv1d_matches_scalar_loop_oracle() {
        let t_len = 6;
        let k = 5;
        let din = 3;
        let dout = 2;
        let xv: Vec<f64> = (0..t_len * din).map(|i| (i as f64 * 0.37).sin()).collect();
        let kv: Vec<f64> = (0..k * din * dout).map(|i| (i as f64 * 0.11).cos()).collect();
        let bv = vec![0.5, -0.25];
        let (store, ids) = store_with(&[
            ("k", vec![k, din, dout], kv.clone()),
            ("b", vec![dout], bv.clone()),
        ]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![t_len, din], xv.clone()).unwrap());
        let y = g.conv1d(x, ids[0], ids[1]).unwrap();

        let c = (k - 1) / 2;
        for t in 0..t_len {
            for o in 0..dout {
                let mut expect = bv[o];
                for j in 0..k {
                    let s = t as isize + j as isize - c as isize;
                    if s < 0 || s >= t_len as isize {
                        continue;
                    }
                    for i in 0..din {
                        expect += xv[s as usize * din + i] * kv[(j * din + i) * dout + o];
                    }
                }
                assert!((g.value(y).data()[t * dout + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let (store, ids) = store_with(&[
            ("k", vec![4, 1, 1], vec![0.0; 4]),
            ("b", vec![1], vec![0.0]),
        ]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(vec![3, 1]));
        assert!(matches!(
            g.conv1d(x, ids[0], ids[1]),
            Err(DvtError::Config(_))
        ));
    }

    #[test]
    fn gather_concat_slice_round_trips() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = g.gather_rows(x, vec![2, 0, 1]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);

        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 1).unwrap();
        let back = g.concat_cols(vec![left, right]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());

        let r0 = g.gather_rows(x, vec![0]).unwrap();
        let r12 = g.gather_rows(x, vec![1, 2]).unwrap();
        let stacked = g.concat_rows(vec![r0, r12]).unwrap();
        assert_eq!(g.value(stacked).data(), g.value(x).data());
    }

    #[test]
    fn weighted_ce_matches_direct_formula() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = vec![0.2, -0.5, 1.0, 0.0, 0.3, -0.3, 2.0, -2.0];
        let x = g.input(Tensor::new(vec![2, 4], logits.clone()).unwrap());
        let loss = g
            .weighted_cross_entropy(x, vec![2, 0], vec![1.0, 0.1])
            .unwrap();
        let mut expect = 0.0;
        for (r, &(t, w)) in [(2usize, 1.0f64), (0, 0.1)].iter().enumerate() {
            let row = &logits[r * 4..(r + 1) * 4];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect += w * -(row[t].exp() / denom).ln();
        }
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn bce_and_dice_match_direct_formulas() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = vec![0.5, -1.0, 2.0, 0.0];
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let x = g.input(Tensor::new(vec![4], z.clone()).unwrap());
        let bce = g.bce_with_logits(x, y.clone()).unwrap();
        let mut expect = 0.0;
        for (&zv, &yv) in z.iter().zip(&y) {
            let s = 1.0 / (1.0 + (-zv as f64).exp());
            expect += -(yv * s.ln() + (1.0 - yv) * (1.0 - s).ln());
        }
        expect /= 4.0;
        assert!((g.value(bce).data()[0] - expect).abs() < 1e-10);

        let dice = g.dice_with_logits(x, y.clone()).unwrap();
        let s: Vec<f64> = z.iter().map(|&zv| 1.0 / (1.0 + (-zv).exp())).collect();
        let num: f64 = 2.0 * s.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() + 1.0;
        let den: f64 = s.iter().sum::<f64>() + y.iter().sum::<f64>() + 1.0;
        assert!((g.value(dice).data()[0] - (1.0 - num / den)).abs() < 1e-10);
    }

    #[test]
    fn backward_shared_param_accumulates() {
        // loss = sum(x W) + sum(x W) uses W twice; gradient must be doubled.
        let (store, ids) = store_with(&[("w", vec![2, 1], vec![1.0, 1.0])]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let y1 = {
            let w = g.param(ids[0]);
            g.matmul(x, w).unwrap()
        };
        let y2 = {
            let w = g.param(ids[0]);
            g.matmul(x, w).unwrap()
        };
        let tot = g.add(y1, y2).unwrap();
        let loss = g.sum(tot);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let store = ParamStore::new();
        let g = {
            let mut g = Graph::new(&store);
            g.input(Tensor::zeros(vec![2, 2]));
            g
        };
        assert!(g.backward(NodeId(0)).is_err());
    }

    #[test]
    fn freeze_prefix_marks_parameters() {
        let (mut store, ids) = store_with(&[
            ("tracker.block0.w", vec![1], vec![0.0]),
            ("refiner.block0.w", vec![1], vec![0.0]),
        ]);
        assert_eq!(store.freeze_prefix("tracker."), 1);
        assert!(!store.is_trainable(ids[0]));
        assert!(store.is_trainable(ids[1]));
    }
}
