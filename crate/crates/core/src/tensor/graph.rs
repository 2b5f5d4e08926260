use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub type NodeId = usize;

/// Probabilities below this are clamped before `log`, so composed
/// softmax+log pipelines stay finite.
pub const LOG_CLAMP: f32 = 1e-12;

const NEG_FILL: f32 = -1.0e9;

/// The primitive set. Attributes (axes, lookup ids, fill values) travel with
/// the op so a node is fully described by `(op, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveOp {
    /// inputs: a `[m,k]`, b `[k,n]` -> `[m,n]`
    Matmul,
    /// elementwise with row/column/scalar broadcasting on either side
    Add,
    /// elementwise with row/column/scalar broadcasting on either side
    Mul,
    /// inputs: any number of tensors stacked along `axis` (0 or 1)
    Concat { axis: usize },
    Tanh,
    Sigmoid,
    Relu,
    /// normalizes along `axis` (0 = down columns, 1 = across rows)
    Softmax { axis: usize },
    /// elementwise `ln(max(x, LOG_CLAMP))`
    Log,
    /// `None`: full mean -> `[1,1]`; `Some(0)`: column means -> `[1,c]`;
    /// `Some(1)`: row means -> `[r,1]`
    Mean { axis: Option<usize> },
    /// input: table `[v,d]` -> `[ids.len(), d]`
    EmbeddingLookup { ids: Vec<u32> },
    /// inputs: state `[2,h]` (rows h;c), x `[1,i]`, wx `[i,4h]`, wh `[h,4h]`,
    /// b `[1,4h]` -> next state `[2,h]`; gate order i,f,g,o
    LstmCell,
    /// inputs: x, keep-mask (broadcastable; >=0.5 keeps) -> x or `fill`
    MaskedFill { fill: f32 },
    /// inputs: x `[r,d]`, gain `[1,d]`, bias `[1,d]`; row-wise normalization
    LayerNorm { eps: f32 },
}

impl PrimitiveOp {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveOp::Matmul => "matmul",
            PrimitiveOp::Add => "add",
            PrimitiveOp::Mul => "mul",
            PrimitiveOp::Concat { .. } => "concat",
            PrimitiveOp::Tanh => "tanh",
            PrimitiveOp::Sigmoid => "sigmoid",
            PrimitiveOp::Relu => "relu",
            PrimitiveOp::Softmax { .. } => "softmax",
            PrimitiveOp::Log => "log",
            PrimitiveOp::Mean { .. } => "mean",
            PrimitiveOp::EmbeddingLookup { .. } => "embedding-lookup",
            PrimitiveOp::LstmCell => "lstm-cell",
            PrimitiveOp::MaskedFill { .. } => "masked-fill",
            PrimitiveOp::LayerNorm { .. } => "layer-norm",
        }
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Param(String),
    Prim(PrimitiveOp),
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Recording computation graph. Applying a primitive appends a node (inputs
/// always precede it) and eagerly computes its value. Parameters are read
/// from a borrowed, frozen [`ParamStore`], so independent graphs over the
/// same store can run on separate threads.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
}

/// Gradient map produced by [`Graph::backward`]: one entry per node that
/// requires grad (per-site, e.g. one per embedding lookup), plus gradients
/// accumulated per parameter name.
pub struct Gradients {
    node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.node.get(id).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_param_grads(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(64),
            vals: Vec::with_capacity(64),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id]
    }

    /// Insert an input tensor. Its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let requires_grad = tensor.requires_grad();
        self.push(OpKind::Leaf, vec![], requires_grad, tensor)
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(false);
        self.push(OpKind::Leaf, vec![], false, tensor)
    }

    /// Reference a registered parameter by name.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let tensor = self.params.get(name)?.clone();
        Ok(self.push(OpKind::Param(name.to_string()), vec![], true, tensor))
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, requires_grad: bool, val: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            requires_grad,
        });
        self.vals.push(val);
        id
    }

    /// Apply a primitive to existing nodes, appending the result node.
    pub fn apply(&mut self, op: PrimitiveOp, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            if id >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "input node {id} does not exist"
                )));
            }
        }
        let val = self.eval(&op, inputs)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(OpKind::Prim(op), inputs.to_vec(), requires_grad, val))
    }

    // ── sugar ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Mul, &[a, b])
    }
    pub fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply(PrimitiveOp::Concat { axis }, inputs)
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Relu, &[a])
    }
    pub fn softmax(&mut self, axis: usize, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Softmax { axis }, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Log, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, axis: usize, a: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::Mean { axis: Some(axis) }, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.apply(PrimitiveOp::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }
    pub fn lstm_cell(
        &mut self,
        state: NodeId,
        x: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        self.apply(PrimitiveOp::LstmCell, &[state, x, wx, wh, b])
    }
    pub fn masked_fill(&mut self, x: NodeId, keep: NodeId, fill: f32) -> Result<NodeId> {
        self.apply(PrimitiveOp::MaskedFill { fill }, &[x, keep])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(PrimitiveOp::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }

    /// Scalar constant times a node.
    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(factor));
        self.mul(a, c)
    }

    /// Extract row `i` as `[1, c]` via a constant selector.
    pub fn pick_row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let (r, _) = self.vals[a].dims2();
        if i >= r {
            return Err(Error::InvalidArgument(format!(
                "row {i} out of range for {r} rows"
            )));
        }
        let mut sel = vec![0.0; r];
        sel[i] = 1.0;
        let s = self.constant(Tensor::row(sel));
        self.matmul(s, a)
    }

    /// Dot product of two same-width single-row tensors -> `[1,1]`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, c) = self.vals[a].dims2();
        let m = self.mul(a, b)?;
        let avg = self.mean(m)?;
        self.scale(avg, c as f32)
    }

    /// Masked scaled-dot attention of a `[1,d]` query over `[n,d]` keys and
    /// values. `keep` is an optional `[n,1]` mask. Returns the pooled `[1,d]`
    /// vector and the `[n,1]` attention weight node.
    pub fn attention(
        &mut self,
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        keep: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let (n, d) = self.vals[keys].dims2();
        let prod = self.mul(keys, query)?; // [n,d] row-broadcast
        let row_avg = self.mean_axis(1, prod)?; // [n,1]
        // row mean * d recovers the dot product; fold in 1/sqrt(d) scaling
        let scores = self.scale(row_avg, d as f32 / (d as f32).sqrt())?;
        let scores = match keep {
            Some(mask) => self.masked_fill(scores, mask, NEG_FILL)?,
            None => scores,
        };
        let alpha = self.softmax(0, scores)?; // [n,1]
        let weighted = self.mul(values, alpha)?; // [n,d] column-broadcast
        let col_avg = self.mean_axis(0, weighted)?; // [1,d]
        let pooled = self.scale(col_avg, n as f32)?;
        Ok((pooled, alpha))
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let wn = self.param(w)?;
        let bn = self.param(b)?;
        let xw = self.matmul(x, wn)?;
        self.add(xw, bn)
    }

    // ── forward evaluation ──────────────────────────────────────────

    fn eval(&self, op: &PrimitiveOp, inputs: &[NodeId]) -> Result<Tensor> {
        let arity_err = |want: &str| {
            Err(Error::ShapeMismatch {
                op: op.name(),
                details: format!("expected {want} inputs, got {}", inputs.len()),
            })
        };
        match op {
            PrimitiveOp::Matmul => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                eval_matmul(&self.vals[inputs[0]], &self.vals[inputs[1]])
            }
            PrimitiveOp::Add | PrimitiveOp::Mul => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                let is_add = matches!(op, PrimitiveOp::Add);
                eval_broadcast_binary(
                    op.name(),
                    &self.vals[inputs[0]],
                    &self.vals[inputs[1]],
                    |a, b| if is_add { a + b } else { a * b },
                )
            }
            PrimitiveOp::Concat { axis } => {
                if inputs.is_empty() {
                    return arity_err(">= 1");
                }
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &self.vals[i]).collect();
                eval_concat(*axis, &tensors)
            }
            PrimitiveOp::Tanh | PrimitiveOp::Sigmoid | PrimitiveOp::Relu | PrimitiveOp::Log => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                let x = &self.vals[inputs[0]];
                let f: fn(f32) -> f32 = match op {
                    PrimitiveOp::Tanh => |v| v.tanh(),
                    PrimitiveOp::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
                    PrimitiveOp::Relu => |v| v.max(0.0),
                    _ => |v| v.max(LOG_CLAMP).ln(),
                };
                Tensor::new(x.shape().to_vec(), x.iter().map(|&v| f(v)).collect())
            }
            PrimitiveOp::Softmax { axis } => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                eval_softmax(*axis, &self.vals[inputs[0]])
            }
            PrimitiveOp::Mean { axis } => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                eval_mean(*axis, &self.vals[inputs[0]])
            }
            PrimitiveOp::EmbeddingLookup { ids } => {
                if inputs.len() != 1 {
                    return arity_err("1");
                }
                eval_embedding(&self.vals[inputs[0]], ids)
            }
            PrimitiveOp::LstmCell => {
                if inputs.len() != 5 {
                    return arity_err("5");
                }
                let v: Vec<&Tensor> = inputs.iter().map(|&i| &self.vals[i]).collect();
                eval_lstm_cell(v[0], v[1], v[2], v[3], v[4]).map(|(out, _)| out)
            }
            PrimitiveOp::MaskedFill { fill } => {
                if inputs.len() != 2 {
                    return arity_err("2");
                }
                eval_masked_fill(&self.vals[inputs[0]], &self.vals[inputs[1]], *fill)
            }
            PrimitiveOp::LayerNorm { eps } => {
                if inputs.len() != 3 {
                    return arity_err("3");
                }
                eval_layer_norm(
                    &self.vals[inputs[0]],
                    &self.vals[inputs[1]],
                    &self.vals[inputs[2]],
                    *eps,
                )
            }
        }
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Reverse-mode differentiation from a scalar loss node. Produces
    /// per-node gradients for everything that requires grad and reaches the
    /// loss; requires-grad leaves and parameters that do not reach it get
    /// zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "loss node {loss} does not exist"
            )));
        }
        if !self.vals[loss].is_scalar() {
            return Err(Error::NonScalarLoss(self.vals[loss].shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(self.vals[loss].shape().to_vec(), vec![1.0]).unwrap());

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(dout) = grads[id].take() else {
                continue;
            };
            if let OpKind::Prim(op) = &self.nodes[id].op {
                let inputs = &self.nodes[id].inputs;
                let dins = self.vjp(op, inputs, id, &dout)?;
                for (&inp, din) in inputs.iter().zip(dins) {
                    if let Some(din) = din {
                        if self.nodes[inp].requires_grad {
                            accumulate(&mut grads[inp], din);
                        }
                    }
                }
            }
            grads[id] = Some(dout);
        }

        // drop gradients on pure intermediates, keep leaves/params/lookups
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(
                node.op,
                OpKind::Leaf | OpKind::Param(_) | OpKind::Prim(PrimitiveOp::EmbeddingLookup { .. })
            );
            if !keep {
                continue;
            }
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.vals[id].shape().to_vec()));
            if let OpKind::Param(name) = &node.op {
                match params.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
            node_grads[id] = Some(g);
        }

        Ok(Gradients {
            node: node_grads,
            params,
        })
    }

    fn vjp(
        &self,
        op: &PrimitiveOp,
        inputs: &[NodeId],
        out_id: NodeId,
        dout: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let out = &self.vals[out_id];
        match op {
            PrimitiveOp::Matmul => {
                let a = &self.vals[inputs[0]];
                let b = &self.vals[inputs[1]];
                let (m, k) = a.dims2();
                let (_, n) = b.dims2();
                let mut da = vec![0.0f32; m * k];
                let mut db = vec![0.0f32; k * n];
                matmul_nt(dout.data(), b.data(), &mut da, m, n, k);
                matmul_tn(a.data(), dout.data(), &mut db, k, m, n);
                Ok(vec![
                    Some(Tensor::new(a.shape().to_vec(), da)?),
                    Some(Tensor::new(b.shape().to_vec(), db)?),
                ])
            }
            PrimitiveOp::Add => {
                let a = &self.vals[inputs[0]];
                let b = &self.vals[inputs[1]];
                Ok(vec![
                    Some(reduce_to_shape(dout, a.shape(), a.dims2())),
                    Some(reduce_to_shape(dout, b.shape(), b.dims2())),
                ])
            }
            PrimitiveOp::Mul => {
                let a = &self.vals[inputs[0]];
                let b = &self.vals[inputs[1]];
                let da_full = broadcast_combine(dout, b, |d, v| d * v);
                let db_full = broadcast_combine(dout, a, |d, v| d * v);
                Ok(vec![
                    Some(reduce_to_shape(&da_full, a.shape(), a.dims2())),
                    Some(reduce_to_shape(&db_full, b.shape(), b.dims2())),
                ])
            }
            PrimitiveOp::Concat { axis } => {
                let (_, out_c) = out.dims2();
                let mut outputs = Vec::with_capacity(inputs.len());
                let mut offset = 0usize;
                for &inp in inputs {
                    let t = &self.vals[inp];
                    let (r, c) = t.dims2();
                    let mut d = vec![0.0f32; r * c];
                    if *axis == 0 {
                        d.copy_from_slice(&dout.data()[offset * out_c..(offset + r) * out_c]);
                        offset += r;
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = dout.data()[i * out_c + offset + j];
                            }
                        }
                        offset += c;
                    }
                    outputs.push(Some(Tensor::new(t.shape().to_vec(), d)?));
                }
                Ok(outputs)
            }
            PrimitiveOp::Tanh => {
                let d = out
                    .iter()
                    .zip(dout.iter())
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                Ok(vec![Some(Tensor::new(out.shape().to_vec(), d)?)])
            }
            PrimitiveOp::Sigmoid => {
                let d = out
                    .iter()
                    .zip(dout.iter())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                Ok(vec![Some(Tensor::new(out.shape().to_vec(), d)?)])
            }
            PrimitiveOp::Relu => {
                let x = &self.vals[inputs[0]];
                let d = x
                    .iter()
                    .zip(dout.iter())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Ok(vec![Some(Tensor::new(out.shape().to_vec(), d)?)])
            }
            PrimitiveOp::Log => {
                let x = &self.vals[inputs[0]];
                let d = x
                    .iter()
                    .zip(dout.iter())
                    .map(|(&v, &g)| g / v.max(LOG_CLAMP))
                    .collect();
                Ok(vec![Some(Tensor::new(out.shape().to_vec(), d)?)])
            }
            PrimitiveOp::Softmax { axis } => {
                let (r, c) = out.dims2();
                let y = out.data();
                let dy = dout.data();
                let mut dx = vec![0.0f32; r * c];
                let (slices, len, stride_outer, stride_inner) = if *axis == 1 {
                    (r, c, c, 1)
                } else {
                    (c, r, 1, c)
                };
                for s in 0..slices {
                    let mut inner = 0.0f64;
                    for i in 0..len {
                        let idx = s * stride_outer + i * stride_inner;
                        inner += (dy[idx] * y[idx]) as f64;
                    }
                    for i in 0..len {
                        let idx = s * stride_outer + i * stride_inner;
                        dx[idx] = y[idx] * (dy[idx] - inner as f32);
                    }
                }
                Ok(vec![Some(Tensor::new(out.shape().to_vec(), dx)?)])
            }
            PrimitiveOp::Mean { axis } => {
                let x = &self.vals[inputs[0]];
                let (r, c) = x.dims2();
                let mut d = vec![0.0f32; r * c];
                match axis {
                    None => {
                        let g = dout.item() / (r * c) as f32;
                        d.iter_mut().for_each(|v| *v = g);
                    }
                    Some(0) => {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = dout.data()[j] / r as f32;
                            }
                        }
                    }
                    Some(_) => {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = dout.data()[i] / c as f32;
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(x.shape().to_vec(), d)?)])
            }
            PrimitiveOp::EmbeddingLookup { ids } => {
                let table = &self.vals[inputs[0]];
                let (v, dcols) = table.dims2();
                let mut d = vec![0.0f32; v * dcols];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = id as usize * dcols;
                    let src = row * dcols;
                    for j in 0..dcols {
                        d[dst + j] += dout.data()[src + j];
                    }
                }
                Ok(vec![Some(Tensor::new(table.shape().to_vec(), d)?)])
            }
            PrimitiveOp::LstmCell => {
                let v: Vec<&Tensor> = inputs.iter().map(|&i| &self.vals[i]).collect();
                lstm_cell_vjp(v[0], v[1], v[2], v[3], v[4], dout)
            }
            PrimitiveOp::MaskedFill { .. } => {
                let x = &self.vals[inputs[0]];
                let keep = &self.vals[inputs[1]];
                let masked = broadcast_combine(dout, keep, |d, m| if m >= 0.5 { d } else { 0.0 });
                Ok(vec![
                    Some(reduce_to_shape(&masked, x.shape(), x.dims2())),
                    None,
                ])
            }
            PrimitiveOp::LayerNorm { eps } => {
                let x = &self.vals[inputs[0]];
                let gain = &self.vals[inputs[1]];
                layer_norm_vjp(x, gain, dout, *eps)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

// ── kernels ─────────────────────────────────────────────────────────

fn eval_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            details: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] = d[m,n] @ b[k,n]^T
fn matmul_nt(d: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0f32;
            let drow = &d[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                acc += drow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
}

/// out[k,n] = a[m,k]^T @ d[m,n]
fn matmul_tn(a: &[f32], d: &[f32], out: &mut [f32], k: usize, m: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &d[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * drow[j];
            }
        }
    }
}

fn broadcast_dims(
    op: &'static str,
    (ra, ca): (usize, usize),
    (rb, cb): (usize, usize),
) -> Result<(usize, usize)> {
    let r = if ra == rb || rb == 1 {
        ra
    } else if ra == 1 {
        rb
    } else {
        return Err(Error::ShapeMismatch {
            op,
            details: format!("[{ra},{ca}] vs [{rb},{cb}]"),
        });
    };
    let c = if ca == cb || cb == 1 {
        ca
    } else if ca == 1 {
        cb
    } else {
        return Err(Error::ShapeMismatch {
            op,
            details: format!("[{ra},{ca}] vs [{rb},{cb}]"),
        });
    };
    Ok((r, c))
}

fn eval_broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let (r, c) = broadcast_dims(op, (ra, ca), (rb, cb))?;
    let mut out = vec![0.0f32; r * c];
    let ad = a.data();
    let bd = b.data();
    for i in 0..r {
        for j in 0..c {
            let av = ad[(i % ra) * ca + (j % ca)];
            let bv = bd[(i % rb) * cb + (j % cb)];
            out[i * c + j] = f(av, bv);
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Apply `f(dout, other)` elementwise where `other` broadcasts to dout's shape.
fn broadcast_combine(dout: &Tensor, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let (r, c) = dout.dims2();
    let (ro, co) = other.dims2();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = f(
                dout.data()[i * c + j],
                other.data()[(i % ro) * co + (j % co)],
            );
        }
    }
    Tensor::new(vec![r, c], out).unwrap()
}

/// Sum a full-shape gradient down to a broadcast input's shape.
fn reduce_to_shape(full: &Tensor, shape: &[usize], (r, c): (usize, usize)) -> Tensor {
    let (fr, fc) = full.dims2();
    if (fr, fc) == (r, c) {
        return Tensor::new(shape.to_vec(), full.data().to_vec()).unwrap();
    }
    let mut out = vec![0.0f32; r * c];
    for i in 0..fr {
        for j in 0..fc {
            out[(i % r) * c + (j % c)] += full.data()[i * fc + j];
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

fn eval_concat(axis: usize, tensors: &[&Tensor]) -> Result<Tensor> {
    if axis > 1 {
        return Err(Error::ShapeMismatch {
            op: "concat",
            details: format!("axis {axis} not supported"),
        });
    }
    let (r0, c0) = tensors[0].dims2();
    if axis == 0 {
        let mut rows = 0;
        for t in tensors {
            let (r, c) = t.dims2();
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    details: format!("column mismatch {c} vs {c0}"),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for t in tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, c0], data)
    } else {
        let mut cols = 0;
        for t in tensors {
            let (r, c) = t.dims2();
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    details: format!("row mismatch {r} vs {r0}"),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0f32; r0 * cols];
        let mut offset = 0;
        for t in tensors {
            let (_, c) = t.dims2();
            for i in 0..r0 {
                for j in 0..c {
                    data[i * cols + offset + j] = t.data()[i * c + j];
                }
            }
            offset += c;
        }
        Tensor::new(vec![r0, cols], data)
    }
}

fn eval_softmax(axis: usize, x: &Tensor) -> Result<Tensor> {
    if axis > 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            details: format!("axis {axis} not supported"),
        });
    }
    let (r, c) = x.dims2();
    let xd = x.data();
    let mut out = vec![0.0f32; r * c];
    let (slices, len, stride_outer, stride_inner) = if axis == 1 {
        (r, c, c, 1)
    } else {
        (c, r, 1, c)
    };
    for s in 0..slices {
        let mut max = f32::NEG_INFINITY;
        for i in 0..len {
            max = max.max(xd[s * stride_outer + i * stride_inner]);
        }
        let mut sum = 0.0f64;
        for i in 0..len {
            let idx = s * stride_outer + i * stride_inner;
            let e = (xd[idx] - max).exp();
            out[idx] = e;
            sum += e as f64;
        }
        for i in 0..len {
            let idx = s * stride_outer + i * stride_inner;
            out[idx] = (out[idx] as f64 / sum) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn eval_mean(axis: Option<usize>, x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2();
    let xd = x.data();
    match axis {
        None => {
            let sum: f64 = xd.iter().map(|&v| v as f64).sum();
            Ok(Tensor::scalar((sum / (r * c) as f64) as f32))
        }
        Some(0) => {
            let mut out = vec![0.0f32; c];
            for j in 0..c {
                let mut acc = 0.0f64;
                for i in 0..r {
                    acc += xd[i * c + j] as f64;
                }
                out[j] = (acc / r as f64) as f32;
            }
            Tensor::new(vec![1, c], out)
        }
        Some(1) => {
            let mut out = vec![0.0f32; r];
            for i in 0..r {
                let mut acc = 0.0f64;
                for j in 0..c {
                    acc += xd[i * c + j] as f64;
                }
                out[i] = (acc / c as f64) as f32;
            }
            Tensor::new(vec![r, 1], out)
        }
        Some(a) => Err(Error::ShapeMismatch {
            op: "mean",
            details: format!("axis {a} not supported"),
        }),
    }
}

fn eval_embedding(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = table.dims2();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let row = id as usize;
        if row >= v {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: v,
            });
        }
        out.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], out)
}

struct LstmGates {
    i: Vec<f32>,
    f: Vec<f32>,
    g: Vec<f32>,
    o: Vec<f32>,
    c_next: Vec<f32>,
}

fn lstm_forward(
    state: &Tensor,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> Result<(Vec<f32>, LstmGates)> {
    let (srows, h) = state.dims2();
    let (xr, di) = x.dims2();
    let (wxr, wxc) = wx.dims2();
    let (whr, whc) = wh.dims2();
    let (_, bc) = b.dims2();
    if srows != 2 || xr != 1 || wxr != di || wxc != 4 * h || whr != h || whc != 4 * h || bc != 4 * h
    {
        return Err(Error::ShapeMismatch {
            op: "lstm-cell",
            details: format!(
                "state {:?}, x {:?}, wx {:?}, wh {:?}, b {:?}",
                state.shape(),
                x.shape(),
                wx.shape(),
                wh.shape(),
                b.shape()
            ),
        });
    }
    let hv = &state.data()[0..h];
    let cv = &state.data()[h..2 * h];
    let mut pre = b.data().to_vec();
    matmul_nn(x.data(), wx.data(), &mut pre, 1, di, 4 * h);
    matmul_nn(hv, wh.data(), &mut pre, 1, h, 4 * h);
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let mut gates = LstmGates {
        i: vec![0.0; h],
        f: vec![0.0; h],
        g: vec![0.0; h],
        o: vec![0.0; h],
        c_next: vec![0.0; h],
    };
    for j in 0..h {
        gates.i[j] = sig(pre[j]);
        gates.f[j] = sig(pre[h + j]);
        gates.g[j] = pre[2 * h + j].tanh();
        gates.o[j] = sig(pre[3 * h + j]);
        gates.c_next[j] = gates.f[j] * cv[j] + gates.i[j] * gates.g[j];
    }
    let mut out = vec![0.0f32; 2 * h];
    for j in 0..h {
        out[j] = gates.o[j] * gates.c_next[j].tanh();
        out[h + j] = gates.c_next[j];
    }
    Ok((out, gates))
}

fn eval_lstm_cell(
    state: &Tensor,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, LstmGates)> {
    let (_, h) = state.dims2();
    let (out, gates) = lstm_forward(state, x, wx, wh, b)?;
    Ok((Tensor::new(vec![2, h], out)?, gates))
}

fn lstm_cell_vjp(
    state: &Tensor,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    dout: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let (_, h) = state.dims2();
    let (_, di) = x.dims2();
    let (_, gates) = lstm_forward(state, x, wx, wh, b)?;
    let hv = &state.data()[0..h];
    let cv = &state.data()[h..2 * h];
    let dh_next = &dout.data()[0..h];
    let dc_next_in = &dout.data()[h..2 * h];

    let mut dpre = vec![0.0f32; 4 * h];
    let mut dc_prev = vec![0.0f32; h];
    for j in 0..h {
        let tc = gates.c_next[j].tanh();
        let do_ = dh_next[j] * tc;
        let dc_tot = dc_next_in[j] + dh_next[j] * gates.o[j] * (1.0 - tc * tc);
        let di_ = dc_tot * gates.g[j];
        let df = dc_tot * cv[j];
        let dg = dc_tot * gates.i[j];
        dc_prev[j] = dc_tot * gates.f[j];
        dpre[j] = di_ * gates.i[j] * (1.0 - gates.i[j]);
        dpre[h + j] = df * gates.f[j] * (1.0 - gates.f[j]);
        dpre[2 * h + j] = dg * (1.0 - gates.g[j] * gates.g[j]);
        dpre[3 * h + j] = do_ * gates.o[j] * (1.0 - gates.o[j]);
    }

    let mut dx = vec![0.0f32; di];
    matmul_nt(&dpre, wx.data(), &mut dx, 1, 4 * h, di);
    let mut dh_prev = vec![0.0f32; h];
    matmul_nt(&dpre, wh.data(), &mut dh_prev, 1, 4 * h, h);
    let mut dwx = vec![0.0f32; di * 4 * h];
    matmul_tn(x.data(), &dpre, &mut dwx, di, 1, 4 * h);
    let mut dwh = vec![0.0f32; h * 4 * h];
    matmul_tn(hv, &dpre, &mut dwh, h, 1, 4 * h);

    let mut dstate = vec![0.0f32; 2 * h];
    dstate[0..h].copy_from_slice(&dh_prev);
    dstate[h..2 * h].copy_from_slice(&dc_prev);

    Ok(vec![
        Some(Tensor::new(state.shape().to_vec(), dstate)?),
        Some(Tensor::new(x.shape().to_vec(), dx)?),
        Some(Tensor::new(wx.shape().to_vec(), dwx)?),
        Some(Tensor::new(wh.shape().to_vec(), dwh)?),
        Some(Tensor::new(b.shape().to_vec(), dpre)?),
    ])
}

fn eval_masked_fill(x: &Tensor, keep: &Tensor, fill: f32) -> Result<Tensor> {
    eval_broadcast_binary("masked-fill", x, keep, |v, m| if m >= 0.5 { v } else { fill })
}

fn eval_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let (r, d) = x.dims2();
    let (gr, gd) = gain.dims2();
    let (br, bd) = bias.dims2();
    if gr != 1 || br != 1 || gd != d || bd != d {
        return Err(Error::ShapeMismatch {
            op: "layer-norm",
            details: format!(
                "x {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        });
    }
    let mut out = vec![0.0f32; r * d];
    for i in 0..r {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 =
            row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            let xhat = ((row[j] as f64 - mean) * inv) as f32;
            out[i * d + j] = xhat * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layer_norm_vjp(
    x: &Tensor,
    gain: &Tensor,
    dout: &Tensor,
    eps: f32,
) -> Result<Vec<Option<Tensor>>> {
    let (r, d) = x.dims2();
    let mut dx = vec![0.0f32; r * d];
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    for i in 0..r {
        let row = &x.data()[i * d..(i + 1) * d];
        let dy = &dout.data()[i * d..(i + 1) * d];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 =
            row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();

        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        let mut xhat = vec![0.0f64; d];
        let mut dxhat = vec![0.0f64; d];
        for j in 0..d {
            xhat[j] = (row[j] as f64 - mean) * inv;
            dxhat[j] = dy[j] as f64 * gain.data()[j] as f64;
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            dgain[j] += dy[j] * xhat[j] as f32;
            dbias[j] += dy[j];
        }
        for j in 0..d {
            dx[i * d + j] =
                (inv * (dxhat[j] - sum_dxhat / d as f64 - xhat[j] * sum_dxhat_xhat / d as f64))
                    as f32;
        }
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), dx)?),
        Some(Tensor::new(vec![1, d], dgain)?),
        Some(Tensor::new(vec![1, d], dbias)?),
    ])
}
