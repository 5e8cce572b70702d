//! Recorded forward computations with reverse-mode gradient extraction.
//!
//! A [`ComputeGraph`] is an immutable, topologically ordered list of
//! primitive nodes built through [`GraphBuilder`]. Input and parameter
//! leaves are named and bound at evaluation time, so one graph serves many
//! samples and many parameter settings. `forward` and `gradient` are pure:
//! given identical bindings they produce bit-identical results, and a graph
//! may be evaluated concurrently from many threads.
//!
//! Shape rules are enforced when nodes are created; there is no broadcasting
//! except the explicit scalar-times-tensor node. Reductions accumulate in
//! ascending index order so results are reproducible down to the bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant(Tensor),
    Input(String),
    Parameter(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// scalar node times tensor node; the one permitted broadcast.
    ScalarMul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L2Norm(NodeId),
    /// cosine(u, v) for two vectors, or cosine of a vector against each row
    /// of a matrix (the zero-shot logits pattern).
    CosineSim(NodeId, NodeId),
    Mse(NodeId, NodeId),
    /// Softmax cross-entropy. Labels are a distribution over the last axis
    /// (one-hot in practice); 2-D operands are averaged over rows.
    CrossEntropyLogits(NodeId, NodeId),
    Clamp(NodeId, f32, f32),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Named tensors bound to a graph's input/parameter leaves.
pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    output: NodeId,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn check_same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: format!("{what}(node {}, node {})", a.0, b.0),
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn constant_scalar(&mut self, value: f32) -> Result<NodeId> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    /// Named input leaf. Re-declaring the same name returns the existing
    /// node; the shape must agree.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    /// Named parameter leaf; mechanically identical to an input, kept
    /// distinct so model code reads honestly.
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    fn leaf(&mut self, name: &str, shape: &[usize], param: bool) -> Result<NodeId> {
        if let Some(&id) = self.names.get(name) {
            if self.shape(id) != shape {
                return Err(Error::ShapeMismatch {
                    context: format!("leaf '{name}' redeclared"),
                    expected: self.shape(id).to_vec(),
                    actual: shape.to_vec(),
                });
            }
            return Ok(id);
        }
        let op = if param {
            Op::Parameter(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, shape.to_vec());
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scalar_mul(&mut self, scalar: NodeId, tensor: NodeId) -> Result<NodeId> {
        if self.shape(scalar).iter().product::<usize>() != 1 {
            return Err(Error::ShapeMismatch {
                context: format!("scalar_mul first operand (node {})", scalar.0),
                expected: vec![1],
                actual: self.shape(scalar).to_vec(),
            });
        }
        let shape = self.shape(tensor).to_vec();
        Ok(self.push(Op::ScalarMul(scalar, tensor), shape))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, c: f32, tensor: NodeId) -> Result<NodeId> {
        let s = self.constant_scalar(c)?;
        self.scalar_mul(s, tensor)
    }

    /// `[m,k]x[k,n] -> [m,n]`; a 1-D left operand is treated as `[1,k]` and
    /// a 1-D right operand as `[k,1]`, with the unit axis dropped.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            context: format!("matmul(node {}, node {})", a.0, b.0),
            expected: sa.clone(),
            actual: sb.clone(),
        })?;
        Ok(self.push(Op::MatMul(a, b), dims.out_shape))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm(a), vec![1])
    }

    /// `([d],[d]) -> [1]` or `([d],[K,d]) -> [K]` (vector against rows).
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([d1], [d2]) if d1 == d2 => vec![1],
            ([d1], [k, d2]) if d1 == d2 => vec![*k],
            _ => {
                return Err(Error::ShapeMismatch {
                    context: format!("cosine_sim(node {}, node {})", a.0, b.0),
                    expected: sa,
                    actual: sb,
                })
            }
        };
        Ok(self.push(Op::CosineSim(a, b), out))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mse", a, b)?;
        Ok(self.push(Op::Mse(a, b), vec![1]))
    }

    /// `logits` and `labels` must share shape `[k]` or `[b,k]`; the result is
    /// the mean cross-entropy over rows.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.check_same_shape("cross_entropy_logits", logits, labels)?;
        let nd = self.shape(logits).len();
        if nd == 0 || nd > 2 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy_logits wants 1-D or 2-D operands, got {:?}",
                self.shape(logits)
            )));
        }
        Ok(self.push(Op::CrossEntropyLogits(logits, labels), vec![1]))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds out of order: [{lo}, {hi}]"
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Clamp(a, lo, hi), shape))
    }

    pub fn build(self, output: NodeId) -> ComputeGraph {
        ComputeGraph {
            nodes: self.nodes,
            output,
        }
    }
}

struct MatMulDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<MatMulDims> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Some(MatMulDims {
            m: *m,
            k: *k,
            n: *n,
            out_shape: vec![*m, *n],
        }),
        ([k], [k2, n]) if k == k2 => Some(MatMulDims {
            m: 1,
            k: *k,
            n: *n,
            out_shape: vec![*n],
        }),
        ([m, k], [k2]) if k == k2 => Some(MatMulDims {
            m: *m,
            k: *k,
            n: 1,
            out_shape: vec![*m],
        }),
        _ => None,
    }
}

impl ComputeGraph {
    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    /// Evaluate the designated output node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Tensor> {
        let values = self.eval_all(bindings)?;
        Ok(values[self.output.0].clone())
    }

    /// d(output)/d(name) for each requested leaf name. The output node must
    /// be scalar. Adjoints accumulate across fan-out; leaves that the output
    /// does not depend on get zero gradients.
    pub fn gradient(&self, bindings: &Bindings, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.evaluate(bindings, wrt)?.1)
    }

    /// Forward value and gradients in one pass over the graph.
    pub fn evaluate(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<(f32, BTreeMap<String, Tensor>)> {
        if self.output_shape().iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(self.output_shape().to_vec()));
        }
        for name in wrt {
            if !bindings.contains_key(*name) {
                return Err(Error::UnboundName((*name).to_string()));
            }
        }
        let values = self.eval_all(bindings)?;
        let loss = values[self.output.0].data()[0];

        let mut adjoints: Vec<Vec<f32>> =
            self.nodes.iter().map(|n| vec![0.0; numel(&n.shape)]).collect();
        adjoints[self.output.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if adjoints[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut adjoints[idx]);
            self.backprop_node(idx, &grad, &values, &mut adjoints)?;
            adjoints[idx] = grad;
        }

        let mut out = BTreeMap::new();
        for name in wrt {
            let id = self
                .find_leaf(name)
                .ok_or_else(|| Error::UnboundName((*name).to_string()))?;
            let shape = self.nodes[id.0].shape.clone();
            let grad = adjoints[id.0].clone();
            out.insert((*name).to_string(), Tensor::new(shape, grad)?);
        }
        Ok((loss, out))
    }

    fn find_leaf(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| match &n.op {
            Op::Input(n2) | Op::Parameter(n2) => n2 == name,
            _ => false,
        })
        .map(NodeId)
    }

    fn eval_all(&self, bindings: &Bindings) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = self.eval_node(idx, node, bindings, &values)?;
            if value.shape() != node.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("node {idx} evaluation"),
                    expected: node.shape.clone(),
                    actual: value.shape().to_vec(),
                });
            }
            values.push(value);
        }
        Ok(values)
    }

    fn eval_node(
        &self,
        idx: usize,
        node: &Node,
        bindings: &Bindings,
        values: &[Tensor],
    ) -> Result<Tensor> {
        let v = |id: NodeId| &values[id.0];
        let finite = |data: Vec<f32>, shape: &[usize]| -> Result<Tensor> {
            Tensor::new(shape.to_vec(), data)
                .map_err(|e| Error::NonFinite(format!("node {idx}: {e}")))
        };
        match &node.op {
            Op::Constant(t) => Ok(t.clone()),
            Op::Input(name) | Op::Parameter(name) => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundName(name.clone()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("binding '{name}' (node {idx})"),
                        expected: node.shape.clone(),
                        actual: bound.shape().to_vec(),
                    });
                }
                Ok(bound.clone())
            }
            Op::Add(a, b) => finite(zip(v(*a), v(*b), |x, y| x + y), &node.shape),
            Op::Sub(a, b) => finite(zip(v(*a), v(*b), |x, y| x - y), &node.shape),
            Op::Mul(a, b) => finite(zip(v(*a), v(*b), |x, y| x * y), &node.shape),
            Op::ScalarMul(s, t) => {
                let c = v(*s).data()[0];
                finite(v(*t).data().iter().map(|x| c * x).collect(), &node.shape)
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(v(*a).shape(), v(*b).shape()).expect("checked at build");
                let out = matmul_raw(v(*a).data(), v(*b).data(), dims.m, dims.k, dims.n);
                finite(out, &node.shape)
            }
            Op::Relu(a) => finite(v(*a).data().iter().map(|x| x.max(0.0)).collect(), &node.shape),
            Op::Tanh(a) => finite(v(*a).data().iter().map(|x| x.tanh()).collect(), &node.shape),
            Op::Softmax(a) => {
                let input = v(*a);
                let width = *input.shape().last().expect("softmax operand has an axis");
                let mut out = input.data().to_vec();
                for row in out.chunks_mut(width) {
                    softmax_row(row);
                }
                finite(out, &node.shape)
            }
            Op::Sum(a) => finite(vec![v(*a).data().iter().sum()], &node.shape),
            Op::Mean(a) => {
                let d = v(*a).data();
                finite(vec![d.iter().sum::<f32>() / d.len() as f32], &node.shape)
            }
            Op::L2Norm(a) => finite(vec![v(*a).l2_norm()], &node.shape),
            Op::CosineSim(a, b) => {
                let u = v(*a);
                let rows = v(*b);
                let d = u.numel();
                let nu = u.l2_norm();
                let mut out = Vec::with_capacity(node.shape.iter().product());
                for row in rows.data().chunks(d) {
                    let nr = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                    if nu == 0.0 || nr == 0.0 {
                        return Err(Error::Invariant(format!(
                            "cosine similarity of zero-norm vector at node {idx}"
                        )));
                    }
                    let dot: f32 = u.data().iter().zip(row).map(|(x, y)| x * y).sum();
                    out.push(dot / (nu * nr));
                }
                finite(out, &node.shape)
            }
            Op::Mse(a, b) => {
                let n = v(*a).numel() as f32;
                let s: f32 = v(*a)
                    .data()
                    .iter()
                    .zip(v(*b).data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                finite(vec![s / n], &node.shape)
            }
            Op::CrossEntropyLogits(zid, yid) => {
                let z = v(*zid);
                let y = v(*yid);
                let width = *z.shape().last().expect("ce operand has an axis");
                let rows = z.numel() / width;
                let mut total = 0.0f32;
                for r in 0..rows {
                    let zr = &z.data()[r * width..(r + 1) * width];
                    let yr = &y.data()[r * width..(r + 1) * width];
                    let lse = log_sum_exp(zr);
                    let mass: f32 = yr.iter().sum();
                    let dot: f32 = zr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    total += lse * mass - dot;
                }
                finite(vec![total / rows as f32], &node.shape)
            }
            Op::Clamp(a, lo, hi) => finite(
                v(*a).data().iter().map(|x| x.clamp(*lo, *hi)).collect(),
                &node.shape,
            ),
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        grad: &[f32],
        values: &[Tensor],
        adjoints: &mut [Vec<f32>],
    ) -> Result<()> {
        let v = |id: NodeId| &values[id.0];
        match &self.nodes[idx].op {
            Op::Constant(_) | Op::Input(_) | Op::Parameter(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut adjoints[a.0], grad.iter().copied());
                accumulate(&mut adjoints[b.0], grad.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(&mut adjoints[a.0], grad.iter().copied());
                accumulate(&mut adjoints[b.0], grad.iter().map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (da, db): (Vec<f32>, Vec<f32>) = {
                    let (va, vb) = (v(*a).data(), v(*b).data());
                    (
                        grad.iter().zip(vb).map(|(g, y)| g * y).collect(),
                        grad.iter().zip(va).map(|(g, x)| g * x).collect(),
                    )
                };
                accumulate(&mut adjoints[a.0], da.into_iter());
                accumulate(&mut adjoints[b.0], db.into_iter());
            }
            Op::ScalarMul(s, t) => {
                let c = v(*s).data()[0];
                let gs: f32 = grad.iter().zip(v(*t).data()).map(|(g, x)| g * x).sum();
                adjoints[s.0][0] += gs;
                accumulate(&mut adjoints[t.0], grad.iter().map(|g| c * g));
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(v(*a).shape(), v(*b).shape()).expect("checked at build");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let (va, vb) = (v(*a).data(), v(*b).data());
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grad[i * n + j] * vb[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                let mut db = vec![0.0f32; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += va[i * k + p] * grad[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                accumulate(&mut adjoints[a.0], da.into_iter());
                accumulate(&mut adjoints[b.0], db.into_iter());
            }
            Op::Relu(a) => {
                // Gradient at exactly 0 is 0 by convention.
                let dg: Vec<f32> = grad
                    .iter()
                    .zip(v(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut adjoints[a.0], dg.into_iter());
            }
            Op::Tanh(a) => {
                let out = values[idx].data();
                let dg: Vec<f32> = grad
                    .iter()
                    .zip(out)
                    .map(|(g, &t)| g * (1.0 - t * t))
                    .collect();
                accumulate(&mut adjoints[a.0], dg.into_iter());
            }
            Op::Softmax(a) => {
                let out = values[idx].data();
                let width = *self.nodes[idx].shape.last().expect("softmax shape");
                let mut dg = vec![0.0f32; out.len()];
                for (row, (o, g)) in out.chunks(width).zip(grad.chunks(width)).enumerate() {
                    let dot: f32 = o.iter().zip(g).map(|(s, gg)| s * gg).sum();
                    for c in 0..width {
                        dg[row * width + c] = o[c] * (g[c] - dot);
                    }
                }
                accumulate(&mut adjoints[a.0], dg.into_iter());
            }
            Op::Sum(a) => {
                let g = grad[0];
                let n = adjoints[a.0].len();
                accumulate(&mut adjoints[a.0], std::iter::repeat(g).take(n));
            }
            Op::Mean(a) => {
                let n = adjoints[a.0].len();
                let g = grad[0] / n as f32;
                accumulate(&mut adjoints[a.0], std::iter::repeat(g).take(n));
            }
            Op::L2Norm(a) => {
                // Subgradient 0 at the zero vector.
                let norm = values[idx].data()[0];
                if norm > 0.0 {
                    let g = grad[0] / norm;
                    let dg: Vec<f32> = v(*a).data().iter().map(|&x| g * x).collect();
                    accumulate(&mut adjoints[a.0], dg.into_iter());
                }
            }
            Op::CosineSim(a, b) => {
                let u = v(*a).data();
                let rows = v(*b).data();
                let d = u.len();
                let cos = values[idx].data();
                let nu = v(*a).l2_norm();
                let mut du = vec![0.0f32; d];
                let mut dv = vec![0.0f32; rows.len()];
                for (r, row) in rows.chunks(d).enumerate() {
                    let g = grad[r];
                    if g == 0.0 {
                        continue;
                    }
                    let nr = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                    let c = cos[r];
                    for i in 0..d {
                        du[i] += g * (row[i] / (nu * nr) - c * u[i] / (nu * nu));
                        dv[r * d + i] = g * (u[i] / (nu * nr) - c * row[i] / (nr * nr));
                    }
                }
                accumulate(&mut adjoints[a.0], du.into_iter());
                accumulate(&mut adjoints[b.0], dv.into_iter());
            }
            Op::Mse(a, b) => {
                let n = v(*a).numel() as f32;
                let g = grad[0] * 2.0 / n;
                let (da, db): (Vec<f32>, Vec<f32>) = {
                    let (va, vb) = (v(*a).data(), v(*b).data());
                    (
                        va.iter().zip(vb).map(|(x, y)| g * (x - y)).collect(),
                        va.iter().zip(vb).map(|(x, y)| -g * (x - y)).collect(),
                    )
                };
                accumulate(&mut adjoints[a.0], da.into_iter());
                accumulate(&mut adjoints[b.0], db.into_iter());
            }
            Op::CrossEntropyLogits(zid, yid) => {
                let z = v(*zid);
                let y = v(*yid);
                let width = *z.shape().last().expect("ce shape");
                let rows = z.numel() / width;
                let g = grad[0] / rows as f32;
                let mut dz = vec![0.0f32; z.numel()];
                let mut dy = vec![0.0f32; y.numel()];
                for r in 0..rows {
                    let zr = &z.data()[r * width..(r + 1) * width];
                    let yr = &y.data()[r * width..(r + 1) * width];
                    let lse = log_sum_exp(zr);
                    let mass: f32 = yr.iter().sum();
                    for c in 0..width {
                        let p = (zr[c] - lse).exp();
                        dz[r * width + c] = g * (mass * p - yr[c]);
                        dy[r * width + c] = g * (lse - zr[c]);
                    }
                }
                accumulate(&mut adjoints[zid.0], dz.into_iter());
                accumulate(&mut adjoints[yid.0], dy.into_iter());
            }
            Op::Clamp(a, lo, hi) => {
                // Gradient 1 on [lo, hi] inclusive, 0 outside.
                let dg: Vec<f32> = grad
                    .iter()
                    .zip(v(*a).data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(&mut adjoints[a.0], dg.into_iter());
            }
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(target: &mut [f32], source: impl Iterator<Item = f32>) {
    for (t, s) in target.iter_mut().zip(source) {
        *t += s;
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f32>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn square_forward_and_gradient() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let graph = g.build(y);

        let b = bind(&[("x", Tensor::vector(&[3.0]).unwrap())]);
        assert_eq!(graph.forward(&b).unwrap().data(), &[9.0]);
        let grads = graph.gradient(&b, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = GraphBuilder::new();
        let eye = g
            .constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = g.input("v", &[3]).unwrap();
        let out = g.matmul(eye, v).unwrap();
        let graph = g.build(out);
        let b = bind(&[("v", Tensor::vector(&[1.0, 2.0, 3.0]).unwrap())]);
        assert_eq!(graph.forward(&b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let mut g = GraphBuilder::new();
        let u = g.input("u", &[4]).unwrap();
        let c = g.cosine_sim(u, u).unwrap();
        let graph = g.build(c);
        let b = bind(&[("u", Tensor::vector(&[0.3, -1.2, 2.0, 0.5]).unwrap())]);
        let got = graph.forward(&b).unwrap().item().unwrap();
        assert!((got - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_gradient() {
        let k = 5;
        let mut g = GraphBuilder::new();
        let z = g.input("z", &[k]).unwrap();
        let y = g.input("y", &[k]).unwrap();
        let loss = g.cross_entropy_logits(z, y).unwrap();
        let graph = g.build(loss);

        let mut onehot = vec![0.0f32; k];
        onehot[2] = 1.0;
        let b = bind(&[
            ("z", Tensor::vector(&vec![0.7; k]).unwrap()),
            ("y", Tensor::vector(&onehot).unwrap()),
        ]);
        let grads = graph.gradient(&b, &["z"]).unwrap();
        // softmax(uniform) - onehot = 1/k - e_j
        for (i, &gv) in grads["z"].data().iter().enumerate() {
            let expected = 1.0 / k as f32 - if i == 2 { 1.0 } else { 0.0 };
            assert!((gv - expected).abs() < 1e-6, "component {i}: {gv}");
        }
    }

    #[test]
    fn unbound_name_is_reported() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[2]).unwrap();
        let s = g.sum(x);
        let graph = g.build(s);
        let err = graph.forward(&Bindings::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundName(n) if n == "x"));
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let mut g = GraphBuilder::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[3]).unwrap();
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn binding_shape_is_checked() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[2]).unwrap();
        let s = g.sum(x);
        let graph = g.build(s);
        let b = bind(&[("x", Tensor::vector(&[1.0, 2.0, 3.0]).unwrap())]);
        assert!(matches!(
            graph.forward(&b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradient_requires_scalar_output() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.relu(x);
        let graph = g.build(y);
        let b = bind(&[("x", Tensor::vector(&[1.0, -1.0]).unwrap())]);
        assert!(matches!(
            graph.gradient(&b, &["x"]),
            Err(Error::NonScalarOutput(_))
        ));
    }

    #[test]
    fn clamp_boundary_gradient_is_one() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[3]).unwrap();
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let s = g.sum(c);
        let graph = g.build(s);
        let b = bind(&[("x", Tensor::vector(&[0.0, 1.0, 1.5]).unwrap())]);
        let out = graph.forward(&b).unwrap();
        assert!(out.data()[0] <= 3.0);
        let grads = graph.gradient(&b, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_gradient_zero_at_zero() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[3]).unwrap();
        let r = g.relu(x);
        let s = g.sum(r);
        let graph = g.build(s);
        let b = bind(&[("x", Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap())]);
        let grads = graph.gradient(&b, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[8]).unwrap();
        let w = g.parameter("w", &[8]).unwrap();
        let m = g.mul(x, w).unwrap();
        let t = g.tanh(m);
        let s = g.sum(t);
        let graph = g.build(s);
        let b = bind(&[
            ("x", Tensor::vector(&[0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]).unwrap()),
            ("w", Tensor::vector(&[1.0, -2.0, 0.5, 0.25, 3.0, -0.75, 1.5, 2.0]).unwrap()),
        ]);
        let v1 = graph.forward(&b).unwrap();
        let v2 = graph.forward(&b).unwrap();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        let g1 = graph.gradient(&b, &["x", "w"]).unwrap();
        let g2 = graph.gradient(&b, &["x", "w"]).unwrap();
        for k in ["x", "w"] {
            let a: Vec<u32> = g1[k].data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = g2[k].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, bb);
        }
    }
}
