//! Eager tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns a flat list of nodes. Values are computed at insertion
//! time, so builders can branch on intermediate results (argmax selections,
//! zero-sum fallbacks) while the tape records enough to differentiate.
//! [`Graph::backward`] walks the tape once in reverse and returns adjoints
//! for every node that can influence the loss and descends from a parameter
//! or watched node; everything else is skipped, which is what makes detach
//! and frozen-backbone phases cheap.

pub mod check;
mod conv;


use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use conv::PadMode;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Similarity between a feature-map cell and a prototype vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    /// Cosine similarity; zero-norm vectors score 0.
    Cosine,
    /// ProtoPNet-style log distance `ln((d2 + 1) / (d2 + eps))`.
    LogDistance,
}

pub const LOG_DISTANCE_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detach(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MinConst(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    PickIndex(NodeId, usize),
    LogSumExp(NodeId),
    SoftmaxAll(NodeId),
    DivByScalar { numer: NodeId, denom: NodeId },
    MatVec { matrix: NodeId, vector: NodeId },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    MeanSpatial(NodeId),
    MaxSpatial(NodeId),
    SimilarityMaps {
        features: NodeId,
        prototypes: NodeId,
        kind: SimilarityKind,
    },
    PairwiseCosine(NodeId),
    Gather {
        input: NodeId,
        index: Arc<Vec<usize>>,
    },
    MeanRows {
        input: NodeId,
        rows: Arc<Vec<usize>>,
    },
    BceMean {
        probs: NodeId,
        labels: Arc<Vec<f64>>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id.0).and_then(|t| t.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adj.get_mut(id.0).and_then(|t| t.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn flows(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Insert a constant; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a trainable leaf; adjoints are produced for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Mark an existing node as a gradient target. Must be called before the
    /// node is consumed by later ops, otherwise those ops will not track it.
    pub fn watch(&mut self, id: NodeId) {
        self.nodes[id.0].needs_grad = true;
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.flows(&[a, b]);
        Ok(self.push(value, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.flows(&[a, b]);
        Ok(self.push(value, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.flows(&[a, b]);
        Ok(self.push(value, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::Scale(a, factor))
    }

    /// Elementwise `min(x, c)`.
    pub fn min_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.min(c)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::MinConst(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| sigmoid(*x)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| softplus(*x)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::Tanh(a))
    }

    /// Copy of the value through which no gradient flows.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, false, Op::Detach(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.flows(&[a]);
        self.push(Tensor::scalar(s), ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.flows(&[a]);
        self.push(Tensor::scalar(s / n as f64), ng, Op::Mean(a))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(a).len() {
            return Err(Error::Shape(format!(
                "pick index {index} out of range for {} elements",
                self.value(a).len()
            )));
        }
        let v = self.value(a).data()[index];
        let ng = self.flows(&[a]);
        Ok(self.push(Tensor::scalar(v), ng, Op::PickIndex(a, index)))
    }

    /// Numerically stable `ln(sum(exp(x)))` over all elements.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = logsumexp(self.value(a).data());
        let ng = self.flows(&[a]);
        self.push(Tensor::scalar(v), ng, Op::LogSumExp(a))
    }

    /// Softmax over all elements (shape preserved).
    pub fn softmax_all(&mut self, a: NodeId) -> NodeId {
        let value = softmax_tensor(self.value(a));
        let ng = self.flows(&[a]);
        self.push(value, ng, Op::SoftmaxAll(a))
    }

    /// Elementwise division of `numer` by a scalar node (shape `[1]`).
    pub fn div_by_scalar(&mut self, numer: NodeId, denom: NodeId) -> Result<NodeId> {
        if self.value(denom).len() != 1 {
            return Err(Error::Shape("div_by_scalar denominator must be a scalar".into()));
        }
        let d = self.value(denom).item();
        let data = self.value(numer).data().iter().map(|x| x / d).collect();
        let value = Tensor::from_vec(self.value(numer).shape(), data)?;
        let ng = self.flows(&[numer, denom]);
        Ok(self.push(value, ng, Op::DivByScalar { numer, denom }))
    }

    /// `matrix [m, n] * vector [n] -> [m]`.
    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        let mshape = self.value(matrix).shape().to_vec();
        let vlen = self.value(vector).len();
        if mshape.len() != 2 || mshape[1] != vlen {
            return Err(Error::Shape(format!(
                "matvec: matrix {:?} vs vector [{vlen}]",
                mshape
            )));
        }
        let (m, n) = (mshape[0], mshape[1]);
        let mat = self.value(matrix).data();
        let vec = self.value(vector).data();
        let mut out = vec![0.0; m];
        for (row, o) in out.iter_mut().enumerate() {
            *o = dot(&mat[row * n..(row + 1) * n], vec);
        }
        let value = Tensor::from_vec(&[m], out)?;
        let ng = self.flows(&[matrix, vector]);
        Ok(self.push(value, ng, Op::MatVec { matrix, vector }))
    }

    /// 2-d convolution over `[c_in, h, w]` with square kernel, `same`-style
    /// explicit padding and stride.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
            mode,
        )?;
        let ng = self.flows(&[input, weight, bias]);
        Ok(self.push(
            value,
            ng,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                mode,
            },
        ))
    }

    /// Global average pooling `[d, h, w] -> [d]`.
    pub fn mean_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("mean_spatial expects 3-d, got {shape:?}")));
        }
        let (d, hw) = (shape[0], shape[1] * shape[2]);
        let data = self.value(a).data();
        let out: Vec<f64> = (0..d)
            .map(|c| data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_vec(&[d], out)?;
        let ng = self.flows(&[a]);
        Ok(self.push(value, ng, Op::MeanSpatial(a)))
    }

    /// Per-channel max over spatial cells `[m, h, w] -> [m]`. The backward
    /// pass routes the gradient to the first (row-major) maximal cell.
    pub fn max_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("max_spatial expects 3-d, got {shape:?}")));
        }
        let (m, hw) = (shape[0], shape[1] * shape[2]);
        if hw == 0 {
            return Err(Error::Shape("max_spatial over empty map".into()));
        }
        let data = self.value(a).data();
        let out: Vec<f64> = (0..m)
            .map(|c| {
                data[c * hw..(c + 1) * hw]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let value = Tensor::from_vec(&[m], out)?;
        let ng = self.flows(&[a]);
        Ok(self.push(value, ng, Op::MaxSpatial(a)))
    }

    /// Per-prototype similarity maps: features `[d, h, w]`, prototypes
    /// `[m, d]` -> `[m, h, w]`.
    pub fn similarity_maps(
        &mut self,
        features: NodeId,
        prototypes: NodeId,
        kind: SimilarityKind,
    ) -> Result<NodeId> {
        let fshape = self.value(features).shape().to_vec();
        let pshape = self.value(prototypes).shape().to_vec();
        if fshape.len() != 3 || pshape.len() != 2 || fshape[0] != pshape[1] {
            return Err(Error::Shape(format!(
                "similarity_maps: features {fshape:?} vs prototypes {pshape:?}"
            )));
        }
        let value = similarity_forward(self.value(features), self.value(prototypes), kind)?;
        let ng = self.flows(&[features, prototypes]);
        Ok(self.push(
            value,
            ng,
            Op::SimilarityMaps {
                features,
                prototypes,
                kind,
            },
        ))
    }

    /// Pairwise cosine similarity over row vectors: `[n, d] -> [n, n]`.
    /// Entries involving a zero row are 0 (including that row's diagonal).
    pub fn pairwise_cosine(&mut self, rows: NodeId) -> Result<NodeId> {
        let shape = self.value(rows).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("pairwise_cosine expects 2-d, got {shape:?}")));
        }
        let value = pairwise_cosine_forward(self.value(rows));
        let ng = self.flows(&[rows]);
        Ok(self.push(value, ng, Op::PairwiseCosine(rows)))
    }

    /// `out[i] = in[index[i]]`; covers permutations, space-to-depth, window
    /// enrichment and cell transposes.
    pub fn gather(
        &mut self,
        input: NodeId,
        index: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<NodeId> {
        let expected: usize = out_shape.iter().product();
        if index.len() != expected {
            return Err(Error::Shape(format!(
                "gather: index length {} vs out shape {:?}",
                index.len(),
                out_shape
            )));
        }
        let data = self.value(input).data();
        let n = data.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of range for {n} elements"
            )));
        }
        let out: Vec<f64> = index.iter().map(|&i| data[i]).collect();
        let value = Tensor::from_vec(out_shape, out)?;
        let ng = self.flows(&[input]);
        Ok(self.push(value, ng, Op::Gather { input, index }))
    }

    /// Elementwise mean of selected maps: `[m, h, w]` + row indices -> `[h, w]`.
    pub fn mean_rows(&mut self, input: NodeId, rows: Arc<Vec<usize>>) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("mean_rows expects 3-d, got {shape:?}")));
        }
        if rows.is_empty() {
            return Err(Error::Shape("mean_rows with empty selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::Shape(format!(
                "mean_rows: row {bad} out of range for {} maps",
                shape[0]
            )));
        }
        let hw = shape[1] * shape[2];
        let data = self.value(input).data();
        let mut out = vec![0.0; hw];
        for &r in rows.iter() {
            for (o, v) in out.iter_mut().zip(&data[r * hw..(r + 1) * hw]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        let value = Tensor::from_vec(&[shape[1], shape[2]], out)?;
        let ng = self.flows(&[input]);
        Ok(self.push(value, ng, Op::MeanRows { input, rows }))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clipped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, probs: NodeId, labels: Arc<Vec<f64>>, eps: f64) -> Result<NodeId> {
        let p = self.value(probs).data();
        if p.len() != labels.len() {
            return Err(Error::Shape(format!(
                "bce_mean: {} probs vs {} labels",
                p.len(),
                labels.len()
            )));
        }
        let n = p.len().max(1) as f64;
        let mut loss = 0.0;
        for (&pi, &yi) in p.iter().zip(labels.iter()) {
            let pc = pi.clamp(eps, 1.0 - eps);
            loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let ng = self.flows(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss / n),
            ng,
            Op::BceMean { probs, labels, eps },
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns adjoints for every
    /// node flagged as needing gradient that influences the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward expects a scalar loss".into()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dout) = adj[i].take() else { continue };
            self.propagate(i, &dout, &mut adj)?;
            adj[i] = Some(dout);
        }
        Ok(Gradients { adj })
    }

    fn accum(&self, adj: &mut [Option<Tensor>], id: NodeId, contrib: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut adj[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        contrib(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, node: usize, dout: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[node].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, |g| axpy(g.data_mut(), 1.0, dout.data()));
                self.accum(adj, *b, |g| axpy(g.data_mut(), 1.0, dout.data()));
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, |g| axpy(g.data_mut(), 1.0, dout.data()));
                self.accum(adj, *b, |g| axpy(g.data_mut(), -1.0, dout.data()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), b) in g.data_mut().iter_mut().zip(dout.data()).zip(bv) {
                        *g += d * b;
                    }
                });
                self.accum(adj, *b, |g| {
                    for ((g, d), a) in g.data_mut().iter_mut().zip(dout.data()).zip(av) {
                        *g += d * a;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accum(adj, *a, |g| axpy(g.data_mut(), *f, dout.data()));
            }
            Op::MinConst(a, c) => {
                let av = self.value(*a).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), x) in g.data_mut().iter_mut().zip(dout.data()).zip(av) {
                        if *x <= *c {
                            *g += d;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), x) in g.data_mut().iter_mut().zip(dout.data()).zip(av) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.value(NodeId(node)).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), y) in g.data_mut().iter_mut().zip(dout.data()).zip(out) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), x) in g.data_mut().iter_mut().zip(dout.data()).zip(av) {
                        *g += d * sigmoid(*x);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.value(NodeId(node)).data();
                self.accum(adj, *a, |g| {
                    for ((g, d), y) in g.data_mut().iter_mut().zip(dout.data()).zip(out) {
                        *g += d * (1.0 - y * y);
                    }
                });
            }
            Op::Sum(a) => {
                let d = dout.item();
                self.accum(adj, *a, |g| {
                    for g in g.data_mut() {
                        *g += d;
                    }
                });
            }
            Op::Mean(a) => {
                let d = dout.item() / self.value(*a).len().max(1) as f64;
                self.accum(adj, *a, |g| {
                    for g in g.data_mut() {
                        *g += d;
                    }
                });
            }
            Op::PickIndex(a, idx) => {
                let d = dout.item();
                let idx = *idx;
                self.accum(adj, *a, |g| g.data_mut()[idx] += d);
            }
            Op::LogSumExp(a) => {
                let soft = softmax_tensor(self.value(*a));
                let d = dout.item();
                self.accum(adj, *a, |g| {
                    for (g, s) in g.data_mut().iter_mut().zip(soft.data()) {
                        *g += d * s;
                    }
                });
            }
            Op::SoftmaxAll(a) => {
                let s = self.value(NodeId(node)).data();
                let inner: f64 = s.iter().zip(dout.data()).map(|(s, d)| s * d).sum();
                self.accum(adj, *a, |g| {
                    for ((g, s), d) in g.data_mut().iter_mut().zip(s).zip(dout.data()) {
                        *g += s * (d - inner);
                    }
                });
            }
            Op::DivByScalar { numer, denom } => {
                let d = self.value(*denom).item();
                let nv = self.value(*numer).data();
                self.accum(adj, *numer, |g| axpy(g.data_mut(), 1.0 / d, dout.data()));
                let dd: f64 = dout
                    .data()
                    .iter()
                    .zip(nv)
                    .map(|(dy, n)| -dy * n / (d * d))
                    .sum();
                self.accum(adj, *denom, |g| g.data_mut()[0] += dd);
            }
            Op::MatVec { matrix, vector } => {
                let mshape = self.value(*matrix).shape();
                let (m, n) = (mshape[0], mshape[1]);
                let mat = self.value(*matrix).data();
                let vec = self.value(*vector).data();
                self.accum(adj, *matrix, |g| {
                    let gd = g.data_mut();
                    for (row, d) in dout.data().iter().enumerate() {
                        axpy(&mut gd[row * n..(row + 1) * n], *d, vec);
                    }
                });
                self.accum(adj, *vector, |g| {
                    let gd = g.data_mut();
                    for (row, d) in dout.data().iter().enumerate() {
                        axpy(gd, *d, &mat[row * n..(row + 1) * n]);
                    }
                });
                let _ = m;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                mode,
            } => {
                let need_din = self.nodes[input.0].needs_grad;
                let need_dw = self.nodes[weight.0].needs_grad;
                let need_db = self.nodes[bias.0].needs_grad;
                let (din, dw, db) = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    dout,
                    *stride,
                    *pad,
                    *mode,
                    need_din,
                    need_dw,
                    need_db,
                )?;
                if let Some(din) = din {
                    self.accum(adj, *input, |g| axpy(g.data_mut(), 1.0, din.data()));
                }
                if let Some(dw) = dw {
                    self.accum(adj, *weight, |g| axpy(g.data_mut(), 1.0, dw.data()));
                }
                if let Some(db) = db {
                    self.accum(adj, *bias, |g| axpy(g.data_mut(), 1.0, db.data()));
                }
            }
            Op::MeanSpatial(a) => {
                let shape = self.value(*a).shape();
                let hw = shape[1] * shape[2];
                let inv = 1.0 / hw as f64;
                self.accum(adj, *a, |g| {
                    let gd = g.data_mut();
                    for (c, d) in dout.data().iter().enumerate() {
                        for g in &mut gd[c * hw..(c + 1) * hw] {
                            *g += d * inv;
                        }
                    }
                });
            }
            Op::MaxSpatial(a) => {
                let value = self.value(*a);
                let shape = value.shape();
                let hw = shape[1] * shape[2];
                let data = value.data();
                self.accum(adj, *a, |g| {
                    let gd = g.data_mut();
                    for (c, d) in dout.data().iter().enumerate() {
                        let row = &data[c * hw..(c + 1) * hw];
                        let argmax = row
                            .iter()
                            .enumerate()
                            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                                if v > acc.1 {
                                    (i, v)
                                } else {
                                    acc
                                }
                            })
                            .0;
                        gd[c * hw + argmax] += d;
                    }
                });
            }
            Op::SimilarityMaps {
                features,
                prototypes,
                kind,
            } => {
                let (df, dp) = similarity_backward(
                    self.value(*features),
                    self.value(*prototypes),
                    dout,
                    *kind,
                    self.nodes[features.0].needs_grad,
                    self.nodes[prototypes.0].needs_grad,
                );
                if let Some(df) = df {
                    self.accum(adj, *features, |g| axpy(g.data_mut(), 1.0, df.data()));
                }
                if let Some(dp) = dp {
                    self.accum(adj, *prototypes, |g| axpy(g.data_mut(), 1.0, dp.data()));
                }
            }
            Op::PairwiseCosine(rows) => {
                let drows = pairwise_cosine_backward(self.value(*rows), dout);
                self.accum(adj, *rows, |g| axpy(g.data_mut(), 1.0, drows.data()));
            }
            Op::Gather { input, index } => {
                self.accum(adj, *input, |g| {
                    let gd = g.data_mut();
                    for (o, &src) in index.iter().enumerate() {
                        gd[src] += dout.data()[o];
                    }
                });
            }
            Op::MeanRows { input, rows } => {
                let shape = self.value(*input).shape();
                let hw = shape[1] * shape[2];
                let inv = 1.0 / rows.len() as f64;
                self.accum(adj, *input, |g| {
                    let gd = g.data_mut();
                    for &r in rows.iter() {
                        axpy(&mut gd[r * hw..(r + 1) * hw], inv, dout.data());
                    }
                });
            }
            Op::BceMean { probs, labels, eps } => {
                let p = self.value(*probs).data();
                let n = p.len().max(1) as f64;
                let d = dout.item();
                let eps = *eps;
                self.accum(adj, *probs, |g| {
                    for ((g, &pi), &yi) in g.data_mut().iter_mut().zip(p).zip(labels.iter()) {
                        if pi > eps && pi < 1.0 - eps {
                            *g += d * (pi - yi) / (pi * (1.0 - pi)) / n;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_tensor(t: &Tensor) -> Tensor {
    let m = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.data().iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_vec(t.shape(), exps.into_iter().map(|e| e / total).collect()).unwrap()
}

/// Transpose `[d, h, w]` cells into contiguous `[h*w, d]` rows.
fn cells_matrix(features: &Tensor) -> (Vec<f64>, usize, usize) {
    let shape = features.shape();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let data = features.data();
    let mut cells = vec![0.0; hw * d];
    for c in 0..d {
        for cell in 0..hw {
            cells[cell * d + c] = data[c * hw + cell];
        }
    }
    (cells, hw, d)
}

fn similarity_forward(features: &Tensor, prototypes: &Tensor, kind: SimilarityKind) -> Result<Tensor> {
    let (cells, hw, d) = cells_matrix(features);
    let m = prototypes.shape()[0];
    let p = prototypes.data();
    let mut out = vec![0.0; m * hw];
    match kind {
        SimilarityKind::Cosine => {
            let cell_norms: Vec<f64> = (0..hw)
                .map(|i| dot(&cells[i * d..(i + 1) * d], &cells[i * d..(i + 1) * d]).sqrt())
                .collect();
            let proto_norms: Vec<f64> = (0..m)
                .map(|j| dot(&p[j * d..(j + 1) * d], &p[j * d..(j + 1) * d]).sqrt())
                .collect();
            for j in 0..m {
                let pj = &p[j * d..(j + 1) * d];
                for i in 0..hw {
                    let denom = cell_norms[i] * proto_norms[j];
                    out[j * hw + i] = if denom == 0.0 {
                        0.0
                    } else {
                        dot(&cells[i * d..(i + 1) * d], pj) / denom
                    };
                }
            }
        }
        SimilarityKind::LogDistance => {
            for j in 0..m {
                let pj = &p[j * d..(j + 1) * d];
                for i in 0..hw {
                    let ci = &cells[i * d..(i + 1) * d];
                    let d2: f64 = ci.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                    out[j * hw + i] = ((d2 + 1.0) / (d2 + LOG_DISTANCE_EPS)).ln();
                }
            }
        }
    }
    let fshape = features.shape();
    Tensor::from_vec(&[m, fshape[1], fshape[2]], out)
}

fn similarity_backward(
    features: &Tensor,
    prototypes: &Tensor,
    dout: &Tensor,
    kind: SimilarityKind,
    need_df: bool,
    need_dp: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (cells, hw, d) = cells_matrix(features);
    let m = prototypes.shape()[0];
    let p = prototypes.data();
    let g = dout.data();
    let mut dcells = if need_df { vec![0.0; hw * d] } else { Vec::new() };
    let mut dp = if need_dp { vec![0.0; m * d] } else { Vec::new() };
    match kind {
        SimilarityKind::Cosine => {
            let cell_norms: Vec<f64> = (0..hw)
                .map(|i| dot(&cells[i * d..(i + 1) * d], &cells[i * d..(i + 1) * d]).sqrt())
                .collect();
            let proto_norms: Vec<f64> = (0..m)
                .map(|j| dot(&p[j * d..(j + 1) * d], &p[j * d..(j + 1) * d]).sqrt())
                .collect();
            for j in 0..m {
                let pj = &p[j * d..(j + 1) * d];
                for i in 0..hw {
                    let gij = g[j * hw + i];
                    if gij == 0.0 {
                        continue;
                    }
                    let (ni, nj) = (cell_norms[i], proto_norms[j]);
                    if ni == 0.0 || nj == 0.0 {
                        continue;
                    }
                    let ci = &cells[i * d..(i + 1) * d];
                    let cos = dot(ci, pj) / (ni * nj);
                    if need_df {
                        let dst = &mut dcells[i * d..(i + 1) * d];
                        for k in 0..d {
                            dst[k] += gij * (pj[k] / (ni * nj) - cos * ci[k] / (ni * ni));
                        }
                    }
                    if need_dp {
                        let dst = &mut dp[j * d..(j + 1) * d];
                        for k in 0..d {
                            dst[k] += gij * (ci[k] / (ni * nj) - cos * pj[k] / (nj * nj));
                        }
                    }
                }
            }
        }
        SimilarityKind::LogDistance => {
            for j in 0..m {
                let pj = &p[j * d..(j + 1) * d];
                for i in 0..hw {
                    let gij = g[j * hw + i];
                    if gij == 0.0 {
                        continue;
                    }
                    let ci = &cells[i * d..(i + 1) * d];
                    let d2: f64 = ci.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                    let factor = 1.0 / (d2 + 1.0) - 1.0 / (d2 + LOG_DISTANCE_EPS);
                    for k in 0..d {
                        let diff = 2.0 * (ci[k] - pj[k]);
                        if need_df {
                            dcells[i * d + k] += gij * factor * diff;
                        }
                        if need_dp {
                            dp[j * d + k] -= gij * factor * diff;
                        }
                    }
                }
            }
        }
    }
    let df = if need_df {
        let fshape = features.shape();
        let mut out = vec![0.0; d * hw];
        for c in 0..d {
            for cell in 0..hw {
                out[c * hw + cell] = dcells[cell * d + c];
            }
        }
        Some(Tensor::from_vec(fshape, out).unwrap())
    } else {
        None
    };
    let dpt = if need_dp {
        Some(Tensor::from_vec(prototypes.shape(), dp).unwrap())
    } else {
        None
    };
    (df, dpt)
}

fn pairwise_cosine_forward(rows: &Tensor) -> Tensor {
    let shape = rows.shape();
    let (n, d) = (shape[0], shape[1]);
    let data = rows.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| dot(&data[i * d..(i + 1) * d], &data[i * d..(i + 1) * d]).sqrt())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        out[i * n + i] = 1.0;
        for j in (i + 1)..n {
            if norms[j] == 0.0 {
                continue;
            }
            let v = dot(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]) / (norms[i] * norms[j]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::from_vec(&[n, n], out).unwrap()
}

fn pairwise_cosine_backward(rows: &Tensor, dout: &Tensor) -> Tensor {
    let shape = rows.shape();
    let (n, d) = (shape[0], shape[1]);
    let data = rows.data();
    let g = dout.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| dot(&data[i * d..(i + 1) * d], &data[i * d..(i + 1) * d]).sqrt())
        .collect();
    let mut drows = vec![0.0; n * d];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..n {
            if norms[j] == 0.0 {
                continue;
            }
            let gij = g[i * n + j] + g[j * n + i];
            if gij == 0.0 {
                continue;
            }
            let ri = &data[i * d..(i + 1) * d];
            let rj = &data[j * d..(j + 1) * d];
            let (ni, nj) = (norms[i], norms[j]);
            let cos = dot(ri, rj) / (ni * nj);
            for k in 0..d {
                drows[i * d + k] += gij * (rj[k] / (ni * nj) - cos * ri[k] / (ni * ni));
                drows[j * d + k] += gij * (ri[k] / (ni * nj) - cos * rj[k] / (nj * nj));
            }
        }
        // diagonal entries are constant (1 or 0): no gradient
    }
    Tensor::from_vec(&[n, d], drows).unwrap()
}
