//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! A [`Tape`] records every primitive application in topological order at
//! forward time; [`Tape::backward`] replays it in reverse, accumulating
//! gradients additively across fan-out. The primitive set is just large
//! enough to express the grounder and the four attack objectives.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("gather_rows: index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("log_softmax: vocabulary axis must have length >= 2, got {0}")]
    EmptyVocab(usize),
    #[error("backward: root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite_difference: non-finite objective value at coordinate {0}")]
    NonFiniteObjective(usize),
}

/// Dense row-major float64 tensor. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GradError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GradError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data reinterpreted as a flat vector.
    pub fn flattened(&self) -> Tensor {
        Tensor::vector(self.data.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    LogSoftmax(NodeId),
    L2Sq(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Single-threaded; distinct tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input. Gradients are reported for leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input; backward will not propagate into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, GradError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(GradError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| c * x).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Matrix product. Accepts (m,k)x(k,n) -> (m,n) and (m,k)x(k,) -> (m,).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || GradError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape.clone(),
            rhs: tb.shape.clone(),
        };
        let value = match ta.shape.as_slice() {
            [m, k] => {
                let (m, k) = (*m, *k);
                match tb.shape.as_slice() {
                    [k2] if *k2 == k => {
                        let mut out = vec![0.0; m];
                        for i in 0..m {
                            let row = &ta.data[i * k..(i + 1) * k];
                            out[i] = row.iter().zip(&tb.data).map(|(&x, &y)| x * y).sum();
                        }
                        Tensor {
                            shape: vec![m],
                            data: out,
                        }
                    }
                    [k2, n] if *k2 == k => {
                        let n = *n;
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = ta.data[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let brow = &tb.data[p * n..(p + 1) * n];
                                let orow = &mut out[i * n..(i + 1) * n];
                                for (o, &bv) in orow.iter_mut().zip(brow) {
                                    *o += aip * bv;
                                }
                            }
                        }
                        Tensor {
                            shape: vec![m, n],
                            data: out,
                        }
                    }
                    _ => return Err(mismatch()),
                }
            }
            _ => return Err(mismatch()),
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.tanh()).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Select rows of a 1-D or 2-D tensor, concatenated into a flat vector.
    /// For a 1-D source each "row" is a single entry.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, GradError> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = match ta.shape.as_slice() {
            [r] => (*r, 1usize),
            [r, c] => (*r, *c),
            other => {
                return Err(GradError::BadShape {
                    op: "gather_rows",
                    shape: other.to_vec(),
                })
            }
        };
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(GradError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(&ta.data[i * cols..(i + 1) * cols]);
        }
        let value = Tensor {
            shape: vec![indices.len() * cols],
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        let mut data = Vec::new();
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.shape.len() != 1 {
                return Err(GradError::BadShape {
                    op: "concat",
                    shape: tp.shape.clone(),
                });
            }
            data.extend_from_slice(&tp.data);
        }
        let value = Tensor {
            shape: vec![data.len()],
            data,
        };
        let rg = self.needs_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Numerically stable log-softmax over the last axis of a 1-D or 2-D
    /// tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = match ta.shape.as_slice() {
            [c] => (1usize, *c),
            [r, c] => (*r, *c),
            other => {
                return Err(GradError::BadShape {
                    op: "log_softmax",
                    shape: other.to_vec(),
                })
            }
        };
        if cols < 2 {
            return Err(GradError::EmptyVocab(cols));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Squared euclidean distance between two same-shaped tensors.
    pub fn l2_squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(GradError::ShapeMismatch {
                op: "l2_squared_distance",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let s: f64 = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L2Sq(a, b), rg))
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively;
    /// nodes unreachable from the root keep a zero gradient.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, GradError> {
        let rt = &self.nodes[root.0].value;
        if rt.numel() != 1 || !rt.shape.is_empty() {
            return Err(GradError::NonScalarRoot(rt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data.iter().cloned());
                    self.accumulate(&mut grads, *b, g.data.iter().cloned());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.data.iter().cloned());
                    self.accumulate(&mut grads, *b, g.data.iter().map(|&x| -x));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data.iter().zip(&tb.data).map(|(&gv, &y)| gv * y),
                    );
                    self.accumulate(
                        &mut grads,
                        *b,
                        g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv * x),
                    );
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, g.data.iter().map(|&x| c * x));
                }
                Op::Matmul(a, b) => {
                    self.backward_matmul(&mut grads, *a, *b, &g);
                }
                Op::Relu(a) => {
                    let ta = &self.nodes[a.0].value;
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data
                            .iter()
                            .zip(&ta.data)
                            .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }),
                    );
                }
                Op::Tanh(a) => {
                    let tv = &node.value;
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data
                            .iter()
                            .zip(&tv.data)
                            .map(|(&gv, &y)| gv * (1.0 - y * y)),
                    );
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let gv = g.data[0];
                    self.accumulate(&mut grads, *a, std::iter::repeat(gv).take(n));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let gv = g.data[0] / n as f64;
                    self.accumulate(&mut grads, *a, std::iter::repeat(gv).take(n));
                }
                Op::GatherRows(a, indices) => {
                    let ta = &self.nodes[a.0].value;
                    let cols = match ta.shape.as_slice() {
                        [_] => 1usize,
                        [_, c] => *c,
                        _ => unreachable!(),
                    };
                    let mut ga = Tensor::zeros(ta.shape.clone());
                    for (k, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            ga.data[idx * cols + c] += g.data[k * cols + c];
                        }
                    }
                    self.accumulate(&mut grads, *a, ga.data.iter().cloned());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.numel();
                        self.accumulate(&mut grads, p, g.data[off..off + n].iter().cloned());
                        off += n;
                    }
                }
                Op::LogSoftmax(a) => {
                    let tv = &node.value;
                    let (rows, cols) = match tv.shape.as_slice() {
                        [c] => (1usize, *c),
                        [r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gsum: f64 = g.data[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let y = tv.data[r * cols + c];
                            ga[r * cols + c] = g.data[r * cols + c] - y.exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, *a, ga.iter().cloned());
                }
                Op::L2Sq(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let gv = g.data[0];
                    self.accumulate(
                        &mut grads,
                        *a,
                        ta.data
                            .iter()
                            .zip(&tb.data)
                            .map(|(&x, &y)| 2.0 * gv * (x - y)),
                    );
                    self.accumulate(
                        &mut grads,
                        *b,
                        ta.data
                            .iter()
                            .zip(&tb.data)
                            .map(|(&x, &y)| -2.0 * gv * (x - y)),
                    );
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        contribution: impl Iterator<Item = f64>,
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        match slot {
            Some(t) => {
                for (dst, src) in t.data.iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => {
                let shape = self.nodes[target.0].value.shape.clone();
                let mut t = Tensor::zeros(shape);
                for (dst, src) in t.data.iter_mut().zip(contribution) {
                    *dst += src;
                }
                *slot = Some(t);
            }
        }
    }

    fn backward_matmul(&self, grads: &mut [Option<Tensor>], a: NodeId, b: NodeId, g: &Tensor) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let [m, k] = *ta.shape.as_slice() else {
            unreachable!()
        };
        match tb.shape.as_slice() {
            [_] => {
                // C = A v: dA = g v^T, dv = A^T g
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k];
                for i in 0..m {
                    let gi = g.data[i];
                    for p in 0..k {
                        ga[i * k + p] = gi * tb.data[p];
                        gb[p] += gi * ta.data[i * k + p];
                    }
                }
                self.accumulate(grads, a, ga.into_iter());
                self.accumulate(grads, b, gb.into_iter());
            }
            [_, n] => {
                let n = *n;
                // dA = g B^T, dB = A^T g
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data[i * n + j] * tb.data[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ta.data[i * k + p] * g.data[i * n + j];
                        }
                        gb[p * n + j] = s;
                    }
                }
                self.accumulate(grads, a, ga.into_iter());
                self.accumulate(grads, b, gb.into_iter());
            }
            _ => unreachable!(),
        }
    }
}

/// Result of a backward pass: one gradient tensor per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node. Zero for nodes
    /// the root does not depend on.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

/// Central-difference gradient estimate of a scalar objective, component-wise.
pub fn finite_difference_gradient<F>(
    mut objective: F,
    point: &Tensor,
    h: f64,
) -> Result<Tensor, GradError>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let mut grad = Tensor::zeros(point.shape().to_vec());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = objective(&probe);
        probe.data[i] = orig - h;
        let fm = objective(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradError::NonFiniteObjective(i));
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Component-wise relative error with denominator max(|a|, |n|, floor).
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_sign_boundaries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0; 3]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 3.0);
    }

    #[test]
    fn shape_mismatch_is_diagnosed() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        let ln2 = 2.0_f64.ln();
        for &v in tape.value(y).data() {
            assert!((v + ln2).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        assert!(tape.value(y).all_finite());
        assert!(tape.value(y).data()[0].abs() < 1e-9);
        assert!((tape.value(y).data()[1] + 1000.0).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_matches_naive_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let logits = rand_vec(&mut rng, 17);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(logits.clone()));
            let y = tape.log_softmax(x).unwrap();
            // naive exp/sum oracle
            let z: f64 = logits.iter().map(|&v| v.exp()).sum();
            for (got, &l) in tape.value(y).data().iter().zip(&logits) {
                assert!((got - (l.exp() / z).ln()).abs() < 1e-9);
            }
            // exponentiated row sums to 1
            let s: f64 = tape.value(y).data().iter().map(|&v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_vec(&mut rng, 9);
        let shifted: Vec<f64> = logits.iter().map(|&v| v + 42.0).collect();
        let mut t1 = Tape::new();
        let a = t1.leaf(Tensor::vector(logits));
        let ya = t1.log_softmax(a).unwrap();
        let mut t2 = Tape::new();
        let b = t2.leaf(Tensor::vector(shifted));
        let yb = t2.log_softmax(b).unwrap();
        for (x, y) in t1.value(ya).data().iter().zip(t2.value(yb).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_rejects_single_entry_vocab() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(tape.log_softmax(x).is_err());
    }

    #[test]
    fn l2sq_zero_and_closed_form() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let d0 = tape.l2_squared_distance(v, v).unwrap();
        assert_eq!(tape.value(d0).item(), 0.0);

        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let d = tape.l2_squared_distance(a, b).unwrap();
        // independent scalar loop oracle
        let expect: f64 = [1.0, 2.0]
            .iter()
            .zip([0.0, 0.0].iter())
            .map(|(x, y): (&f64, &f64)| (x - y) * (x - y))
            .sum();
        assert_eq!(tape.value(d).item(), expect);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_l2sq_is_two_diff() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let d = tape.l2_squared_distance(x, c).unwrap();
        let g = tape.backward(d).unwrap();
        for (gv, xv) in g.grad(x).data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((gv - 2.0 * (xv - 0.5)).abs() < 1e-12);
        }
        // finite-difference cross-check
        let point = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let num = finite_difference_gradient(
            |p| {
                let mut t = Tape::new();
                let x = t.leaf(p.clone());
                let c = t.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
                let d = t.l2_squared_distance(x, c).unwrap();
                t.value(d).item()
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g.grad(x), &num, 1e-8) < 1e-6);
    }

    #[test]
    fn backward_constant_wrt_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_linear_over_subgraph_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xv = rand_vec(&mut rng, 5);
        let grad_of = |combined: bool| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xv.clone()));
            let t = tape.tanh(x);
            let s1 = tape.sum(t);
            let m = tape.mul(x, x).unwrap();
            let s2 = tape.sum(m);
            if combined {
                let both = tape.add(s1, s2).unwrap();
                let g = tape.backward(both).unwrap();
                vec![g.grad(x)]
            } else {
                let g1 = tape.backward(s1).unwrap();
                let g2 = tape.backward(s2).unwrap();
                vec![g1.grad(x), g2.grad(x)]
            }
        };
        let combined = grad_of(true);
        let parts = grad_of(false);
        for i in 0..5 {
            let sum = parts[0].data()[i] + parts[1].data()[i];
            assert!((combined[0].data()[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_on_square_and_linear() {
        let sq = |p: &Tensor| p.data()[0] * p.data()[0];
        let g = finite_difference_gradient(sq, &Tensor::vector(vec![3.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let c = [2.0, -1.0, 0.5];
        let lin = |p: &Tensor| p.data().iter().zip(c.iter()).map(|(x, k)| x * k).sum();
        let g = finite_difference_gradient(lin, &Tensor::vector(vec![1.0, 2.0, 3.0]), 1e-5).unwrap();
        for (gv, kv) in g.data().iter().zip(c) {
            assert!((gv - kv).abs() < 1e-9);
        }

        let constant = |_: &Tensor| 7.0;
        let g = finite_difference_gradient(constant, &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_rejects_non_finite_objective() {
        let bad = |p: &Tensor| {
            if p.data()[1] > 0.5 {
                f64::NAN
            } else {
                0.0
            }
        };
        let err =
            finite_difference_gradient(bad, &Tensor::vector(vec![0.0, 0.5]), 1e-2).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    /// Every primitive against central finite differences at seeded points.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let xs = rand_vec(&mut rng, 6);
            let ws = rand_vec(&mut rng, 12);
            let build = |p: &Tensor| -> f64 {
                let mut t = Tape::new();
                let x = t.leaf(p.clone());
                let w = t.constant(Tensor::new(vec![2, 6], ws.clone()).unwrap());
                let y = t.matmul(w, x).unwrap(); // [2]
                let th = t.tanh(x);
                let r = t.relu(x);
                let mixed = t.mul(th, r).unwrap();
                let sc = t.scale(mixed, 0.7);
                let sm = t.sum(sc);
                let ls = t.log_softmax(y).unwrap();
                let picked = t.gather_rows(ls, &[1]).unwrap();
                let ps = t.sum(picked);
                let mn = t.mean(x);
                let cat = t.concat(&[y, th]).unwrap();
                let c0 = t.constant(Tensor::vector(vec![0.1; 8]));
                let d = t.l2_squared_distance(cat, c0).unwrap();
                let a1 = t.add(sm, ps).unwrap();
                let a2 = t.add(a1, mn).unwrap();
                let sub = t.sub(a2, d).unwrap();
                t.value(sub).item()
            };
            let analytic = {
                let mut t = Tape::new();
                let x = t.leaf(Tensor::vector(xs.clone()));
                let w = t.constant(Tensor::new(vec![2, 6], ws.clone()).unwrap());
                let y = t.matmul(w, x).unwrap();
                let th = t.tanh(x);
                let r = t.relu(x);
                let mixed = t.mul(th, r).unwrap();
                let sc = t.scale(mixed, 0.7);
                let sm = t.sum(sc);
                let ls = t.log_softmax(y).unwrap();
                let picked = t.gather_rows(ls, &[1]).unwrap();
                let ps = t.sum(picked);
                let mn = t.mean(x);
                let cat = t.concat(&[y, th]).unwrap();
                let c0 = t.constant(Tensor::vector(vec![0.1; 8]));
                let d = t.l2_squared_distance(cat, c0).unwrap();
                let a1 = t.add(sm, ps).unwrap();
                let a2 = t.add(a1, mn).unwrap();
                let sub = t.sub(a2, d).unwrap();
                let g = t.backward(sub).unwrap();
                g.grad(x)
            };
            let numeric =
                finite_difference_gradient(build, &Tensor::vector(xs.clone()), 1e-5).unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
