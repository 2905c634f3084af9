//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every minibatch. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order and every node is visited exactly once by
//! [`Graph::backward`].
//!
//! ```
//! use gsf_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.mean(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
//! ```

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bcast: Broadcast },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu(Var),
    Square(Var),
    Transpose(Var),
    LogSoftmax { a: Var, axis: usize },
    LogSumExp { a: Var, axis: usize },
    MaskedLogSumExp { a: Var, mask: Vec<bool> },
    Mean(Var),
    Sum(Var),
    SumAxis { a: Var, axis: usize },
    Gather { a: Var, index: Vec<usize> },
    GatherRows { a: Var, index: Vec<usize> },
    GatherBlocks { a: Var, block: Vec<usize>, width: usize },
    CosineSimilarity { a: Var, b: Var },
    L2NormalizeRows(Var),
    L1Norm { a: Var, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Transpose(_) => "transpose",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherBlocks { .. } => "gather_blocks",
            Op::CosineSimilarity { .. } => "cosine_similarity",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::L1Norm { .. } => "l1_norm",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    None,
    /// `b` is a row vector added to every row of `a`.
    Row,
    /// `b` holds a single element.
    Scalar,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Memory layout of one reduction axis: `outer` lanes, each of `len`
/// elements spaced `stride` apart.
struct Lanes {
    starts: Vec<usize>,
    len: usize,
    stride: usize,
}

fn lanes(op: &'static str, shape: &[usize], axis: usize) -> Result<Lanes> {
    match (shape, axis) {
        ([n], 0) => Ok(Lanes {
            starts: vec![0],
            len: *n,
            stride: 1,
        }),
        ([r, c], 1) => Ok(Lanes {
            starts: (0..*r).map(|i| i * c).collect(),
            len: *c,
            stride: 1,
        }),
        ([r, c], 0) => Ok(Lanes {
            starts: (0..*c).collect(),
            len: *r,
            stride: *c,
        }),
        _ => Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        }),
    }
}

/// Output shape after reducing `axis` of a rank 1 or 2 shape.
fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    match shape {
        [_] => vec![],
        [r, c] => {
            if axis == 1 {
                vec![*r]
            } else {
                vec![*c]
            }
        }
        _ => unreachable!("validated by lanes()"),
    }
}

fn lane_logsumexp(data: &[f64], start: usize, len: usize, stride: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for j in 0..len {
        max = max.max(data[start + j * stride]);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = (0..len)
        .map(|j| (data[start + j * stride] - max).exp())
        .sum();
    max + sum.ln()
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const NORM_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameters, or anything a gradient is wanted for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product `a · b` of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ` of `[m, k]` and `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            br,
            bc,
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Elementwise sum. `b` may also be a row vector matching the last axis
    /// of a matrix `a`, or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bcast = if sa == sb {
            Broadcast::None
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Broadcast::Row
        } else if self.value(b).len() == 1 {
            Broadcast::Scalar
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = match bcast {
            Broadcast::None => av.data().iter().zip(bv).map(|(x, y)| x + y).collect(),
            Broadcast::Row => {
                let c = sb[0];
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + bv[i % c])
                    .collect()
            }
            Broadcast::Scalar => av.data().iter().map(|x| x + bv[0]).collect(),
        };
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Add { a, b, bcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Numerically stable `log_softmax` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = lanes("log_softmax", self.shape(a), axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for &s in &lanes.starts {
            let lse = lane_logsumexp(src, s, lanes.len, lanes.stride);
            for j in 0..lanes.len {
                let idx = s + j * lanes.stride;
                out[idx] = src[idx] - lse;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::LogSoftmax { a, axis }, &[a])
    }

    /// Numerically stable log-sum-exp reducing `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = lanes("logsumexp", self.shape(a), axis)?;
        if lanes.len == 0 {
            return Err(TensorError::Empty { op: "logsumexp" });
        }
        let src = self.value(a).data();
        let out: Vec<f64> = lanes
            .starts
            .iter()
            .map(|&s| lane_logsumexp(src, s, lanes.len, lanes.stride))
            .collect();
        let value = Tensor::new(reduced_shape(self.shape(a), axis), out)?;
        self.push(value, Op::LogSumExp { a, axis }, &[a])
    }

    /// Log-sum-exp over the entries selected by `mask`, as a scalar.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(a).data();
        if mask.len() != src.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_logsumexp",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let max = src
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::Empty {
                op: "masked_logsumexp",
            });
        }
        let sum: f64 = src
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| (v - max).exp())
            .sum();
        let value = Tensor::scalar(max + sum.ln());
        self.push(value, Op::MaskedLogSumExp { a, mask }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = lanes("sum_axis", self.shape(a), axis)?;
        let src = self.value(a).data();
        let out: Vec<f64> = lanes
            .starts
            .iter()
            .map(|&s| (0..lanes.len).map(|j| src[s + j * lanes.stride]).sum())
            .collect();
        let value = Tensor::new(reduced_shape(self.shape(a), axis), out)?;
        self.push(value, Op::SumAxis { a, axis }, &[a])
    }

    /// Picks `a[i, index[i]]` from every row of a matrix.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims2("gather", a)?;
        if index.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: vec![r, c],
                right: vec![index.len()],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(TensorError::Index {
                    op: "gather",
                    index: j,
                    bound: c,
                });
            }
            out.push(src[i * c + j]);
        }
        let value = Tensor::vector(out);
        self.push(value, Op::Gather { a, index }, &[a])
    }

    /// Selects (possibly repeated) rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![index.len(), c], out)?;
        self.push(value, Op::GatherRows { a, index }, &[a])
    }

    /// For each row `i`, takes the `width` columns of block `block[i]`.
    pub fn gather_blocks(&mut self, a: Var, block: Vec<usize>, width: usize) -> Result<Var> {
        let (r, c) = self.dims2("gather_blocks", a)?;
        if block.len() != r || width == 0 || c % width != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_blocks",
                left: vec![r, c],
                right: vec![block.len(), width],
            });
        }
        let blocks = c / width;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * width);
        for (i, &b) in block.iter().enumerate() {
            if b >= blocks {
                return Err(TensorError::Index {
                    op: "gather_blocks",
                    index: b,
                    bound: blocks,
                });
            }
            let start = i * c + b * width;
            out.extend_from_slice(&src[start..start + width]);
        }
        let value = Tensor::new(vec![r, width], out)?;
        self.push(value, Op::GatherBlocks { a, block, width }, &[a])
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (r, _) = self.dims2("cosine_similarity", a)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..r)
            .map(|i| {
                let (x, y) = (av.row(i), bv.row(i));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                dot / (row_norm(x).max(NORM_FLOOR) * row_norm(y).max(NORM_FLOOR))
            })
            .collect();
        let value = Tensor::vector(out);
        self.push(value, Op::CosineSimilarity { a, b }, &[a, b])
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("l2_normalize_rows", a)?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row(i);
            let n = row_norm(row).max(NORM_FLOOR);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::L2NormalizeRows(a), &[a])
    }

    /// Sum of absolute values along `axis`.
    pub fn l1_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let lanes = lanes("l1_norm", self.shape(a), axis)?;
        let src = self.value(a).data();
        let out: Vec<f64> = lanes
            .starts
            .iter()
            .map(|&s| (0..lanes.len).map(|j| src[s + j * lanes.stride].abs()).sum())
            .collect();
        let value = Tensor::new(reduced_shape(self.shape(a), axis), out)?;
        self.push(value, Op::L1Norm { a, axis }, &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &g)?;
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(TensorError::NonFiniteGradient { op: node.op.name() });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(x, y)| *x += y),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        let gd = g.data();
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (br, bc) = bv.dims2()?;
                let n = out.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · op(B)ᵀ
                    gemm(gd, m, n, false, bv.data(), br, bc, !*trans_b, &mut da, false);
                    res.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; br * bc];
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(gd, m, n, true, av.data(), m, k, false, &mut db, false);
                    } else {
                        gemm(av.data(), m, k, true, gd, m, n, false, &mut db, false);
                    }
                    res.push((*b, Tensor::new(vec![br, bc], db)?));
                }
            }
            Op::Add { a, b, bcast } => {
                res.push((*a, g.clone()));
                if self.wants(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let db = match bcast {
                        Broadcast::None => g.clone(),
                        Broadcast::Row => {
                            let c = bshape[0];
                            let mut acc = vec![0.0; c];
                            for (i, v) in gd.iter().enumerate() {
                                acc[i % c] += v;
                            }
                            Tensor::new(bshape, acc)?
                        }
                        Broadcast::Scalar => Tensor::new(bshape, vec![gd.iter().sum()])?,
                    };
                    res.push((*b, db));
                }
            }
            Op::Sub { a, b } => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let shape = out.shape().to_vec();
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                    res.push((*a, Tensor::new(shape.clone(), d)?));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    res.push((*b, Tensor::new(shape, d)?));
                }
            }
            Op::Scale { a, factor } => res.push((*a, g.map(|v| v * factor))),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Square(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, x)| 2.0 * x * gv)
                    .collect();
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                res.push((*a, Tensor::new(vec![c, r], d)?));
            }
            Op::LogSoftmax { a, axis } => {
                // dx = g - softmax * sum(g) per lane
                let lanes = lanes("log_softmax", out.shape(), *axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for &s in &lanes.starts {
                    let gsum: f64 = (0..lanes.len).map(|j| gd[s + j * lanes.stride]).sum();
                    for j in 0..lanes.len {
                        let idx = s + j * lanes.stride;
                        d[idx] = gd[idx] - y[idx].exp() * gsum;
                    }
                }
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::LogSumExp { a, axis } => {
                let x = self.value(*a);
                let lanes = lanes("logsumexp", x.shape(), *axis)?;
                let xd = x.data();
                let mut d = vec![0.0; xd.len()];
                for (li, &s) in lanes.starts.iter().enumerate() {
                    let lse = out.data()[li];
                    for j in 0..lanes.len {
                        let idx = s + j * lanes.stride;
                        d[idx] = gd[li] * (xd[idx] - lse).exp();
                    }
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::MaskedLogSumExp { a, mask } => {
                let x = self.value(*a);
                let lse = out.item();
                let d = x
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(v, &m)| if m { gd[0] * (v - lse).exp() } else { 0.0 })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = gd[0] / x.len() as f64;
                res.push((*a, Tensor::filled(x.shape(), v)));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                res.push((*a, Tensor::filled(x.shape(), gd[0])));
            }
            Op::SumAxis { a, axis } => {
                let x = self.value(*a);
                let lanes = lanes("sum_axis", x.shape(), *axis)?;
                let mut d = vec![0.0; x.len()];
                for (li, &s) in lanes.starts.iter().enumerate() {
                    for j in 0..lanes.len {
                        d[s + j * lanes.stride] = gd[li];
                    }
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Gather { a, index } => {
                let x = self.value(*a);
                let (_, c) = x.dims2()?;
                let mut d = vec![0.0; x.len()];
                for (i, &j) in index.iter().enumerate() {
                    d[i * c + j] = gd[i];
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::GatherRows { a, index } => {
                let x = self.value(*a);
                let (_, c) = x.dims2()?;
                let mut d = vec![0.0; x.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[k * c + j];
                    }
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::GatherBlocks { a, block, width } => {
                let x = self.value(*a);
                let (_, c) = x.dims2()?;
                let mut d = vec![0.0; x.len()];
                for (i, &b) in block.iter().enumerate() {
                    let start = i * c + b * width;
                    d[start..start + width].copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::CosineSimilarity { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (r, c) = av.dims2()?;
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; r * c];
                for i in 0..r {
                    let (x, y) = (av.row(i), bv.row(i));
                    let (nx, ny) = (row_norm(x), row_norm(y));
                    if nx < NORM_FLOOR || ny < NORM_FLOOR {
                        continue;
                    }
                    let cos = out.data()[i];
                    for j in 0..c {
                        da[i * c + j] = gd[i] * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        db[i * c + j] = gd[i] * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                res.push((*a, Tensor::new(vec![r, c], da)?));
                res.push((*b, Tensor::new(vec![r, c], db)?));
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let (r, c) = x.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let n = row_norm(x.row(i));
                    if n < NORM_FLOOR {
                        continue;
                    }
                    let u = out.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(u).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - dot * u[j]) / n;
                    }
                }
                res.push((*a, Tensor::new(vec![r, c], d)?));
            }
            Op::L1Norm { a, axis } => {
                let x = self.value(*a);
                let lanes = lanes("l1_norm", x.shape(), *axis)?;
                let xd = x.data();
                let mut d = vec![0.0; xd.len()];
                for (li, &s) in lanes.starts.iter().enumerate() {
                    for j in 0..lanes.len {
                        let idx = s + j * lanes.stride;
                        d[idx] = gd[li] * xd[idx].signum() * (xd[idx] != 0.0) as u8 as f64;
                    }
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
        }
        Ok(res)
    }
}
