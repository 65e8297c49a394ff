//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep.

use super::tensor::{softmax_cross_entropy_with_probs, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Bilinear(Var, Var, Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that precedes it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn wrt(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

const NORM_EPS: f64 = 1e-12;

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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn parameters(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Elementwise sum. When `b` is a vector (or `[1, n]`) and `a` is `[m, n]`,
    /// `b` is added to every row; no other broadcasting is performed.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
            return Ok(self.push(Op::Add(a, b), out));
        }
        let is_bias = sa.len() == 2
            && ((sb.len() == 1 && sb[0] == sa[1]) || (sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1]));
        if !is_bias {
            return Err(Error::dim(format!("add of {sa:?} and {sb:?}")));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(sa[1]) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::invalid(format!(
                "concat of {} inputs along axis {axis}",
                inputs.len()
            )));
        }
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(Error::dim(format!("concat expects matrices, got {shapes:?}")));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(Error::dim(format!("concat along axis {axis} of {shapes:?}")));
        }
        let out = if axis == 0 {
            let rows: usize = shapes.iter().map(|s| s[0]).sum();
            let mut data = Vec::with_capacity(rows * shapes[0][1]);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::new(&[rows, shapes[0][1]], data)?
        } else {
            let m = shapes[0][0];
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(m * cols);
            for i in 0..m {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(&[m, cols], data)?
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a matrix starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::dim(format!("slice axis {axis} of {s:?}")));
        }
        if len == 0 || start + len > s[axis] {
            return Err(Error::Index(format!(
                "slice {start}..{} along axis {axis} of {s:?}",
                start + len
            )));
        }
        let src = self.value(a);
        let out = if axis == 0 {
            src.slice_rows(start, len)?
        } else {
            let mut data = Vec::with_capacity(s[0] * len);
            for i in 0..s[0] {
                data.extend_from_slice(&src.row(i)[start..start + len]);
            }
            Tensor::new(&[s[0], len], data)?
        };
        Ok(self.push(Op::Slice { input: a, axis, start }, out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Mean softmax cross-entropy of `logits` (`[batch, classes]`) against
    /// class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy_with_probs(self.value(logits), targets)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Score matrix `u · W · vᵀ`: entry (i, j) is the bilinear form of row i
    /// of `u` with row j of `v`.
    pub fn bilinear(&mut self, u: Var, w: Var, v: Var) -> Result<Var> {
        let uw = self.value(u).matmul(self.value(w))?;
        let out = uw.matmul_nt(self.value(v))?;
        Ok(self.push(Op::Bilinear(u, w, v), out))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 {
            return Err(Error::dim(format!(
                "l2_normalize_rows expects a matrix, got {:?}",
                src.shape()
            )));
        }
        let cols = src.cols();
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(self.push(Op::L2NormalizeRows { input: a, norms }, out))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_nt(self.value(*b))?),
                (*b, self.value(*a).matmul_tn(g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(a, b) => {
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                let bshape = self.shape(*b).to_vec();
                vec![(*a, g.clone()), (*b, Tensor::new(&bshape, db)?)]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |gi, bi| gi * bi)?),
                (*b, g.zip_map(self.value(*a), |gi, ai| gi * ai)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?)],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?,
            )],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |gi, yi| gi * yi)?)],
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), |gi, xi| gi / xi)?)],
            Op::Concat { inputs, axis } => {
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let part = if *axis == 0 {
                        g.slice_rows(offset, s[0])?
                    } else {
                        let mut data = Vec::with_capacity(s[0] * s[1]);
                        for i in 0..s[0] {
                            data.extend_from_slice(&g.row(i)[offset..offset + s[1]]);
                        }
                        Tensor::new(s, data)?
                    };
                    offset += s[*axis];
                    res.push((v, part));
                }
                res
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let mut full = Tensor::zeros(&s);
                let cols = s[1];
                if *axis == 0 {
                    full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for i in 0..s[0] {
                        full.data_mut()[i * cols + start..i * cols + start + len]
                            .copy_from_slice(g.row(i));
                    }
                }
                vec![(*input, full)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.item()))],
            Op::Mean(a) => {
                let s = self.shape(*a);
                let n: usize = s.iter().product();
                vec![(*a, Tensor::full(s, g.item() / n as f64))]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let batch = targets.len() as f64;
                let scale = g.item() / batch;
                let cols = probs.cols();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d.data_mut()[i * cols + t] -= 1.0;
                }
                d.data_mut().iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, d)]
            }
            Op::Bilinear(u, w, v) => {
                let (uv, wv, vv) = (self.value(*u), self.value(*w), self.value(*v));
                // S = U W Vᵀ
                let gv = g.matmul(vv)?; // G V
                let du = gv.matmul_nt(wv)?; // G V Wᵀ
                let dw = uv.matmul_tn(&gv)?; // Uᵀ G V
                let uw = uv.matmul(wv)?;
                let dv = g.matmul_tn(&uw)?; // Gᵀ U W
                vec![(*u, du), (*w, dw), (*v, dv)]
            }
            Op::L2NormalizeRows { input, norms } => {
                let cols = y.cols();
                let mut d = g.clone();
                for (i, row) in d.data_mut().chunks_mut(cols).enumerate() {
                    let yr = y.row(i);
                    let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (r, &yv) in row.iter_mut().zip(yr) {
                        *r = (*r - yv * dot) / norms[i];
                    }
                }
                vec![(*input, d)]
            }
        };
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
