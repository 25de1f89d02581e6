//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive application appends a node holding its output value, its
//! input handles and the primitive tag. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives understood by the tape.
///
/// Binary elementwise ops broadcast when one operand's shape is a suffix of
/// the other's (a bias row against a batch, a scalar against anything).
/// Axis-sensitive ops (`Concat`, `Slice`, `LogSumExp`,
/// `SoftmaxCrossEntropy`) work on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    /// Sum of a rank-2 tensor along one axis.
    SumAxis(usize),
    Concat,
    Slice {
        start: usize,
        end: usize,
    },
    LogSumExp,
    /// Per-row `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::LogSumExp => "log_sum_exp",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Clamp { .. } => "clamp",
        }
    }
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// New constant leaf carrying the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `prim` to `inputs`, records the result and returns its handle.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(prim.name(), "needs at least one input"));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&prim, &values)?;
        if out.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: prim.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: out,
            prim: Some(prim),
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    /// Mean over the rows of a rank-2 tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).first().copied().unwrap_or(1).max(1);
        let s = self.sum_axis(a, 0)?;
        self.scale(s, 1.0 / n as f64)
    }
    /// Per-row sum over the last axis (`[n, d] -> [n]`, `[d] -> []`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let axis = self.value(a).rank().saturating_sub(1);
        self.sum_axis(a, axis)
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, end }, &[a])
    }
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[a])
    }
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::GatherRows {
                indices: indices.to_vec(),
            },
            &[table],
        )
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not on this tape"))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let local = backward_rule(prim, &inputs, &node.value, &upstream);
            for (k, g) in local.into_iter().enumerate() {
                let src = node.inputs[k];
                let Some(g) = g else { continue };
                if !self.nodes[src.0].requires_grad {
                    continue;
                }
                match &mut grads[src.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the upstream gradient on the node so callers can inspect it.
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
    Ok(Tensor::from_parts(shape, data))
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.outer(), t.last_dim())
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = prim.name();
    Ok(match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    name,
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * m..(p + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Primitive::Add => binary(name, x[0], x[1], |a, b| a + b)?,
        Primitive::Sub => binary(name, x[0], x[1], |a, b| a - b)?,
        Primitive::Mul => binary(name, x[0], x[1], |a, b| a * b)?,
        Primitive::Scale(c) => unary(x[0], |v| v * c),
        Primitive::AddScalar(c) => unary(x[0], |v| v + c),
        Primitive::Tanh => unary(x[0], f64::tanh),
        Primitive::Relu => unary(x[0], |v| v.max(0.0)),
        Primitive::Exp => unary(x[0], f64::exp),
        Primitive::Log => unary(x[0], f64::ln),
        Primitive::Square => unary(x[0], |v| v * v),
        Primitive::Sum => Tensor::from_parts(Vec::new(), vec![x[0].data().iter().sum()]),
        Primitive::Mean => {
            let n = x[0].numel();
            if n == 0 {
                return Err(Error::shape(name, "mean of an empty tensor"));
            }
            Tensor::from_parts(Vec::new(), vec![x[0].data().iter().sum::<f64>() / n as f64])
        }
        Primitive::SumAxis(axis) => {
            let t = x[0];
            match (t.rank(), axis) {
                (1, 0) => Tensor::from_parts(Vec::new(), vec![t.data().iter().sum()]),
                (2, 0) => {
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
                    }
                    Tensor::from_parts(vec![c], out)
                }
                (2, 1) => {
                    let r = t.shape()[0];
                    Tensor::from_parts(vec![r], (0..r).map(|i| t.row(i).iter().sum()).collect())
                }
                _ => {
                    return Err(Error::shape(
                        name,
                        format!("axis {axis} invalid for shape {:?}", t.shape()),
                    ))
                }
            }
        }
        Primitive::Concat => {
            let lead = &x[0].shape()[..x[0].rank().saturating_sub(1)];
            if x.iter().any(|t| t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead) {
                return Err(Error::shape(name, "leading dimensions differ"));
            }
            let rows = x[0].outer();
            let total: usize = x.iter().map(|t| t.last_dim()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for t in x {
                    out.extend_from_slice(t.row(i));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, out)
        }
        Primitive::Slice { start, end } => {
            let t = x[0];
            let d = t.last_dim();
            if t.rank() == 0 || start >= end || *end > d {
                return Err(Error::shape(
                    name,
                    format!("range {start}..{end} invalid for last axis {d}"),
                ));
            }
            let mut out = Vec::with_capacity(t.outer() * (end - start));
            for i in 0..t.outer() {
                out.extend_from_slice(&t.row(i)[*start..*end]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            Tensor::from_parts(shape, out)
        }
        Primitive::LogSumExp => {
            let t = x[0];
            if t.rank() == 0 || t.last_dim() == 0 {
                return Err(Error::shape(name, "needs a non-empty last axis"));
            }
            let out = (0..t.outer()).map(|i| log_sum_exp(t.row(i))).collect();
            Tensor::from_parts(t.shape()[..t.rank() - 1].to_vec(), out)
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let t = x[0];
            let (rows, c) = rows_cols(t);
            if t.rank() == 0 || labels.len() != rows {
                return Err(Error::shape(
                    name,
                    format!("{} labels for logits of shape {:?}", labels.len(), t.shape()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
            }
            let out = (0..rows).map(|i| log_sum_exp(t.row(i)) - t.row(i)[labels[i]]).collect();
            Tensor::from_parts(t.shape()[..t.rank() - 1].to_vec(), out)
        }
        Primitive::GatherRows { indices } => {
            let t = x[0];
            if t.rank() != 2 {
                return Err(Error::shape(name, "table must be rank 2"));
            }
            t.select_rows(indices)
                .map_err(|_| Error::contract(format!("row index out of range for table {:?}", t.shape())))?
        }
        Primitive::Clamp { lo, hi } => unary(x[0], |v| v.clamp(*lo, *hi)),
    })
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Reduces a gradient of the broadcast output back onto an input of `len` elements.
fn unbroadcast(g: Vec<f64>, len: usize) -> Vec<f64> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.into_iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn backward_rule(prim: &Primitive, x: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        // f(input, output) -> local derivative
        let d = x[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(g)
            .map(|((&xi, &yi), &gi)| gi * f(xi, yi))
            .collect();
        vec![Some(d)]
    };
    match prim {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; n * k];
            let mut gb = vec![0.0; k * m];
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let brow = &bd[p * m..(p + 1) * m];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                    let aip = ad[i * k + p];
                    if aip != 0.0 {
                        let gbrow = &mut gb[p * m..(p + 1) * m];
                        gbrow.iter_mut().zip(grow).for_each(|(o, gv)| *o += aip * gv);
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let (ga, gb): (Vec<f64>, Vec<f64>) = match prim {
                Primitive::Add => (g.to_vec(), g.to_vec()),
                Primitive::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                _ => g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| (gi * bd[i % nb], gi * ad[i % na]))
                    .unzip(),
            };
            vec![Some(unbroadcast(ga, na)), Some(unbroadcast(gb, nb))]
        }
        Primitive::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Primitive::AddScalar(_) => vec![Some(g.to_vec())],
        Primitive::Tanh => elementwise(&|_, y| 1.0 - y * y),
        Primitive::Relu => elementwise(&|xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Exp => elementwise(&|_, y| y),
        Primitive::Log => elementwise(&|xv, _| 1.0 / xv),
        Primitive::Square => elementwise(&|xv, _| 2.0 * xv),
        Primitive::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Primitive::Mean => {
            let n = x[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Primitive::SumAxis(axis) => {
            let t = x[0];
            let gd = match (t.rank(), axis) {
                (1, _) => vec![g[0]; t.numel()],
                (2, 0) => {
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    (0..r * c).map(|i| g[i % c]).collect()
                }
                _ => {
                    let c = t.shape()[1];
                    (0..t.numel()).map(|i| g[i / c]).collect()
                }
            };
            vec![Some(gd)]
        }
        Primitive::Concat => {
            let rows = out.outer();
            let total = out.last_dim();
            let mut offset = 0;
            let mut res = Vec::with_capacity(x.len());
            for t in x {
                let d = t.last_dim();
                let mut gt = Vec::with_capacity(rows * d);
                for i in 0..rows {
                    gt.extend_from_slice(&g[i * total + offset..i * total + offset + d]);
                }
                offset += d;
                res.push(Some(gt));
            }
            res
        }
        Primitive::Slice { start, end } => {
            let t = x[0];
            let d = t.last_dim();
            let w = end - start;
            let mut gt = vec![0.0; t.numel()];
            for i in 0..t.outer() {
                gt[i * d + start..i * d + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(gt)]
        }
        Primitive::LogSumExp => {
            let t = x[0];
            let d = t.last_dim();
            let mut gt = Vec::with_capacity(t.numel());
            for i in 0..t.outer() {
                let lse = out.data()[i];
                gt.extend(t.row(i).iter().map(|v| g[i] * (v - lse).exp()));
            }
            debug_assert_eq!(gt.len(), t.outer() * d);
            vec![Some(gt)]
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let t = x[0];
            let mut gt = Vec::with_capacity(t.numel());
            for (i, &label) in labels.iter().enumerate() {
                let row = t.row(i);
                let lse = log_sum_exp(row);
                gt.extend(row.iter().enumerate().map(|(j, v)| {
                    let p = (v - lse).exp();
                    g[i] * (p - if j == label { 1.0 } else { 0.0 })
                }));
            }
            vec![Some(gt)]
        }
        Primitive::GatherRows { indices } => {
            let t = x[0];
            let d = t.last_dim();
            let mut gt = vec![0.0; t.numel()];
            for (r, &src) in indices.iter().enumerate() {
                gt[src * d..(src + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(o, v)| *o += v);
            }
            vec![Some(gt)]
        }
        Primitive::Clamp { lo, hi } => elementwise(&|xv, _| if xv >= *lo && xv <= *hi { 1.0 } else { 0.0 }),
    }
}
