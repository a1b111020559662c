//! The computation tape: eager forward evaluation, reverse-mode gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Index of a node on the tape. Parents always have smaller indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Transpose,
    Conv2d { stride: usize },
    Relu,
    Tanh,
    Exp,
    Ln,
    Square,
    SumAll,
    MeanAll,
    SumAxis(usize),
    LogSumExpRows,
    DiagPart,
    GatherRows(Vec<usize>),
    ConcatCols,
    SliceCols(usize, usize),
    Reshape(Vec<usize>),
    RowsL2Norm,
    StopGrad,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Square => "square",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::SumAxis(_) => "sum_axis",
            Op::LogSumExpRows => "logsumexp_rows",
            Op::DiagPart => "diag_part",
            Op::GatherRows(_) => "gather_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::RowsL2Norm => "rows_l2norm",
            Op::StopGrad => "stop_grad",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Named gradients keyed by input/parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Sums gradient maps from independent shards. All maps must carry the
    /// same names and shapes.
    pub fn combine(shards: &[Gradients]) -> Result<Gradients> {
        let mut out = Gradients::default();
        for shard in shards {
            for (name, grad) in shard.iter() {
                match out.map.get_mut(name) {
                    None => {
                        out.map.insert(name.clone(), grad.clone());
                    }
                    Some(acc) => {
                        if acc.shape() != grad.shape() {
                            return Err(Error::shape(
                                "Gradients::combine",
                                format!("shard shapes differ for {name}"),
                            ));
                        }
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Mutable collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ParamStore { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }
}

/// Reverse-mode autodiff tape.
///
/// Operations evaluate eagerly as they are appended; [`Graph::forward_eval`]
/// rebinds named leaves and replays the tape, [`Graph::backward`] walks it
/// once in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
    checked: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.len())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: BTreeMap::new(),
            checked: false,
        }
    }

    /// Rejects NaN/Inf at node creation when enabled.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(Error::non_finite(format!(
                "node #{} ({})",
                self.nodes.len(),
                op.kind()
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn register_name(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate graph name {name}"
            )));
        }
        self.names.insert(name.to_string(), id);
        Ok(())
    }

    /// Named input leaf. Participates in gradients and can be rebound.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(Op::Input(name.to_string()), vec![], value, true)?;
        self.register_name(name, id)?;
        Ok(id)
    }

    /// Named input leaf excluded from gradient computation.
    pub fn input_no_grad(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(Op::Input(name.to_string()), vec![], value, false)?;
        self.register_name(name, id)?;
        Ok(id)
    }

    /// Named trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(Op::Param(name.to_string()), vec![], value, true)?;
        self.register_name(name, id)?;
        Ok(id)
    }

    /// Anonymous constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, vec![], value, false)
    }

    pub fn scalar(&mut self, x: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(x))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        let value = eval_op(&op, &[self.value(a)])?;
        let rg = grad_flows(&op) && self.nodes[a.0].requires_grad;
        self.push(op, vec![a], value, rg)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = eval_op(&op, &[self.value(a), self.value(b)])?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, vec![a, b], value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(c), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Matmul, a, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Transpose, a)
    }

    /// Valid-padding square-kernel convolution: x [N,C,H,W], w [F,C,k,k], b [F].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let op = Op::Conv2d { stride };
        let value = eval_op(&op, &[self.value(x), self.value(w), self.value(b)])?;
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(op, vec![x, w, b], value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Ln, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::SumAll, a)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::MeanAll, a)
    }

    /// Sum of a rank-2 tensor along `axis` (0 collapses rows, 1 columns).
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.unary(Op::SumAxis(axis), a)
    }

    /// Row-wise log-sum-exp of a rank-2 tensor.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::LogSumExpRows, a)
    }

    /// Main diagonal of a square matrix as a vector.
    pub fn diag_part(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::DiagPart, a)
    }

    /// Rows of a rank-2 tensor selected by index, with repetition allowed.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.unary(Op::GatherRows(indices), a)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::ConcatCols, a, b)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.unary(Op::SliceCols(from, to), a)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.unary(Op::Reshape(shape), a)
    }

    /// Euclidean norm of each row of a rank-2 tensor.
    pub fn rows_l2norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::RowsL2Norm, a)
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGrad, a)
    }

    /// Rebinds named leaves and recomputes every node in topological order.
    /// Same bindings and parameters produce bit-identical values.
    pub fn forward_eval(&mut self, bindings: &[(&str, Tensor)]) -> Result<()> {
        for (name, tensor) in bindings {
            let id = *self.names.get(*name).ok_or_else(|| {
                Error::InvalidArgument(format!("forward_eval: unknown name {name}"))
            })?;
            if self.nodes[id.0].value.shape() != tensor.shape() {
                return Err(Error::shape(
                    format!("forward_eval binding {name}"),
                    format!(
                        "declared {:?}, bound {:?}",
                        self.nodes[id.0].value.shape(),
                        tensor.shape()
                    ),
                ));
            }
            self.nodes[id.0].value = tensor.clone();
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].parents.is_empty() {
                continue;
            }
            let parents: Vec<&Tensor> = self.nodes[i]
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let value = eval_op(&self.nodes[i].op, &parents)?;
            if self.checked && !value.is_finite() {
                return Err(Error::non_finite(format!(
                    "node #{i} ({})",
                    self.nodes[i].op.kind()
                )));
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Gradient of a scalar output with respect to every named leaf.
    /// Leaves the output does not reach get zero tensors.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output node must be scalar, got shape {:?}",
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_parts(
            self.value(output).shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.parents.is_empty() || !node.requires_grad {
                grads[i] = Some(grad);
                continue;
            }
            let parent_vals: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let contributions = backward_op(&node.op, &node.value, &parent_vals, &grad)?;
            for (parent, contribution) in node.parents.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    slot @ None => *slot = Some(contribution),
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                }
            }
        }
        let mut map = BTreeMap::new();
        for (name, id) in &self.names {
            let g = match grads[id.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.value(*id).shape()),
            };
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }
}

fn grad_flows(op: &Op) -> bool {
    !matches!(op, Op::StopGrad)
}

/// Broadcast layout for elementwise binary ops: identical shapes, a scalar
/// against anything, or rank-2 against rank-2 with 1-sized axes.
struct Bcast {
    rows: usize,
    cols: usize,
    a_row_stride: usize,
    a_col_stride: usize,
    b_row_stride: usize,
    b_col_stride: usize,
    out_shape: Vec<usize>,
}

fn bcast(a: &[usize], b: &[usize], op: &'static str) -> Result<Bcast> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let as2 = |s: &[usize]| -> Option<(usize, usize)> {
        match s.len() {
            0 => Some((1, 1)),
            1 => {
                if s[0] == 1 {
                    Some((1, 1))
                } else {
                    None
                }
            }
            2 => Some((s[0], s[1])),
            _ => None,
        }
    };
    if a == b {
        let n = numel(a);
        return Ok(Bcast {
            rows: 1,
            cols: n,
            a_row_stride: 0,
            a_col_stride: 1,
            b_row_stride: 0,
            b_col_stride: 1,
            out_shape: a.to_vec(),
        });
    }
    if numel(a) == 1 || numel(b) == 1 {
        // when both are single-element, keep the higher-rank shape
        let (scalar_is_a, big) = if numel(a) == 1 && numel(b) == 1 {
            if a.len() >= b.len() {
                (false, a)
            } else {
                (true, b)
            }
        } else if numel(a) == 1 {
            (true, b)
        } else {
            (false, a)
        };
        let n = numel(big);
        return Ok(Bcast {
            rows: 1,
            cols: n,
            a_row_stride: 0,
            a_col_stride: if scalar_is_a { 0 } else { 1 },
            b_row_stride: 0,
            b_col_stride: if scalar_is_a { 1 } else { 0 },
            out_shape: big.to_vec(),
        });
    }
    let (Some((ar, ac)), Some((br, bc))) = (as2(a), as2(b)) else {
        return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
    };
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if !ok(ar, br) || !ok(ac, bc) {
        return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
    }
    let rows = ar.max(br);
    let cols = ac.max(bc);
    Ok(Bcast {
        rows,
        cols,
        a_row_stride: if ar == 1 { 0 } else { ac },
        a_col_stride: if ac == 1 { 0 } else { 1 },
        b_row_stride: if br == 1 { 0 } else { bc },
        b_col_stride: if bc == 1 { 0 } else { 1 },
        out_shape: vec![rows, cols],
    })
}

fn bcast_apply(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let l = bcast(a.shape(), b.shape(), op)?;
    let mut out = vec![0.0; l.rows * l.cols];
    let ad = a.data();
    let bd = b.data();
    for r in 0..l.rows {
        let ar = r * l.a_row_stride;
        let br = r * l.b_row_stride;
        let out_row = &mut out[r * l.cols..(r + 1) * l.cols];
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = f(ad[ar + c * l.a_col_stride], bd[br + c * l.b_col_stride]);
        }
    }
    Ok(Tensor::from_parts(l.out_shape, out))
}

/// Collapses a broadcast gradient back onto an operand's shape.
fn bcast_reduce(grad: &Tensor, operand_shape: &[usize]) -> Tensor {
    if grad.shape() == operand_shape {
        return grad.clone();
    }
    let n_op: usize = operand_shape.iter().product();
    if n_op == 1 {
        let s: f64 = grad.data().iter().sum();
        return Tensor::from_parts(operand_shape.to_vec(), vec![s]);
    }
    // rank-2 broadcast: sum over whichever axes were expanded
    let (gr, gc) = (grad.shape()[0], grad.shape()[1]);
    let (or_, oc) = (operand_shape[0], operand_shape[1]);
    let mut out = vec![0.0; n_op];
    for r in 0..gr {
        let tr = if or_ == 1 { 0 } else { r };
        for c in 0..gc {
            let tc = if oc == 1 { 0 } else { c };
            out[tr * oc + tc] += grad.at2(r, c);
        }
    }
    Tensor::from_parts(operand_shape.to_vec(), out)
}

fn unary_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected rank-2, got {other:?}"))),
    }
}

fn eval_op(op: &Op, p: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const => unreachable!("leaves are never re-evaluated"),
        Op::Add => bcast_apply(p[0], p[1], "add", |a, b| a + b),
        Op::Sub => bcast_apply(p[0], p[1], "sub", |a, b| a - b),
        Op::Mul => bcast_apply(p[0], p[1], "mul", |a, b| a * b),
        Op::Neg => Ok(unary_map(p[0], |x| -x)),
        Op::Scale(c) => Ok(unary_map(p[0], |x| c * x)),
        Op::AddScalar(c) => Ok(unary_map(p[0], |x| x + c)),
        Op::Matmul => {
            let (m, k) = rank2(p[0], "matmul")?;
            let (k2, n) = rank2(p[1], "matmul")?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dims differ: {:?} x {:?}", p[0].shape(), p[1].shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul(p[0].data(), p[1].data(), m, k, n, &mut out);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Transpose => {
            let (r, c) = rank2(p[0], "transpose")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = p[0].at2(i, j);
                }
            }
            Ok(Tensor::from_parts(vec![c, r], out))
        }
        Op::Conv2d { stride } => {
            let d = conv_dims(p[0], p[1], p[2], *stride)?;
            let mut out = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
            kernels::conv2d(p[0].data(), p[1].data(), p[2].data(), &d, &mut out);
            Ok(Tensor::from_parts(
                vec![d.batch, d.out_ch, d.out_h, d.out_w],
                out,
            ))
        }
        Op::Relu => Ok(unary_map(p[0], |x| if x > 0.0 { x } else { 0.0 })),
        Op::Tanh => Ok(unary_map(p[0], f64::tanh)),
        Op::Exp => Ok(unary_map(p[0], f64::exp)),
        Op::Ln => Ok(unary_map(p[0], f64::ln)),
        Op::Square => Ok(unary_map(p[0], |x| x * x)),
        Op::SumAll => Ok(Tensor::from_parts(vec![], vec![p[0].data().iter().sum()])),
        Op::MeanAll => {
            let n = p[0].numel().max(1) as f64;
            Ok(Tensor::from_parts(
                vec![],
                vec![p[0].data().iter().sum::<f64>() / n],
            ))
        }
        Op::SumAxis(axis) => {
            let (r, c) = rank2(p[0], "sum_axis")?;
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, &x) in out.iter_mut().zip(p[0].row(i)) {
                            *o += x;
                        }
                    }
                    Ok(Tensor::from_parts(vec![c], out))
                }
                1 => {
                    let out = (0..r).map(|i| p[0].row(i).iter().sum()).collect();
                    Ok(Tensor::from_parts(vec![r], out))
                }
                _ => Err(Error::InvalidArgument("sum_axis: axis must be 0 or 1".into())),
            }
        }
        Op::LogSumExpRows => {
            let (r, _) = rank2(p[0], "logsumexp_rows")?;
            let out = (0..r)
                .map(|i| {
                    let row = p[0].row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Ok(Tensor::from_parts(vec![r], out))
        }
        Op::DiagPart => {
            let (r, c) = rank2(p[0], "diag_part")?;
            if r != c {
                return Err(Error::shape("diag_part", format!("matrix not square: {r}x{c}")));
            }
            Ok(Tensor::from_parts(
                vec![r],
                (0..r).map(|i| p[0].at2(i, i)).collect(),
            ))
        }
        Op::GatherRows(idx) => {
            let (r, c) = rank2(p[0], "gather_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {bad} out of range for {r} rows"
                )));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(p[0].row(i));
            }
            Ok(Tensor::from_parts(vec![idx.len(), c], out))
        }
        Op::ConcatCols => {
            let (ra, ca) = rank2(p[0], "concat_cols")?;
            let (rb, cb) = rank2(p[1], "concat_cols")?;
            if ra != rb {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {ra} vs {rb}"),
                ));
            }
            let mut out = Vec::with_capacity(ra * (ca + cb));
            for i in 0..ra {
                out.extend_from_slice(p[0].row(i));
                out.extend_from_slice(p[1].row(i));
            }
            Ok(Tensor::from_parts(vec![ra, ca + cb], out))
        }
        Op::SliceCols(from, to) => {
            let (r, c) = rank2(p[0], "slice_cols")?;
            if *from > *to || *to > c {
                return Err(Error::shape(
                    "slice_cols",
                    format!("range {from}..{to} out of {c} columns"),
                ));
            }
            let mut out = Vec::with_capacity(r * (to - from));
            for i in 0..r {
                out.extend_from_slice(&p[0].row(i)[*from..*to]);
            }
            Ok(Tensor::from_parts(vec![r, to - from], out))
        }
        Op::Reshape(shape) => {
            if shape.iter().product::<usize>() != p[0].numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {:?} changes element count", p[0].shape(), shape),
                ));
            }
            Ok(Tensor::from_parts(shape.clone(), p[0].data().to_vec()))
        }
        Op::RowsL2Norm => {
            let (r, _) = rank2(p[0], "rows_l2norm")?;
            let out = (0..r)
                .map(|i| p[0].row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Ok(Tensor::from_parts(vec![r], out))
        }
        Op::StopGrad => Ok(p[0].clone()),
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || b.shape().len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("want x[N,C,H,W] w[F,C,k,k] b[F]; got {:?} {:?} {:?}", xs, ws, b.shape()),
        ));
    }
    if ws[1] != xs[1] || ws[2] != ws[3] || b.shape()[0] != ws[0] {
        return Err(Error::shape(
            "conv2d",
            format!("inconsistent channels/kernel: x {:?} w {:?} b {:?}", xs, ws, b.shape()),
        ));
    }
    ConvDims::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("kernel {} too large for input {}x{}", ws[2], xs[2], xs[3]),
        )
    })
}

/// Per-parent gradient contributions for one node.
fn backward_op(
    op: &Op,
    value: &Tensor,
    p: &[&Tensor],
    grad: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let g = grad;
    Ok(match op {
        Op::Input(_) | Op::Param(_) | Op::Const => unreachable!("leaves have no parents"),
        Op::Add => vec![
            Some(bcast_reduce(g, p[0].shape())),
            Some(bcast_reduce(g, p[1].shape())),
        ],
        Op::Sub => {
            let db = bcast_reduce(g, p[1].shape());
            vec![
                Some(bcast_reduce(g, p[0].shape())),
                Some(unary_map(&db, |x| -x)),
            ]
        }
        Op::Mul => {
            let ga = bcast_apply(g, p[1], "mul_back", |gv, bv| gv * bv)?;
            let gb = bcast_apply(g, p[0], "mul_back", |gv, av| gv * av)?;
            vec![
                Some(bcast_reduce(&ga, p[0].shape())),
                Some(bcast_reduce(&gb, p[1].shape())),
            ]
        }
        Op::Neg => vec![Some(unary_map(g, |x| -x))],
        Op::Scale(c) => {
            let c = *c;
            vec![Some(unary_map(g, |x| c * x))]
        }
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Matmul => {
            let (m, k) = rank2(p[0], "matmul")?;
            let n = p[1].shape()[1];
            let mut da = vec![0.0; m * k];
            kernels::matmul_bt(g.data(), p[1].data(), m, n, k, &mut da);
            let mut db = vec![0.0; k * n];
            kernels::matmul_at(p[0].data(), g.data(), m, k, n, &mut db);
            vec![
                Some(Tensor::from_parts(vec![m, k], da)),
                Some(Tensor::from_parts(vec![k, n], db)),
            ]
        }
        Op::Transpose => {
            let (r, c) = rank2(g, "transpose_back")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = g.at2(i, j);
                }
            }
            vec![Some(Tensor::from_parts(vec![c, r], out))]
        }
        Op::Conv2d { stride } => {
            let d = conv_dims(p[0], p[1], p[2], *stride)?;
            let mut gx = vec![0.0; p[0].numel()];
            kernels::conv2d_grad_x(g.data(), p[1].data(), &d, &mut gx);
            let mut gw = vec![0.0; p[1].numel()];
            let mut gb = vec![0.0; p[2].numel()];
            kernels::conv2d_grad_w(p[0].data(), g.data(), &d, &mut gw, &mut gb);
            vec![
                Some(Tensor::from_parts(p[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(p[1].shape().to_vec(), gw)),
                Some(Tensor::from_parts(p[2].shape().to_vec(), gb)),
            ]
        }
        Op::Relu => {
            let out = g
                .data()
                .iter()
                .zip(p[0].data())
                .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), out))]
        }
        Op::Tanh => {
            let out = g
                .data()
                .iter()
                .zip(value.data())
                .map(|(&gv, &y)| gv * (1.0 - y * y))
                .collect();
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), out))]
        }
        Op::Exp => {
            let out = g
                .data()
                .iter()
                .zip(value.data())
                .map(|(&gv, &y)| gv * y)
                .collect();
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), out))]
        }
        Op::Ln => {
            let out = g
                .data()
                .iter()
                .zip(p[0].data())
                .map(|(&gv, &x)| gv / x)
                .collect();
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), out))]
        }
        Op::Square => {
            let out = g
                .data()
                .iter()
                .zip(p[0].data())
                .map(|(&gv, &x)| 2.0 * gv * x)
                .collect();
            vec![Some(Tensor::from_parts(p[0].shape().to_vec(), out))]
        }
        Op::SumAll => {
            let gv = g.data()[0];
            vec![Some(Tensor::from_parts(
                p[0].shape().to_vec(),
                vec![gv; p[0].numel()],
            ))]
        }
        Op::MeanAll => {
            let gv = g.data()[0] / p[0].numel().max(1) as f64;
            vec![Some(Tensor::from_parts(
                p[0].shape().to_vec(),
                vec![gv; p[0].numel()],
            ))]
        }
        Op::SumAxis(axis) => {
            let (r, c) = rank2(p[0], "sum_axis_back")?;
            let mut out = vec![0.0; r * c];
            match axis {
                0 => {
                    for i in 0..r {
                        out[i * c..(i + 1) * c].copy_from_slice(g.data());
                    }
                }
                _ => {
                    for i in 0..r {
                        out[i * c..(i + 1) * c].fill(g.data()[i]);
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::LogSumExpRows => {
            let (r, c) = rank2(p[0], "logsumexp_back")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let gi = g.data()[i];
                let lse = value.data()[i];
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(p[0].row(i)) {
                    *o = gi * (x - lse).exp();
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::DiagPart => {
            let (r, c) = rank2(p[0], "diag_back")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + i] = g.data()[i];
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::GatherRows(idx) => {
            let (r, c) = rank2(p[0], "gather_back")?;
            let mut out = vec![0.0; r * c];
            for (gi, &i) in idx.iter().enumerate() {
                for (o, &gv) in out[i * c..(i + 1) * c].iter_mut().zip(g.row(gi)) {
                    *o += gv;
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::ConcatCols => {
            let (r, ca) = rank2(p[0], "concat_back")?;
            let cb = p[1].shape()[1];
            let mut da = vec![0.0; r * ca];
            let mut db = vec![0.0; r * cb];
            for i in 0..r {
                let grow = g.row(i);
                da[i * ca..(i + 1) * ca].copy_from_slice(&grow[..ca]);
                db[i * cb..(i + 1) * cb].copy_from_slice(&grow[ca..]);
            }
            vec![
                Some(Tensor::from_parts(vec![r, ca], da)),
                Some(Tensor::from_parts(vec![r, cb], db)),
            ]
        }
        Op::SliceCols(from, _) => {
            let (r, c) = rank2(p[0], "slice_back")?;
            let width = g.shape()[1];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + from..i * c + from + width].copy_from_slice(g.row(i));
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::Reshape(_) => vec![Some(Tensor::from_parts(
            p[0].shape().to_vec(),
            g.data().to_vec(),
        ))],
        Op::RowsL2Norm => {
            let (r, c) = rank2(p[0], "rows_l2norm_back")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let n = value.data()[i].max(1e-12);
                let gi = g.data()[i];
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(p[0].row(i)) {
                    *o = gi * x / n;
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], out))]
        }
        Op::StopGrad => vec![None],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_product() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let y = g.input("y", Tensor::scalar(4.0)).unwrap();
        let xy = g.mul(x, y).unwrap();
        assert_eq!(g.value(xy).item().unwrap(), 12.0);
    }

    #[test]
    fn forward_relu_negative() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(-2.0)).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).item().unwrap(), 0.0);
    }

    #[test]
    fn forward_dense_layer_hand_product() {
        // W = [[1,2],[3,4]], b = 0, x = (1,1): Wx = (3,7)
        let mut g = Graph::new();
        let w = g
            .param("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let x = g.input("x", Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let y = g.matmul(w, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let y = g.input("y", Tensor::scalar(4.0)).unwrap();
        let xy = g.mul(x, y).unwrap();
        let grads = g.backward(xy).unwrap();
        assert_eq!(grads.get("x").unwrap().item().unwrap(), 4.0);
        assert_eq!(grads.get("y").unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(0.0)).unwrap();
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let _unused = g.param("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_eval_rebinds_and_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let y = g.input("y", Tensor::scalar(4.0)).unwrap();
        let xy = g.mul(x, y).unwrap();
        g.forward_eval(&[("x", Tensor::scalar(5.0))]).unwrap();
        assert_eq!(g.value(xy).item().unwrap(), 20.0);
        let first = g.value(xy).clone();
        g.forward_eval(&[]).unwrap();
        assert_eq!(g.value(xy), &first); // bit-identical replay

        let bad = g.forward_eval(&[("x", Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(matches!(bad, Err(Error::Shape { .. })));
        assert!(matches!(
            g.forward_eval(&[("nope", Tensor::scalar(1.0))]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = g.input("b", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "error should name the op: {msg}");
    }

    #[test]
    fn checked_mode_rejects_non_finite_results() {
        let mut g = Graph::new().checked(true);
        let x = g.input("x", Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(3.0)).unwrap();
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(x, s).unwrap(); // d/dx (x * const(x)) = const(x)
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn broadcast_outer_sum() {
        let mut g = Graph::new();
        let a = g
            .input("a", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = g
            .input("b", Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap())
            .unwrap();
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 21.0, 12.0, 22.0]);
        let total = g.sum_all(s).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn logsumexp_rows_matches_direct() {
        let mut g = Graph::new();
        let a = g
            .input("a", Tensor::from_rows(&[vec![0.0, f64::ln(0.5)]]).unwrap())
            .unwrap();
        let l = g.logsumexp_rows(a).unwrap();
        let got = g.value(l).data()[0];
        assert!((got - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_repeats_and_accumulates() {
        let mut g = Graph::new();
        let a = g
            .input("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let picked = g.gather_rows(a, vec![0, 0, 1]).unwrap();
        assert_eq!(g.value(picked).shape(), &[3, 2]);
        let s = g.sum_all(picked).unwrap();
        let grads = g.backward(s).unwrap();
        // row 0 selected twice, row 1 once
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
