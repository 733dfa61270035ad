use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operators. Every variant except the leaves has an adjoint rule
/// in the reverse pass.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Input(String),
    Param(String),
    Const(Tensor<S>),
    Add,
    Sub,
    Mul,
    Scale(S),
    AddScalar(S),
    MatMul,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    /// `[B, Ci, L] * [Co, Ci, K]`, stride 1, symmetric zero padding.
    Conv1d {
        pad: usize,
    },
    /// `[N, Ci, H, W] * [Co, Ci, Kh, Kw]`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    MaxPool1d {
        size: usize,
    },
    MaxPool2d {
        size: usize,
    },
    /// Normalizes over every axis except axis 1.
    BatchNorm {
        eps: S,
        running_mean: String,
        running_var: String,
    },
    Relu,
    Tanh,
    Exp,
    Log,
    Neg,
    Softmax {
        axis: usize,
    },
    Sum {
        axis: Option<usize>,
        keepdim: bool,
    },
    Mean {
        axis: Option<usize>,
        keepdim: bool,
    },
    L2Normalize {
        axis: usize,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    GradReverse {
        lambda: S,
    },
}

impl<S> Op<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GradReverse { .. } => "grad_reverse",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<S> {
    pub op: Op<S>,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
}

/// A static computation graph. Nodes are appended in topological order, so
/// every node's inputs precede it. Output shapes are inferred at build time.
#[derive(Clone, Debug, Default)]
pub struct Graph<S = f64> {
    nodes: Vec<Node<S>>,
    leaves: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
}

impl<S: Scalar> fmt::Display for Graph<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<usize> = n.inputs.iter().map(|x| x.0).collect();
            writeln!(
                f,
                "%{i} = {} {:?} -> {:?}  ({})",
                n.op.kind(),
                ins,
                n.shape,
                n.label
            )?;
        }
        Ok(())
    }
}

fn reduced_shape(shape: &[usize], axis: Option<usize>, keepdim: bool) -> Vec<usize> {
    match axis {
        None if keepdim => vec![1; shape.len()],
        None => Vec::new(),
        Some(a) if keepdim => {
            let mut s = shape.to_vec();
            s[a] = 1;
            s
        }
        Some(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all parameter leaves, in insertion order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    /// Attach a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = label.into();
        id
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label,
        });
        id
    }

    fn err(&self, kind: &str, detail: String) -> Error {
        Error::shape(format!("{}#{}", kind, self.nodes.len()), detail)
    }

    fn leaf_node(&mut self, op: Op<S>, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            let existing = &self.nodes[id.0];
            if existing.shape != shape || existing.op.kind() != op.kind() {
                return Err(Error::shape(
                    name,
                    format!(
                        "leaf redeclared as {} {:?} (was {} {:?})",
                        op.kind(),
                        shape,
                        existing.op.kind(),
                        existing.shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(op, vec![], shape.to_vec());
        self.nodes[id.0].label = name.to_string();
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf_node(Op::Input(name.to_string()), name, shape)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf_node(Op::Param(name.to_string()), name, shape)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), vec![], shape)
    }

    fn binary(&mut self, op: Op<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            self.err(
                op.kind(),
                format!("cannot broadcast {:?} with {:?}", sa, sb),
            )
        })?;
        Ok(self.push(op, vec![a, b], out))
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

    fn unary(&mut self, op: Op<S>, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], shape)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        self.unary(Op::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: S) -> NodeId {
        self.unary(Op::AddScalar(c), x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Neg, x)
    }

    pub fn grad_reverse(&mut self, x: NodeId, lambda: S) -> Result<NodeId> {
        if !(lambda >= S::zero()) {
            return Err(Error::invalid("gradient reversal lambda must be >= 0"));
        }
        Ok(self.unary(Op::GradReverse { lambda }, x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err("matmul", format!("cannot multiply {:?} by {:?}", sa, sb)));
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]]))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(self.err("permute", format!("bad permutation {:?} for {:?}", perm, s)));
        }
        let out = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute(perm.to_vec()), vec![x], out))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(self.err("permute", "transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        if numel(s) != numel(shape) {
            return Err(self.err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", s, shape),
            ));
        }
        Ok(self.push(Op::Reshape(shape.to_vec()), vec![x], shape.to_vec()))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sx[2] + 2 * pad < sw[2] {
            return Err(self.err(
                "conv1d",
                format!("input {:?} vs kernel {:?} (pad {pad})", sx, sw),
            ));
        }
        let lout = sx[2] + 2 * pad - sw[2] + 1;
        Ok(self.push(Op::Conv1d { pad }, vec![x, w], vec![sx[0], sw[0], lout]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4
            || sw.len() != 4
            || sx[1] != sw[1]
            || stride == 0
            || sx[2] + 2 * pad < sw[2]
            || sx[3] + 2 * pad < sw[3]
        {
            return Err(self.err(
                "conv2d",
                format!(
                    "input {:?} vs kernel {:?} (stride {stride}, pad {pad})",
                    sx, sw
                ),
            ));
        }
        let ho = (sx[2] + 2 * pad - sw[2]) / stride + 1;
        let wo = (sx[3] + 2 * pad - sw[3]) / stride + 1;
        Ok(self.push(
            Op::Conv2d { stride, pad },
            vec![x, w],
            vec![sx[0], sw[0], ho, wo],
        ))
    }

    pub fn max_pool1d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || s[2] < size {
            return Err(self.err("max_pool1d", format!("cannot pool {:?} by {size}", s)));
        }
        Ok(self.push(
            Op::MaxPool1d { size },
            vec![x],
            vec![s[0], s[1], s[2] / size],
        ))
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(self.err("max_pool2d", format!("cannot pool {:?} by {size}", s)));
        }
        Ok(self.push(
            Op::MaxPool2d { size },
            vec![x],
            vec![s[0], s[1], s[2] / size, s[3] / size],
        ))
    }

    /// Batch normalization over all axes but axis 1; `gamma`/`beta` have
    /// shape `[C]`. Running statistics are looked up by key in evaluation mode.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
        running_mean: &str,
        running_var: &str,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(self.err(
                "batch_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    s,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(self.push(
            Op::BatchNorm {
                eps,
                running_mean: running_mean.to_string(),
                running_var: running_var.to_string(),
            },
            vec![x, gamma, beta],
            s,
        ))
    }

    fn check_axis(&self, kind: &str, x: NodeId, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(self.err(
                kind,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", x, axis)?;
        Ok(self.unary(Op::Softmax { axis }, x))
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>, keepdim: bool) -> Result<NodeId> {
        if let Some(a) = axis {
            self.check_axis("sum", x, a)?;
        }
        let out = reduced_shape(self.shape(x), axis, keepdim);
        Ok(self.push(Op::Sum { axis, keepdim }, vec![x], out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.sum(x, None, false)
            .expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>, keepdim: bool) -> Result<NodeId> {
        if let Some(a) = axis {
            self.check_axis("mean", x, a)?;
        }
        let out = reduced_shape(self.shape(x), axis, keepdim);
        Ok(self.push(Op::Mean { axis, keepdim }, vec![x], out))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.mean(x, None, false)
            .expect("full reduction is always valid")
    }

    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("l2_normalize", x, axis)?;
        Ok(self.unary(Op::L2Normalize { axis }, x))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .map(|&x| self.shape(x).to_vec())
            .ok_or_else(|| self.err("concat", "no inputs".into()))?;
        if axis >= first.len() {
            return Err(self.err(
                "concat",
                format!("axis {axis} out of range for {:?}", first),
            ));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.err("concat", format!("{:?} incompatible with {:?}", s, first)));
            }
            out[axis] += s[axis];
        }
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), out))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_axis("slice", x, axis)?;
        let mut s = self.shape(x).to_vec();
        if start >= end || end > s[axis] {
            return Err(self.err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", s),
            ));
        }
        s[axis] = end - start;
        Ok(self.push(Op::Slice { axis, start, end }, vec![x], s))
    }

    /// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}
