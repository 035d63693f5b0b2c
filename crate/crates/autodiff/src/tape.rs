//! Operation recording and reverse-mode replay.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Nodes are
//! stored in creation order, which is already a topological order, so the
//! backward pass is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::{check_finite, numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Relu,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    Log,
    Exp,
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    Variance { axis: usize },
    Sqrt,
    Abs,
    Scale { factor: f64 },
    Shift { offset: f64 },
    Clamp { lo: f64, hi: f64 },
}

/// Coarse operation tag, used for diagnostics and backward fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Concat,
    Slice,
    Reshape,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Exp,
    Mean,
    Sum,
    Variance,
    Sqrt,
    Abs,
    Scale,
    Shift,
    Clamp,
    StraightThrough,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which operand (if any) is repeated over the leading axes of the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    RhsRepeat,
    LhsRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        bcast: Bcast,
    },
    MatMul {
        lhs: Var,
        rhs: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Shift {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Reduce {
        input: Var,
        axis: Option<usize>,
        mean: bool,
    },
    Variance {
        input: Var,
        axis: usize,
    },
    StraightThrough {
        soft: Var,
    },
    Custom {
        input: Var,
        derivative: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpTag::Add,
                Binary::Sub => OpTag::Sub,
                Binary::Mul => OpTag::Mul,
            },
            Op::MatMul { .. } => OpTag::MatMul,
            Op::Concat { .. } => OpTag::Concat,
            Op::Slice { .. } => OpTag::Slice,
            Op::Reshape { .. } => OpTag::Reshape,
            Op::Unary { kind, .. } => match kind {
                Unary::Relu => OpTag::Relu,
                Unary::Tanh => OpTag::Tanh,
                Unary::Sigmoid => OpTag::Sigmoid,
                Unary::Log => OpTag::Log,
                Unary::Exp => OpTag::Exp,
                Unary::Sqrt => OpTag::Sqrt,
                Unary::Abs => OpTag::Abs,
            },
            Op::Scale { .. } => OpTag::Scale,
            Op::Shift { .. } => OpTag::Shift,
            Op::Clamp { .. } => OpTag::Clamp,
            Op::Softmax { .. } => OpTag::Softmax,
            Op::Reduce { mean: true, .. } => OpTag::Mean,
            Op::Reduce { mean: false, .. } => OpTag::Sum,
            Op::Variance { .. } => OpTag::Variance,
            Op::StraightThrough { .. } => OpTag::StraightThrough,
            Op::Custom { .. } => OpTag::Custom,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    leaf_grad: Option<Vec<f64>>,
}

/// Records operations for one forward pass. Not shared across threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<(OpTag, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.index].value.len();
    grads[v.index].get_or_insert_with(|| vec![0.0; len])
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices are sized for the given dimensions and strides by
    // every caller, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes that participate in the backward pass.
    pub fn grad_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Scales every backward contribution of `tag` by `factor`.
    ///
    /// Exists so verification tooling can prove that a broken backward rule
    /// is caught by the finite-difference check.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, tag: OpTag, factor: f64) {
        self.fault = Some((tag, factor));
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(AutodiffError::ForeignVar)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            leaf_grad: None,
        });
        Var { tape: self.id, index }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(shape, value, op, requires_grad))
    }

    /// Records a leaf holding a copy of `tensor`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            true,
        )
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.into_values(), Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Var> {
        self.constant(Vec::new(), vec![value])
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    /// Value of a single-element variable.
    pub fn item(&self, v: Var) -> Result<f64> {
        let node = self.node(v)?;
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let node = self.node(v)?;
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(self.node(v)?.leaf_grad.as_deref())
    }

    /// Adds the leaf gradient held by the tape into `tensor`'s grad slot.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v)? {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    /// Generic entry point dispatching on `kind`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |name: &'static str| -> Result<Var> {
            if inputs.len() != 1 {
                return Err(AutodiffError::Arity {
                    op: name,
                    expected: 1,
                    found: inputs.len(),
                });
            }
            Ok(inputs[0])
        };
        let binary = |name: &'static str| -> Result<(Var, Var)> {
            if inputs.len() != 2 {
                return Err(AutodiffError::Arity {
                    op: name,
                    expected: 2,
                    found: inputs.len(),
                });
            }
            Ok((inputs[0], inputs[1]))
        };
        match kind {
            OpKind::Add => {
                let (a, b) = binary("add")?;
                self.add(a, b)
            }
            OpKind::Sub => {
                let (a, b) = binary("sub")?;
                self.sub(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary("mul")?;
                self.mul(a, b)
            }
            OpKind::MatMul => {
                let (a, b) = binary("matmul")?;
                self.matmul(a, b)
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => {
                let x = unary("slice")?;
                self.slice(x, *axis, *start, *len)
            }
            OpKind::Reshape { shape } => {
                let x = unary("reshape")?;
                self.reshape(x, shape.clone())
            }
            OpKind::Relu => self.relu(unary("relu")?),
            OpKind::Tanh => self.tanh(unary("tanh")?),
            OpKind::Sigmoid => self.sigmoid(unary("sigmoid")?),
            OpKind::Softmax { axis } => self.softmax(unary("softmax")?, *axis),
            OpKind::Log => self.log(unary("log")?),
            OpKind::Exp => self.exp(unary("exp")?),
            OpKind::Mean { axis } => {
                let x = unary("mean")?;
                match axis {
                    Some(a) => self.mean_axis(x, *a),
                    None => self.mean(x),
                }
            }
            OpKind::Sum { axis } => {
                let x = unary("sum")?;
                match axis {
                    Some(a) => self.sum_axis(x, *a),
                    None => self.sum(x),
                }
            }
            OpKind::Variance { axis } => self.variance_axis(unary("variance")?, *axis),
            OpKind::Sqrt => self.sqrt(unary("sqrt")?),
            OpKind::Abs => self.abs(unary("abs")?),
            OpKind::Scale { factor } => self.scale(unary("scale")?, *factor),
            OpKind::Shift { offset } => self.shift(unary("shift")?, *offset),
            OpKind::Clamp { lo, hi } => self.clamp(unary("clamp")?, *lo, *hi),
        }
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let bcast = if na.shape == nb.shape {
            Bcast::Same
        } else if nb.value.len() == 1 || is_suffix(&nb.shape, &na.shape) {
            Bcast::RhsRepeat
        } else if na.value.len() == 1 || is_suffix(&na.shape, &nb.shape) {
            Bcast::LhsRepeat
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, value) = match bcast {
            Bcast::Same => (
                na.shape.clone(),
                na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::RhsRepeat => {
                let m = nb.value.len();
                (
                    na.shape.clone(),
                    na.value
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, nb.value[i % m]))
                        .collect(),
                )
            }
            Bcast::LhsRepeat => {
                let m = na.value.len();
                (
                    nb.shape.clone(),
                    nb.value
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(na.value[i % m], y))
                        .collect(),
                )
            }
        };
        let rg = na.requires_grad || nb.requires_grad;
        self.push_checked(
            name,
            shape,
            value,
            Op::Binary {
                kind,
                lhs: a,
                rhs: b,
                bcast,
            },
            rg,
        )
    }

    /// Elementwise sum; the smaller operand may be a scalar or a trailing-shape block.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading axes of the left operand are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        };
        if na.shape.is_empty() || nb.shape.len() != 2 {
            return Err(mismatch());
        }
        let k = *na.shape.last().unwrap();
        if nb.shape[0] != k {
            return Err(mismatch());
        }
        let n = nb.shape[1];
        let m = na.value.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        if k > 0 {
            gemm(
                m,
                k,
                n,
                &na.value,
                (k as isize, 1),
                &nb.value,
                (n as isize, 1),
                &mut out,
                0.0,
            );
        }
        let mut shape = na.shape[..na.shape.len() - 1].to_vec();
        shape.push(n);
        let rg = na.requires_grad || nb.requires_grad;
        self.push_checked(
            "matmul",
            shape,
            out,
            Op::MatMul {
                lhs: a,
                rhs: b,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            found: 0,
        })?;
        let base = self.node(*first)?.shape.clone();
        if axis >= base.len() {
            return Err(AutodiffError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        let mut rg = false;
        for &v in inputs {
            let nd = self.node(v)?;
            let compatible = nd.shape.len() == base.len()
                && nd
                    .shape
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: nd.shape.clone(),
                });
            }
            total += nd.shape[axis];
            rg |= nd.requires_grad;
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let nd = &self.nodes[v.index];
                let block = nd.shape[axis] * inner;
                out.extend_from_slice(&nd.value[o * block..(o + 1) * block]);
            }
        }
        self.push_checked(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let nx = self.node(x)?;
        if axis >= nx.shape.len() {
            return Err(AutodiffError::Axis {
                op: "slice",
                axis,
                rank: nx.shape.len(),
            });
        }
        if start + len > nx.shape[axis] {
            return Err(AutodiffError::InvalidShape {
                op: "slice",
                shape: nx.shape.clone(),
                reason: format!("range {start}..{} exceeds axis {axis}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&nx.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&nx.value[from..from + len * inner]);
        }
        let mut shape = nx.shape.clone();
        shape[axis] = len;
        let rg = nx.requires_grad;
        Ok(self.push(shape, out, Op::Slice { input: x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let nx = self.node(x)?;
        if numel(&shape) != nx.value.len() {
            return Err(AutodiffError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("input has {} values", nx.value.len()),
            });
        }
        let (value, rg) = (nx.value.clone(), nx.requires_grad);
        Ok(self.push(shape, value, Op::Reshape { input: x }, rg))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let nx = self.node(x)?;
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
        };
        match kind {
            Unary::Log => {
                if let Some(&bad) = nx.value.iter().find(|&&v| v <= 0.0) {
                    return Err(AutodiffError::Domain { op: name, value: bad });
                }
            }
            Unary::Sqrt => {
                if let Some(&bad) = nx.value.iter().find(|&&v| v < 0.0) {
                    return Err(AutodiffError::Domain { op: name, value: bad });
                }
            }
            _ => {}
        }
        let value: Vec<f64> = nx
            .value
            .iter()
            .map(|&v| match kind {
                Unary::Relu => v.max(0.0),
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Log => v.ln(),
                Unary::Exp => v.exp(),
                Unary::Sqrt => v.sqrt(),
                Unary::Abs => v.abs(),
            })
            .collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push_checked(name, shape, value, Op::Unary { input: x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let nx = self.node(x)?;
        let value = nx.value.iter().map(|v| v * factor).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push_checked("scale", shape, value, Op::Scale { input: x, factor }, rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Result<Var> {
        let nx = self.node(x)?;
        let value = nx.value.iter().map(|v| v + offset).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push_checked("shift", shape, value, Op::Shift { input: x }, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::Domain { op: "clamp", value: lo });
        }
        let nx = self.node(x)?;
        let value = nx.value.iter().map(|v| v.clamp(lo, hi)).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        Ok(self.push(shape, value, Op::Clamp { input: x, lo, hi }, rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<&Node> {
        let nx = self.node(x)?;
        if axis >= nx.shape.len() {
            return Err(AutodiffError::Axis {
                op,
                axis,
                rank: nx.shape.len(),
            });
        }
        Ok(nx)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.check_axis("softmax", x, axis)?;
        let (outer, n, inner) = split_axis(&nx.shape, axis);
        let mut out = vec![0.0; nx.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| nx.value[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (nx.value[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push_checked("softmax", shape, out, Op::Softmax { input: x, axis }, rg)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let (shape, out, rg) = match axis {
            None => {
                let nx = self.node(x)?;
                let n = nx.value.len();
                if mean && n == 0 {
                    return Err(AutodiffError::InvalidShape {
                        op: name,
                        shape: nx.shape.clone(),
                        reason: "empty input".into(),
                    });
                }
                let s: f64 = nx.value.iter().sum();
                let v = if mean { s / n as f64 } else { s };
                (Vec::new(), vec![v], nx.requires_grad)
            }
            Some(axis) => {
                let nx = self.check_axis(name, x, axis)?;
                let (outer, n, inner) = split_axis(&nx.shape, axis);
                if mean && n == 0 {
                    return Err(AutodiffError::InvalidShape {
                        op: name,
                        shape: nx.shape.clone(),
                        reason: "empty axis".into(),
                    });
                }
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &nx.value[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = nx.shape.clone();
                shape.remove(axis);
                (shape, out, nx.requires_grad)
            }
        };
        self.push_checked(name, shape, out, Op::Reduce { input: x, axis, mean }, rg)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    /// Population variance along `axis`.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = self.check_axis("variance", x, axis)?;
        let (outer, n, inner) = split_axis(&nx.shape, axis);
        if n == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "variance",
                shape: nx.shape.clone(),
                reason: "empty axis".into(),
            });
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| nx.value[idx(j)]).sum::<f64>() / n as f64;
                let ss: f64 = (0..n).map(|j| (nx.value[idx(j)] - mean).powi(2)).sum();
                out[o * inner + i] = ss / n as f64;
            }
        }
        let mut shape = nx.shape.clone();
        shape.remove(axis);
        let rg = nx.requires_grad;
        self.push_checked("variance", shape, out, Op::Variance { input: x, axis }, rg)
    }

    /// Forward value is `hard`; the backward pass routes gradients to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        let ns = self.node(soft)?;
        if hard.len() != ns.value.len() {
            return Err(AutodiffError::ValueCount {
                shape: ns.shape.clone(),
                expected: ns.value.len(),
                found: hard.len(),
            });
        }
        let (shape, rg) = (ns.shape.clone(), ns.requires_grad);
        self.push_checked("straight_through", shape, hard, Op::StraightThrough { soft }, rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_derivative(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let nx = self.node(x)?;
        let value: Vec<f64> = nx.value.iter().map(|&v| f(v)).collect();
        let derivative: Vec<f64> = nx.value.iter().map(|&v| df(v)).collect();
        check_finite("custom", &derivative)?;
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push_checked(
            "custom",
            shape,
            value,
            Op::Custom {
                input: x,
                derivative,
            },
            rg,
        )
    }

    /// Propagates d(root)/d(leaf) into every leaf that requires a gradient.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let nr = self.node(root)?;
        if nr.value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(nr.shape.clone()));
        }
        if !nr.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();

        for i in (0..=root.index).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some((tag, factor)) = self.fault {
                if node.op.tag() == tag {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backward_node(i, node, &g, &mut grads, &mut leaf_updates);
        }

        for (index, g) in leaf_updates {
            let slot = self.nodes[index]
                .leaf_grad
                .get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(&g) {
                *s += v;
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        index: usize,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        leaf_updates: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.index].requires_grad;

        match &node.op {
            Op::Leaf => {
                leaf_updates.push((index, g.to_vec()));
            }
            Op::Binary {
                kind,
                lhs,
                rhs,
                bcast,
            } => {
                let (a, b) = (&nodes[lhs.index].value, &nodes[rhs.index].value);
                let (la, lb) = (a.len(), b.len());
                // Index into each operand for output position `i`.
                let ia = |i: usize| if *bcast == Bcast::LhsRepeat { i % la } else { i };
                let ib = |i: usize| if *bcast == Bcast::RhsRepeat { i % lb } else { i };
                if wants(*lhs) {
                    let ga = grad_slot(grads, nodes, *lhs);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * b[ib(i)],
                        };
                    }
                }
                if wants(*rhs) {
                    let gb = grad_slot(grads, nodes, *rhs);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * a[ia(i)],
                        };
                    }
                }
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if k == 0 {
                    return;
                }
                if wants(*lhs) {
                    let b = &nodes[rhs.index].value;
                    let ga = grad_slot(grads, nodes, *lhs);
                    // dA = dC * B^T, B^T viewed through swapped strides.
                    gemm(m, n, k, g, (n as isize, 1), b, (1, n as isize), ga, 1.0);
                }
                if wants(*rhs) {
                    let a = &nodes[lhs.index].value;
                    let gb = grad_slot(grads, nodes, *rhs);
                    // dB = A^T * dC
                    gemm(k, m, n, a, (1, k as isize), g, (n as isize, 1), gb, 1.0);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let width = nodes[v.index].shape[*axis];
                    if wants(v) {
                        let gv = grad_slot(grads, nodes, v);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            for (d, s) in gv[dst..dst + width * inner]
                                .iter_mut()
                                .zip(&g[src..src + width * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = &nodes[input.index].shape;
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let gx = grad_slot(grads, nodes, *input);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for (d, s) in gx[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                    {
                        *d += s;
                    }
                }
            }
            Op::Reshape { input } => {
                let gx = grad_slot(grads, nodes, *input);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Unary { input, kind } => {
                let x = &nodes[input.index].value;
                let y = &node.value;
                let gx = grad_slot(grads, nodes, *input);
                for i in 0..g.len() {
                    let local = match kind {
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Log => 1.0 / x[i],
                        Unary::Exp => y[i],
                        Unary::Sqrt => {
                            if y[i] > 0.0 {
                                0.5 / y[i]
                            } else {
                                0.0
                            }
                        }
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * local;
                }
            }
            Op::Scale { input, factor } => {
                let gx = grad_slot(grads, nodes, *input);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s * factor;
                }
            }
            Op::Shift { input } => {
                let gx = grad_slot(grads, nodes, *input);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Clamp { input, lo, hi } => {
                let x = &nodes[input.index].value;
                let gx = grad_slot(grads, nodes, *input);
                for i in 0..g.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let gx = grad_slot(grads, nodes, *input);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::Reduce { input, axis, mean } => {
                let in_shape = nodes[input.index].shape.clone();
                let gx = grad_slot(grads, nodes, *input);
                match axis {
                    None => {
                        let scale = if *mean { 1.0 / gx.len() as f64 } else { 1.0 };
                        gx.iter_mut().for_each(|d| *d += g[0] * scale);
                    }
                    Some(axis) => {
                        let (outer, n, inner) = split_axis(&in_shape, *axis);
                        let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for j in 0..n {
                                let dst = (o * n + j) * inner;
                                for i in 0..inner {
                                    gx[dst + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Variance { input, axis } => {
                let x = &nodes[input.index].value;
                let (outer, n, inner) = split_axis(&nodes[input.index].shape, *axis);
                let gx = grad_slot(grads, nodes, *input);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mean = (0..n).map(|j| x[idx(j)]).sum::<f64>() / n as f64;
                        let go = g[o * inner + i];
                        for j in 0..n {
                            gx[idx(j)] += go * 2.0 * (x[idx(j)] - mean) / n as f64;
                        }
                    }
                }
            }
            Op::StraightThrough { soft } => {
                let gx = grad_slot(grads, nodes, *soft);
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Custom { input, derivative } => {
                let gx = grad_slot(grads, nodes, *input);
                for i in 0..g.len() {
                    gx[i] += g[i] * derivative[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(tape: &mut Tape, shape: &[usize], values: &[f64], rg: bool) -> Var {
        let t = Tensor::new(shape.to_vec(), values.to_vec())
            .unwrap()
            .with_requires_grad(rg);
        tape.leaf(&t)
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0], false);
        let b = leaf(&mut tape, &[2], &[3.0, 4.0], false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], &[0.0, 0.0, 0.0], false);
        let s = tape.softmax(a, 0).unwrap();
        for v in tape.value(s).unwrap() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[], &[3.0], true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Some(&[6.0][..]));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[], &[3.0], true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Some(&[12.0][..]));
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), None);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0], false);
        let b = leaf(&mut tape, &[2], &[3.0, 4.0], false);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.grad_nodes(), 0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), None);
        assert_eq!(tape.grad(b).unwrap(), None);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_roots() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0], true);
        assert!(matches!(
            tape.backward(a),
            Err(AutodiffError::NonScalarRoot(_))
        ));
        let mut other = Tape::new();
        let b = leaf(&mut other, &[], &[1.0], true);
        assert_eq!(tape.backward(b), Err(AutodiffError::ForeignVar));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6], false);
        let b = leaf(&mut tape, &[2, 2], &[0.0; 4], false);
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn log_and_sqrt_reject_negative_input() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, -2.0], false);
        assert!(matches!(tape.log(a), Err(AutodiffError::Domain { op: "log", .. })));
        assert!(matches!(tape.sqrt(a), Err(AutodiffError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn leading_axis_broadcast() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0], true);
        let b = leaf(&mut tape, &[2], &[10.0, 20.0], true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), Some(&[2.0, 2.0][..]));
        // Trailing-axis broadcasting beyond the suffix rule is rejected.
        let d = leaf(&mut tape, &[2, 1], &[1.0, 2.0], false);
        assert!(tape.add(a, d).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let b = leaf(&mut tape, &[2, 1], &[5.0, 6.0], false);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s).unwrap(), &[5.0, 6.0]);
    }

    #[test]
    fn straight_through_forwards_hard_values() {
        let mut tape = Tape::new();
        let soft = leaf(&mut tape, &[3], &[0.2, 0.5, 0.3], true);
        let w = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0], false);
        let hard = tape.straight_through(soft, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tape.value(hard).unwrap(), &[0.0, 1.0, 0.0]);
        let y = tape.mul(hard, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(soft).unwrap(), Some(&[1.0, 2.0, 3.0][..]));
    }

    #[test]
    fn sigmoid_is_stable_when_saturated() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[-800.0, 800.0], false);
        let s = tape.sigmoid(a).unwrap();
        assert_eq!(tape.value(s).unwrap(), &[0.0, 1.0]);
    }
}
