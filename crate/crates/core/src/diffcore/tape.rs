//! Reverse-mode differentiation over a tape of array operations.
//!
//! Values are computed eagerly as nodes are pushed. `backward` walks the
//! tape in reverse and emits the adjoint computation as ordinary tape nodes,
//! so a second `backward` call differentiates through the first one. That is
//! the mechanism behind metagradients: the inner gradient, the optimizer
//! update and the outer objective all live on one tape, and a final reverse
//! sweep yields d(outer)/d(metaparameters).
//!
//! The primitive set is closed under its own derivatives: affine maps,
//! elementwise nonlinearities, reductions, broadcasts, slicing and
//! stop-gradient. Everything is f64.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

use crate::error::DiffError;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    StopGrad(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    BroadcastScalar(NodeId, Vec<usize>),
    /// `[k] -> [rows, k]`, repeating the vector on every row.
    BroadcastRows(NodeId, usize),
    /// `[m] -> [m, cols]`, repeating the vector across columns.
    BroadcastCols(NodeId, usize),
    /// Contiguous slice along axis 0.
    SliceRows(NodeId, usize, usize),
    /// Inverse of `SliceRows`: embed into a zero array of `total` rows.
    PadRows(NodeId, usize, usize),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::StopGrad(_) => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::PadRows(..) => "pad_rows",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> impl Iterator<Item = NodeId> {
        let (a, b) = match *self {
            Op::Leaf { .. } => (None, None),
            Op::StopGrad(a)
            | Op::Neg(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::BroadcastScalar(a, _)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::SliceRows(a, _, _)
            | Op::PadRows(a, _, _)
            | Op::Reshape(a, _) => (Some(a), None),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => (Some(a), Some(b)),
        };
        a.into_iter().chain(b)
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Computation tape. Nodes are topologically ordered by construction.
pub struct Tape {
    nodes: Vec<Node>,
    poison: Option<(NodeId, &'static str)>,
}

fn scalar_arr(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

// Value computations shared by the op constructors and the replay
// interpreter, so both paths produce bit-identical results.

fn ew_binary(va: &ArrayD<f64>, vb: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    if va.shape() == vb.shape() {
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        out
    } else if va.ndim() == 0 {
        let s = va.iter().next().copied().unwrap();
        vb.mapv(|y| f(s, y))
    } else {
        let s = vb.iter().next().copied().unwrap();
        va.mapv(|x| f(x, s))
    }
}

fn matmul_value(va: &ArrayD<f64>, vb: &ArrayD<f64>) -> ArrayD<f64> {
    let a = va.view().into_dimensionality::<Ix2>().expect("matmul lhs");
    let b = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs");
    a.dot(&b).into_dyn()
}

fn transpose_value(va: &ArrayD<f64>) -> ArrayD<f64> {
    va.view()
        .into_dimensionality::<Ix2>()
        .expect("transpose needs 2-d")
        .t()
        .to_owned()
        .into_dyn()
}

fn broadcast_rows_value(va: &ArrayD<f64>, rows: usize) -> ArrayD<f64> {
    let v = va.view().into_dimensionality::<Ix1>().expect("1-d");
    v.broadcast((rows, v.len()))
        .expect("broadcast_rows")
        .to_owned()
        .into_dyn()
}

fn broadcast_cols_value(va: &ArrayD<f64>, cols: usize) -> ArrayD<f64> {
    let v = va.view().into_dimensionality::<Ix1>().expect("1-d");
    let m = v.len();
    let mut out = ArrayD::zeros(IxDyn(&[m, cols]));
    for (i, mut row) in out
        .view_mut()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .rows_mut()
        .into_iter()
        .enumerate()
    {
        row.fill(v[i]);
    }
    out
}

fn slice_rows_value(va: &ArrayD<f64>, start: usize, len: usize) -> ArrayD<f64> {
    va.slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
        .to_owned()
}

fn pad_rows_value(va: &ArrayD<f64>, total: usize, start: usize) -> ArrayD<f64> {
    let mut shape = va.shape().to_vec();
    let len = shape[0];
    shape[0] = total;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
        .assign(va);
    out
}

fn reshape_value(va: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let data: Vec<f64> = va.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            poison: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert!(v.len() == 1, "scalar_value on non-scalar node");
        v.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// First numeric failure recorded on the tape, if any.
    pub fn check(&self) -> Result<(), DiffError> {
        match self.poison {
            Some((_, op)) => Err(DiffError::NumericFailure { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    fn push_checked(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        if self.poison.is_none() && !value.iter().all(|v| v.is_finite()) {
            let name = op.name();
            let id = self.nodes.len();
            self.poison = Some((id, name));
        }
        self.push(value, op)
    }

    // ----- leaves and constants -------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar_arr(v))
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(scalar_arr(v))
    }

    pub fn vector(&mut self, v: &[f64]) -> NodeId {
        self.constant(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::StopGrad(a))
    }

    // ----- elementwise binary ---------------------------------------------

    fn binary_shapes(&self, a: NodeId, b: NodeId, ctx: &'static str) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sa.is_empty() || sb.is_empty() {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                context: ctx,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn ew(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
        ew_binary(&self.nodes[a].value, &self.nodes[b].value, f)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "add").expect("add shape mismatch");
        let v = self.ew(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "sub").expect("sub shape mismatch");
        let v = self.ew(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "mul").expect("mul shape mismatch");
        let v = self.ew(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "div").expect("div shape mismatch");
        let v = self.ew(a, b, |x, y| x / y);
        self.push_checked(v, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "minimum").expect("minimum shape mismatch");
        let v = self.ew(a, b, f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes(a, b, "maximum").expect("maximum shape mismatch");
        let v = self.ew(a, b, f64::max);
        self.push(v, Op::Maximum(a, b))
    }

    // ----- elementwise unary ----------------------------------------------

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(crate::diffcore::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push_checked(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        self.push_checked(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push_checked(v, Op::Sqrt(a))
    }

    // ----- linear algebra and structure -----------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a)[1],
            self.shape(b)[0],
            "matmul inner dimensions"
        );
        let v = matmul_value(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = transpose_value(&self.nodes[a].value);
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = scalar_arr(self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    /// Sum a 2-d node along `axis`, dropping that axis.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "sum_axis needs 2-d");
        let v = self.nodes[a].value.sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let s = self.scalar_value(a);
        let v = ArrayD::from_elem(IxDyn(shape), s);
        self.push(v, Op::BroadcastScalar(a, shape.to_vec()))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let v = broadcast_rows_value(&self.nodes[a].value, rows);
        self.push(v, Op::BroadcastRows(a, rows))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let v = broadcast_cols_value(&self.nodes[a].value, cols);
        self.push(v, Op::BroadcastCols(a, cols))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(
            start + len <= va.shape()[0],
            "slice_rows out of bounds: {}+{} > {}",
            start,
            len,
            va.shape()[0]
        );
        let v = slice_rows_value(va, start, len);
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn pad_rows(&mut self, a: NodeId, total: usize, start: usize) -> NodeId {
        let v = pad_rows_value(&self.nodes[a].value, total, start);
        self.push(v, Op::PadRows(a, total, start))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = &self.nodes[a].value;
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let v = reshape_value(va, shape);
        self.push(v, Op::Reshape(a, shape.to_vec()))
    }

    // ----- derived helpers --------------------------------------------------

    /// Row-wise log-softmax of a 2-d logits node, numerically stabilized by
    /// subtracting the row max as a constant (exact: the max shift cancels in
    /// both value and derivative).
    pub fn log_softmax(&mut self, logits: NodeId) -> NodeId {
        let cols = self.shape(logits)[1];
        let maxes: Vec<f64> = {
            let v = self.nodes[logits]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            v.rows()
                .into_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        let max_c = self.vector(&maxes);
        let max_b = self.broadcast_cols(max_c, cols);
        let shifted = self.sub(logits, max_b);
        let e = self.exp(shifted);
        let z = self.sum_axis(e, 1);
        let logz = self.log(z);
        let logz_b = self.broadcast_cols(logz, cols);
        self.sub(shifted, logz_b)
    }

    /// Re-evaluates the forward computation up to `output` with some leaf
    /// values replaced. With `freeze_stop_grads`, stop-gradient nodes keep
    /// their originally recorded values instead of tracking their inputs;
    /// the replayed scalar is then exactly the function whose derivative
    /// `backward` computes, which makes this the finite-difference
    /// counterpart of the reverse sweep.
    pub fn eval_with_overrides(
        &self,
        output: NodeId,
        overrides: &[(NodeId, ArrayD<f64>)],
        freeze_stop_grads: bool,
    ) -> Result<f64, DiffError> {
        let mut vals: Vec<Option<ArrayD<f64>>> = vec![None; output + 1];
        for (id, v) in overrides {
            if *id <= output {
                assert_eq!(
                    self.shape(*id),
                    v.shape(),
                    "override shape must match the node"
                );
                vals[*id] = Some(v.clone());
            }
        }
        macro_rules! get {
            ($i:expr) => {
                vals[$i].as_ref().unwrap()
            };
        }
        for i in 0..=output {
            if vals[i].is_some() {
                continue;
            }
            let v = match &self.nodes[i].op {
                Op::Leaf { .. } => self.nodes[i].value.clone(),
                Op::StopGrad(a) => {
                    if freeze_stop_grads {
                        self.nodes[i].value.clone()
                    } else {
                        get!(*a).clone()
                    }
                }
                Op::Add(a, b) => ew_binary(get!(*a), get!(*b), |x, y| x + y),
                Op::Sub(a, b) => ew_binary(get!(*a), get!(*b), |x, y| x - y),
                Op::Mul(a, b) => ew_binary(get!(*a), get!(*b), |x, y| x * y),
                Op::Div(a, b) => ew_binary(get!(*a), get!(*b), |x, y| x / y),
                Op::Minimum(a, b) => ew_binary(get!(*a), get!(*b), f64::min),
                Op::Maximum(a, b) => ew_binary(get!(*a), get!(*b), f64::max),
                Op::Neg(a) => get!(*a).mapv(|x| -x),
                Op::MatMul(a, b) => matmul_value(get!(*a), get!(*b)),
                Op::Transpose(a) => transpose_value(get!(*a)),
                Op::Relu(a) => get!(*a).mapv(|x| x.max(0.0)),
                Op::Tanh(a) => get!(*a).mapv(f64::tanh),
                Op::Sigmoid(a) => get!(*a).mapv(crate::diffcore::sigmoid),
                Op::Exp(a) => get!(*a).mapv(f64::exp),
                Op::Log(a) => get!(*a).mapv(f64::ln),
                Op::Sqrt(a) => get!(*a).mapv(f64::sqrt),
                Op::SumAll(a) => scalar_arr(get!(*a).sum()),
                Op::SumAxis(a, axis) => get!(*a).sum_axis(Axis(*axis)),
                Op::BroadcastScalar(a, shape) => {
                    let s = get!(*a).iter().next().copied().unwrap();
                    ArrayD::from_elem(IxDyn(shape), s)
                }
                Op::BroadcastRows(a, rows) => broadcast_rows_value(get!(*a), *rows),
                Op::BroadcastCols(a, cols) => broadcast_cols_value(get!(*a), *cols),
                Op::SliceRows(a, start, len) => slice_rows_value(get!(*a), *start, *len),
                Op::PadRows(a, total, start) => pad_rows_value(get!(*a), *total, *start),
                Op::Reshape(a, shape) => reshape_value(get!(*a), shape),
            };
            vals[i] = Some(v);
        }
        let out = vals[output].as_ref().unwrap();
        if out.len() != 1 {
            return Err(DiffError::Structural(
                "eval_with_overrides output must be scalar".into(),
            ));
        }
        let v = out.iter().next().copied().unwrap();
        if !v.is_finite() {
            return Err(DiffError::NumericFailure {
                op: "eval_with_overrides",
            });
        }
        Ok(v)
    }

    // ----- reverse sweep ----------------------------------------------------

    /// Accumulate `contrib` into the adjoint of `input`, reducing over the
    /// broadcast if the forward op broadcast a scalar operand.
    fn accumulate(
        &mut self,
        adjoints: &mut [Option<NodeId>],
        input: NodeId,
        contrib: NodeId,
    ) {
        let contrib = if self.shape(input).is_empty() && !self.shape(contrib).is_empty() {
            self.sum_all(contrib)
        } else {
            contrib
        };
        adjoints[input] = Some(match adjoints[input] {
            Some(acc) => self.add(acc, contrib),
            None => contrib,
        });
    }

    /// Emit adjoint nodes of a scalar `output` with respect to each node in
    /// `wrt`. Stop-gradient blocks flow; coordinates with no path get an
    /// exactly-zero adjoint. The emitted nodes are ordinary tape nodes, so
    /// the result is differentiable again.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, DiffError> {
        self.check()?;
        if !self.shape(output).is_empty() {
            return Err(DiffError::Structural(
                "backward output must be a scalar node".into(),
            ));
        }

        let n = self.nodes.len();
        // Which nodes can reach a differentiable leaf (forward pass).
        let mut towards_leaf = vec![false; n];
        for i in 0..n {
            towards_leaf[i] = match &self.nodes[i].op {
                Op::Leaf { requires_grad } => *requires_grad,
                Op::StopGrad(_) => false,
                op => op.inputs().any(|j| towards_leaf[j]),
            };
        }
        // Which nodes are reachable backwards from the output.
        let mut reachable = vec![false; n];
        reachable[output] = true;
        for i in (0..=output).rev() {
            if reachable[i] {
                for j in self.nodes[i].op.inputs().collect::<Vec<_>>() {
                    reachable[j] = true;
                }
            }
        }

        let mut adjoints: Vec<Option<NodeId>> = vec![None; n];
        adjoints[output] = Some(self.scalar(1.0));

        for i in (0..=output).rev() {
            if !reachable[i] || !towards_leaf[i] {
                continue;
            }
            let g = match adjoints[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    if towards_leaf[a] {
                        self.accumulate(&mut adjoints, a, g);
                    }
                    if towards_leaf[b] {
                        self.accumulate(&mut adjoints, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if towards_leaf[a] {
                        self.accumulate(&mut adjoints, a, g);
                    }
                    if towards_leaf[b] {
                        let ng = self.neg(g);
                        self.accumulate(&mut adjoints, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if towards_leaf[a] {
                        let c = self.mul(g, b);
                        self.accumulate(&mut adjoints, a, c);
                    }
                    if towards_leaf[b] {
                        let c = self.mul(g, a);
                        self.accumulate(&mut adjoints, b, c);
                    }
                }
                Op::Div(a, b) => {
                    if towards_leaf[a] {
                        let c = self.div(g, b);
                        self.accumulate(&mut adjoints, a, c);
                    }
                    if towards_leaf[b] {
                        let ga = self.mul(g, a);
                        let bb = self.mul(b, b);
                        let q = self.div(ga, bb);
                        let c = self.neg(q);
                        self.accumulate(&mut adjoints, b, c);
                    }
                }
                Op::Neg(a) => {
                    let c = self.neg(g);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::MatMul(a, b) => {
                    if towards_leaf[a] {
                        let bt = self.transpose(b);
                        let c = self.matmul(g, bt);
                        self.accumulate(&mut adjoints, a, c);
                    }
                    if towards_leaf[b] {
                        let at = self.transpose(a);
                        let c = self.matmul(at, g);
                        self.accumulate(&mut adjoints, b, c);
                    }
                }
                Op::Transpose(a) => {
                    let c = self.transpose(g);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let c = self.mul(g, m);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - y^2, expressed through the output node so a
                    // second backward differentiates it again.
                    let one = self.scalar(1.0);
                    let yy = self.mul(i, i);
                    let d = self.sub(one, yy);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Sigmoid(a) => {
                    let one = self.scalar(1.0);
                    let om = self.sub(one, i);
                    let d = self.mul(i, om);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Exp(a) => {
                    let c = self.mul(g, i);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Log(a) => {
                    let c = self.div(g, a);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Sqrt(a) => {
                    let half = self.scalar(0.5);
                    let hg = self.mul(g, half);
                    let c = self.div(hg, i);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let mask = mask_select(va, vb, &out_shape, |x, y| x <= y);
                    if towards_leaf[a] {
                        let m = self.constant(mask.clone());
                        let c = self.mul(g, m);
                        self.accumulate(&mut adjoints, a, c);
                    }
                    if towards_leaf[b] {
                        let inv = mask.mapv(|x| 1.0 - x);
                        let m = self.constant(inv);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adjoints, b, c);
                    }
                }
                Op::Maximum(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let mask = mask_select(va, vb, &out_shape, |x, y| x >= y);
                    if towards_leaf[a] {
                        let m = self.constant(mask.clone());
                        let c = self.mul(g, m);
                        self.accumulate(&mut adjoints, a, c);
                    }
                    if towards_leaf[b] {
                        let inv = mask.mapv(|x| 1.0 - x);
                        let m = self.constant(inv);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adjoints, b, c);
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    let c = if shape.is_empty() {
                        g
                    } else {
                        self.broadcast_scalar(g, &shape)
                    };
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::SumAxis(a, axis) => {
                    let shape = self.shape(a).to_vec();
                    let c = match axis {
                        0 => self.broadcast_rows(g, shape[0]),
                        1 => self.broadcast_cols(g, shape[1]),
                        _ => unreachable!("sum_axis is 2-d only"),
                    };
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::BroadcastScalar(a, _) => {
                    let c = self.sum_all(g);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::BroadcastRows(a, _) => {
                    let c = self.sum_axis(g, 0);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::BroadcastCols(a, _) => {
                    let c = self.sum_axis(g, 1);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::SliceRows(a, start, _len) => {
                    let total = self.shape(a)[0];
                    let c = self.pad_rows(g, total, start);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::PadRows(a, _total, start) => {
                    let len = self.shape(a)[0];
                    let c = self.slice_rows(g, start, len);
                    self.accumulate(&mut adjoints, a, c);
                }
                Op::Reshape(a, _) => {
                    let shape = self.shape(a).to_vec();
                    let c = self.reshape(g, &shape);
                    self.accumulate(&mut adjoints, a, c);
                }
            }
        }

        self.check()?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adjoints[w] {
                Some(id) => id,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(ArrayD::zeros(IxDyn(&shape)))
                }
            };
            out.push(id);
        }
        Ok(out)
    }
}

fn mask_select(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    out_shape: &[usize],
    pick_a: impl Fn(f64, f64) -> bool,
) -> ArrayD<f64> {
    let as_mask = |x: f64, y: f64| if pick_a(x, y) { 1.0 } else { 0.0 };
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = as_mask(*x, y));
        out
    } else if a.ndim() == 0 {
        let s = a.iter().next().copied().unwrap();
        b.mapv(|y| as_mask(s, y))
    } else {
        let s = b.iter().next().copied().unwrap();
        let out = a.mapv(|x| as_mask(x, s));
        debug_assert_eq!(out.shape(), out_shape);
        out
    }
}
