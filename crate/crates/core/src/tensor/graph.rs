//! The reverse-mode tape: operation records in insertion order, replayed in
//! exact reverse order by [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::{softmax_tau_unchecked, Tensor};

/// Arguments below this threshold are clamped inside `log_clamped`, keeping
/// entropy and GAN log terms finite on one-hot and saturated inputs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogClamped(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    /// Add a length-`c` vector to every row of an `r x c` matrix.
    AddRowVec(NodeId, NodeId),
    /// Multiply row `i` of an `r x c` matrix by entry `i` of a length-`r` vector.
    ScaleRows(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MaxAll(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MaxAxis(NodeId, usize),
    SoftmaxTau(NodeId, f64),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape over dense fp64 buffers.
///
/// Nodes are appended in topological order (inputs always precede their
/// consumers); `backward` walks them in exact reverse insertion order and
/// accumulates into gradient buffers, so repeated backward calls sum until
/// [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Monotone tape position: the number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        let grad = needs_grad.then(|| vec![0.0; values.len()]);
        self.nodes.push(Node { shape, values, grad, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Records a trainable leaf whose gradient can be read back after
    /// `backward`. Values are copied in; the caller harvests grads via
    /// [`Graph::grad`].
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.node(id).values
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = self.node(id);
        if n.values.len() != 1 {
            return Err(Error::Shape(format!("expected scalar node, shape {:?}", n.shape)));
        }
        Ok(n.values[0])
    }

    /// Clones a node's value out of the tape as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::from_vec(n.shape.clone(), n.values.clone()).expect("node buffers are consistent")
    }

    /// Zeroes every gradient buffer on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn finish(&mut self, shape: Vec<usize>, values: Vec<f64>, needs: bool, op: Op, what: &str) -> Result<NodeId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(self.push(shape, values, needs, op))
    }

    fn rank2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = &self.node(id).shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} expects a rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2(a, "matmul lhs")?;
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims differ: {k} vs {k2}")));
        }
        let out = matmul_nn(&self.node(a).values, m, k, &self.node(b).values, n);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(vec![m, n], out, needs, Op::Matmul(a, b), "matmul")
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let (la, lb) = (self.node(a).values.len(), self.node(b).values.len());
        if sa == sb {
            Ok(sa.clone())
        } else if la == 1 {
            Ok(sb.clone())
        } else if lb == 1 {
            Ok(sa.clone())
        } else {
            Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} are not equal and neither is scalar")))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b, what)?;
        let numel: usize = shape.iter().product();
        let (va, vb) = (&self.node(a).values, &self.node(b).values);
        let out: Vec<f64> = (0..numel)
            .map(|i| f(va[if va.len() == 1 { 0 } else { i }], vb[if vb.len() == 1 { 0 } else { i }]))
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(shape, out, needs, op, what)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(b).values.contains(&0.0) {
            return Err(Error::Value("division by zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, what: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out: Vec<f64> = self.node(a).values.iter().map(|&v| f(v)).collect();
        let (shape, needs) = (self.node(a).shape.clone(), self.node(a).needs_grad);
        self.finish(shape, out, needs, op, what)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    /// Natural log; errors on non-positive input. See [`Graph::log_clamped`]
    /// for the guarded variant used inside entropy and GAN terms.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.node(a).values.iter().any(|&v| v <= 0.0) {
            return Err(Error::Value("log of non-positive value".into()));
        }
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    /// `ln(max(x, 1e-12))`; gradient is `1/x` above the clamp and 0 below it.
    pub fn log_clamped(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "log_clamped", |v| v.max(LOG_CLAMP).ln(), Op::LogClamped(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "relu", |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "square", |v| v * v, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "abs", f64::abs, Op::Abs(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "neg", |v| -v, Op::Neg(a))
    }

    /// Multiply every entry by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale constant".into()));
        }
        self.unary(a, "scale", |v| v * c, Op::Scale(a, c))
    }

    /// Adds a length-`c` bias vector to every row of an `r x c` matrix.
    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2(m, "add_row_vec matrix")?;
        let sv = &self.node(v).shape;
        if sv.as_slice() != [c] {
            return Err(Error::Shape(format!("add_row_vec: vector {sv:?} does not match {c} columns")));
        }
        let (mv, vv) = (&self.node(m).values, &self.node(v).values);
        let out: Vec<f64> = (0..r * c).map(|i| mv[i] + vv[i % c]).collect();
        let needs = self.node(m).needs_grad || self.node(v).needs_grad;
        self.finish(vec![r, c], out, needs, Op::AddRowVec(m, v), "add_row_vec")
    }

    /// Multiplies row `i` of an `r x c` matrix by entry `i` of a length-`r` vector.
    pub fn scale_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.rank2(m, "scale_rows matrix")?;
        let sv = &self.node(v).shape;
        if sv.as_slice() != [r] {
            return Err(Error::Shape(format!("scale_rows: vector {sv:?} does not match {r} rows")));
        }
        let (mv, vv) = (&self.node(m).values, &self.node(v).values);
        let out: Vec<f64> = (0..r * c).map(|i| mv[i] * vv[i / c]).collect();
        let needs = self.node(m).needs_grad || self.node(v).needs_grad;
        self.finish(vec![r, c], out, needs, Op::ScaleRows(m, v), "scale_rows")
    }

    fn nonempty(&self, a: NodeId, what: &str) -> Result<()> {
        if self.node(a).values.is_empty() {
            return Err(Error::Value(format!("{what} of empty tensor")));
        }
        Ok(())
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.nonempty(a, "sum")?;
        let s: f64 = self.node(a).values.iter().sum();
        let needs = self.node(a).needs_grad;
        self.finish(vec![1], vec![s], needs, Op::SumAll(a), "sum")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.nonempty(a, "mean")?;
        let n = self.node(a).values.len() as f64;
        let s: f64 = self.node(a).values.iter().sum::<f64>() / n;
        let needs = self.node(a).needs_grad;
        self.finish(vec![1], vec![s], needs, Op::MeanAll(a), "mean")
    }

    /// Full max reduction; ties route the gradient to the lowest index.
    pub fn max_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.nonempty(a, "max")?;
        let m = self.node(a).values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let needs = self.node(a).needs_grad;
        self.finish(vec![1], vec![m], needs, Op::MaxAll(a), "max")
    }

    fn axis_reduce(
        &mut self,
        a: NodeId,
        axis: usize,
        what: &str,
        kind: fn(NodeId, usize) -> Op,
        fold: impl Fn(&[f64]) -> f64,
    ) -> Result<NodeId> {
        self.nonempty(a, what)?;
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("{what}: axis {axis} out of range for {shape:?}")));
        }
        if shape.len() == 1 {
            // reducing the only axis collapses to a scalar
            return match what {
                "sum_axis" => self.sum_all(a),
                "mean_axis" => self.mean_all(a),
                _ => self.max_all(a),
            };
        }
        let (r, c) = (shape[0], shape[1]);
        let vals = &self.node(a).values;
        let out: Vec<f64> = if axis == 0 {
            (0..c)
                .map(|j| {
                    let col: Vec<f64> = (0..r).map(|i| vals[i * c + j]).collect();
                    fold(&col)
                })
                .collect()
        } else {
            (0..r).map(|i| fold(&vals[i * c..(i + 1) * c])).collect()
        };
        let out_shape = if axis == 0 { vec![c] } else { vec![r] };
        let needs = self.node(a).needs_grad;
        self.finish(out_shape, out, needs, kind(a, axis), what)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(a, axis, "sum_axis", Op::SumAxis, |xs| xs.iter().sum())
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(a, axis, "mean_axis", Op::MeanAxis, |xs| {
            xs.iter().sum::<f64>() / xs.len() as f64
        })
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.axis_reduce(a, axis, "max_axis", Op::MaxAxis, |xs| {
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Row-wise temperature softmax over the last axis, with max-subtraction.
    pub fn softmax_tau(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Value(format!("temperature must be positive, got {tau}")));
        }
        let shape = self.node(a).shape.clone();
        if shape.len() > 2 {
            return Err(Error::Shape(format!("softmax expects rank 1 or 2, got {shape:?}")));
        }
        let vals = &self.node(a).values;
        let cols = *shape.last().expect("nonempty shape");
        let mut out = Vec::with_capacity(vals.len());
        for row in vals.chunks(cols) {
            out.extend(softmax_tau_unchecked(row, tau));
        }
        let needs = self.node(a).needs_grad;
        self.finish(shape, out, needs, Op::SoftmaxTau(a, tau), "softmax")
    }

    /// Reverse pass from a scalar loss. Each call propagates a fresh seed of
    /// 1.0 through a scratch buffer, then adds the result into the persistent
    /// per-node gradients, so repeated calls accumulate until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ln = self.node(loss);
        if ln.values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        if !ln.needs_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.needs_grad.then(|| vec![0.0; n.values.len()]))
            .collect();
        scratch[loss.0].as_mut().expect("loss needs grad")[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if g.iter().any(|&v| v != 0.0) {
                self.propagate(i, &self.nodes[i].op.clone(), &g, &mut scratch);
            }
            scratch[i] = Some(g);
        }
        for (n, s) in self.nodes.iter_mut().zip(scratch) {
            if let (Some(grad), Some(s)) = (n.grad.as_mut(), s) {
                for (gi, si) in grad.iter_mut().zip(s) {
                    *gi += si;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, scratch: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if let Some(g) = scratch[id.0].as_mut() {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
    }

    /// Accumulates into the scalar-or-full-shape side of a broadcast binary op.
    fn accumulate_broadcast(&self, scratch: &mut [Option<Vec<f64>>], id: NodeId, full: &[f64]) {
        let len = self.node(id).values.len();
        if len == full.len() {
            self.accumulate(scratch, id, full.to_vec());
        } else {
            debug_assert_eq!(len, 1);
            self.accumulate(scratch, id, vec![full.iter().sum()]);
        }
    }

    fn propagate(&self, out_idx: usize, op: &Op, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                let n = self.node(b).shape[1];
                if self.node(a).needs_grad {
                    let da = matmul_nt(g, m, n, &self.node(b).values, k);
                    self.accumulate(scratch, a, da);
                }
                if self.node(b).needs_grad {
                    let db = matmul_tn(&self.node(a).values, m, k, g, n);
                    self.accumulate(scratch, b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(scratch, a, g);
                self.accumulate_broadcast(scratch, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(scratch, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate_broadcast(scratch, b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * vb[if vb.len() == 1 { 0 } else { i }])
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * va[if va.len() == 1 { 0 } else { i }])
                    .collect();
                self.accumulate_broadcast(scratch, a, &da);
                self.accumulate_broadcast(scratch, b, &db);
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi / vb[if vb.len() == 1 { 0 } else { i }])
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let x = va[if va.len() == 1 { 0 } else { i }];
                        let y = vb[if vb.len() == 1 { 0 } else { i }];
                        -gi * x / (y * y)
                    })
                    .collect();
                self.accumulate_broadcast(scratch, a, &da);
                self.accumulate_broadcast(scratch, b, &db);
            }
            Op::Exp(a) => {
                let out = &self.nodes[out_idx].values;
                let da: Vec<f64> = g.iter().zip(out).map(|(gi, o)| gi * o).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Log(a) => {
                let va = &self.nodes[a.0].values;
                let da: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi / x).collect();
                self.accumulate(scratch, a, da);
            }
            Op::LogClamped(a) => {
                let va = &self.nodes[a.0].values;
                let da: Vec<f64> = g
                    .iter()
                    .zip(va)
                    .map(|(gi, &x)| if x > LOG_CLAMP { gi / x } else { 0.0 })
                    .collect();
                self.accumulate(scratch, a, da);
            }
            Op::Relu(a) => {
                let va = &self.nodes[a.0].values;
                let da: Vec<f64> = g.iter().zip(va).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Tanh(a) => {
                let out = &self.nodes[out_idx].values;
                let da: Vec<f64> = g.iter().zip(out).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[out_idx].values;
                let da: Vec<f64> = g.iter().zip(out).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Square(a) => {
                let va = &self.nodes[a.0].values;
                let da: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * 2.0 * x).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].values;
                let da: Vec<f64> = g
                    .iter()
                    .zip(va)
                    .map(|(gi, &x)| if x == 0.0 { 0.0 } else { gi * x.signum() })
                    .collect();
                self.accumulate(scratch, a, da);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(scratch, a, da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(scratch, a, da);
            }
            Op::AddRowVec(m, v) => {
                let c = self.node(v).values.len();
                self.accumulate(scratch, m, g.to_vec());
                let mut dv = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    dv[i % c] += gi;
                }
                self.accumulate(scratch, v, dv);
            }
            Op::ScaleRows(m, v) => {
                let (r, c) = (self.node(m).shape[0], self.node(m).shape[1]);
                let (mv, vv) = (&self.nodes[m.0].values, &self.nodes[v.0].values);
                let dm: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * vv[i / c]).collect();
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dv[i] += g[i * c + j] * mv[i * c + j];
                    }
                }
                self.accumulate(scratch, m, dm);
                self.accumulate(scratch, v, dv);
            }
            Op::SumAll(a) => {
                let n = self.node(a).values.len();
                self.accumulate(scratch, a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.node(a).values.len();
                self.accumulate(scratch, a, vec![g[0] / n as f64; n]);
            }
            Op::MaxAll(a) => {
                let va = &self.nodes[a.0].values;
                let argmax = argmax_first(va);
                let mut da = vec![0.0; va.len()];
                da[argmax] = g[0];
                self.accumulate(scratch, a, da);
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                let da: Vec<f64> = (0..r * c)
                    .map(|i| if axis == 0 { g[i % c] } else { g[i / c] })
                    .collect();
                self.accumulate(scratch, a, da);
            }
            Op::MeanAxis(a, axis) => {
                let (r, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                let denom = if axis == 0 { r as f64 } else { c as f64 };
                let da: Vec<f64> = (0..r * c)
                    .map(|i| if axis == 0 { g[i % c] } else { g[i / c] } / denom)
                    .collect();
                self.accumulate(scratch, a, da);
            }
            Op::MaxAxis(a, axis) => {
                let (r, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                let va = &self.nodes[a.0].values;
                let mut da = vec![0.0; r * c];
                if axis == 0 {
                    for j in 0..c {
                        let col: Vec<f64> = (0..r).map(|i| va[i * c + j]).collect();
                        da[argmax_first(&col) * c + j] = g[j];
                    }
                } else {
                    for i in 0..r {
                        let row = &va[i * c..(i + 1) * c];
                        da[i * c + argmax_first(row)] = g[i];
                    }
                }
                self.accumulate(scratch, a, da);
            }
            Op::SoftmaxTau(a, tau) => {
                let out = &self.nodes[out_idx].values;
                let cols = *self.node(a).shape.last().expect("nonempty shape");
                let mut da = vec![0.0; out.len()];
                for (row, (q, gr)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = q.iter().zip(gr).map(|(qi, gi)| qi * gi).sum();
                    for j in 0..cols {
                        da[row * cols + j] = q[j] * (gr[j] - dot) / tau;
                    }
                }
                self.accumulate(scratch, a, da);
            }
        }
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// `g (m x n) * b^T` where `b` is `k x n`; yields `m x k`.
fn matmul_nt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..n {
                acc += g[i * n + l] * b[j * n + l];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `a^T (k x m view of m x k) * g (m x n)`; yields `k x n`.
fn matmul_tn(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        for i in 0..k {
            let av = a[l * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * g[l * n + j];
            }
        }
    }
    out
}
