//! Tape-based reverse-mode gradient engine.
//!
//! A [`ComputeGraph`] records primitive operations in insertion order (which
//! is a topological order, since an op can only consume values that already
//! exist). Forward values are computed eagerly as nodes are added and every
//! result is checked for NaN/Inf; the first offending node is named in the
//! error. [`ComputeGraph::backward`] walks the tape once in reverse,
//! accumulating adjoints.
//!
//! [`evaluate_with_gradients`] is the entry point used by all training loops;
//! [`finite_difference_gradient`] is the independent oracle it is checked
//! against.

use crate::error::{EvaError, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    SoftmaxRows,
    GaussLogPdf { sigma: f64 },
    MinElem,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxRows => "softmax_rows",
            Op::GaussLogPdf { .. } => "gauss_log_pdf",
            Op::MinElem => "min_elem",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Recorded forward computation: an append-only tape of primitive ops.
#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ComputeGraph {
    pub fn new() -> Self {
        ComputeGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Registers a parameter leaf; gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push_unchecked(
            Op::Leaf,
            vec![],
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Registers a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<ValueId> {
        if numel(shape) != data.len() {
            return Err(EvaError::ShapeMismatch(format!(
                "constant shape {:?} vs data length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push_unchecked(Op::Leaf, vec![], shape.to_vec(), data, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> ValueId {
        self.push_unchecked(Op::Leaf, vec![], vec![], vec![v], false)
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        inputs: Vec<ValueId>,
        shape: Vec<usize>,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> ValueId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<ValueId>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<ValueId> {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let idx = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(EvaError::NonFinite {
                node: format!("{}#{}", op.name(), idx),
            });
        }
        Ok(self.push_unchecked(op, inputs, shape, value, needs_grad))
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(EvaError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    /// True when `b` is a `[1, n]` row applied across the rows of `a: [m, n]`.
    fn is_row_broadcast(&self, a: ValueId, b: ValueId) -> bool {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1]
    }

    /// Elementwise sum; also accepts a `[1, n]` second operand broadcast over
    /// the rows of a `[m, n]` first operand.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.is_row_broadcast(a, b) {
            let n = self.nodes[b.0].shape[1];
            let out: Vec<f64> = self.nodes[a.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| v + self.nodes[b.0].value[i % n])
                .collect();
            let shape = self.nodes[a.0].shape.clone();
            return self.push(Op::Add, vec![a, b], shape, out);
        }
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add, vec![a, b], shape, out)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sub, vec![a, b], shape, out)
    }

    /// Elementwise product; same row-broadcast rule as [`ComputeGraph::add`].
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.is_row_broadcast(a, b) {
            let n = self.nodes[b.0].shape[1];
            let out: Vec<f64> = self.nodes[a.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| v * self.nodes[b.0].value[i % n])
                .collect();
            let shape = self.nodes[a.0].shape.clone();
            return self.push(Op::Mul, vec![a, b], shape, out);
        }
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul, vec![a, b], shape, out)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::AddScalar(c), vec![a], shape, out)
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulScalar(c), vec![a], shape, out)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EvaError::ShapeMismatch(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = av[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += ail * brow[j];
                }
            }
        }
        self.push(Op::MatMul, vec![a, b], vec![m, n], out)
    }

    /// Direct-loop 2-D convolution with zero padding.
    /// `x: [c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`, `bias: [c_out]`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(EvaError::ShapeMismatch(format!(
                "conv2d: x {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kci != ci || sb[0] != co {
            return Err(EvaError::ShapeMismatch(format!(
                "conv2d channels: x {ci}, weight {kci}->{co}, bias {}",
                sb[0]
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(EvaError::InvalidArgument(
                "conv2d: kernel larger than padded input or zero stride".into(),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            let yy = (i * stride + a) as isize - pad as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for b in 0..kw {
                                let xx = (j * stride + b) as isize - pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += xv[(c * h + yy as usize) * w + xx as usize]
                                    * wv[((o * ci + c) * kh + a) * kw + b];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        self.push(
            Op::Conv2d { stride, pad },
            vec![x, weight, bias],
            vec![co, oh, ow],
            out,
        )
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Relu, vec![a], shape, out)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| sigmoid(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sigmoid, vec![a], shape, out)
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Exp, vec![a], shape, out)
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo <= hi) {
            return Err(EvaError::InvalidArgument(format!("clamp: lo {lo} > hi {hi}")));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Clamp { lo, hi }, vec![a], shape, out)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum, vec![a], vec![], vec![s])
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].value.is_empty() {
            return Err(EvaError::InvalidArgument("mean of empty tensor".into()));
        }
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum::<f64>() / n;
        self.push(Op::Mean, vec![a], vec![], vec![s])
    }

    /// Row-wise softmax of a `[r, c]` value, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(EvaError::ShapeMismatch(format!("softmax_rows: {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        self.push(Op::SoftmaxRows, vec![a], sa, out)
    }

    /// Log-density of `obs` under an isotropic Gaussian centered at `mu`
    /// with standard deviation `sigma`, summed over coordinates.
    pub fn gauss_log_pdf(&mut self, mu: ValueId, obs: ValueId, sigma: f64) -> Result<ValueId> {
        self.same_shape(mu, obs, "gauss_log_pdf")?;
        if !(sigma > 0.0) {
            return Err(EvaError::InvalidArgument(format!(
                "gauss_log_pdf: sigma {sigma} must be positive"
            )));
        }
        let var = sigma * sigma;
        let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let lp: f64 = self.nodes[mu.0]
            .value
            .iter()
            .zip(&self.nodes[obs.0].value)
            .map(|(m, x)| norm - (x - m) * (x - m) / (2.0 * var))
            .sum();
        self.push(Op::GaussLogPdf { sigma }, vec![mu, obs], vec![], vec![lp])
    }

    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "min_elem")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x.min(*y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MinElem, vec![a, b], shape, out)
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(EvaError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let out = self.nodes[a.0].value.clone();
        self.push(Op::Reshape, vec![a], shape.to_vec(), out)
    }

    /// Recomputes every node from the leaves and returns the value of `id`.
    /// Used to check that the tape reproduces recorded outputs bit-for-bit.
    pub fn replay(&self, id: ValueId) -> Result<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Add => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    if a.len() != b.len() {
                        let n = b.len();
                        a.iter().enumerate().map(|(i, x)| x + b[i % n]).collect()
                    } else {
                        a.iter().zip(b).map(|(x, y)| x + y).collect()
                    }
                }
                Op::Sub => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    a.iter().zip(b).map(|(x, y)| x - y).collect()
                }
                Op::Mul => {
                    let a = &values[node.inputs[0].0];
                    let b = &values[node.inputs[1].0];
                    if a.len() != b.len() {
                        let n = b.len();
                        a.iter().enumerate().map(|(i, x)| x * b[i % n]).collect()
                    } else {
                        a.iter().zip(b).map(|(x, y)| x * y).collect()
                    }
                }
                Op::AddScalar(c) => values[node.inputs[0].0].iter().map(|x| x + c).collect(),
                Op::MulScalar(c) => values[node.inputs[0].0].iter().map(|x| x * c).collect(),
                _ => {
                    // Structured ops recompute through a scratch graph so the
                    // arithmetic is literally the same code path.
                    let mut scratch = ComputeGraph::new();
                    let mut ids = Vec::new();
                    for inp in &node.inputs {
                        ids.push(scratch.constant(
                            &self.nodes[inp.0].shape,
                            values[inp.0].clone(),
                        )?);
                    }
                    let out = match &node.op {
                        Op::MatMul => scratch.matmul(ids[0], ids[1])?,
                        Op::Conv2d { stride, pad } => {
                            scratch.conv2d(ids[0], ids[1], ids[2], *stride, *pad)?
                        }
                        Op::Relu => scratch.relu(ids[0])?,
                        Op::Sigmoid => scratch.sigmoid(ids[0])?,
                        Op::Exp => scratch.exp(ids[0])?,
                        Op::Clamp { lo, hi } => scratch.clamp(ids[0], *lo, *hi)?,
                        Op::Sum => scratch.sum(ids[0])?,
                        Op::Mean => scratch.mean(ids[0])?,
                        Op::SoftmaxRows => scratch.softmax_rows(ids[0])?,
                        Op::GaussLogPdf { sigma } => {
                            scratch.gauss_log_pdf(ids[0], ids[1], *sigma)?
                        }
                        Op::MinElem => scratch.min_elem(ids[0], ids[1])?,
                        Op::Reshape => scratch.reshape(ids[0], &node.shape)?,
                        _ => unreachable!(),
                    };
                    scratch.value(out).to_vec()
                }
            };
            values.push(v);
        }
        Ok(values[id.0].clone())
    }

    /// Reverse pass from a scalar output. Returns one adjoint buffer per
    /// node (None for nodes the output does not depend on).
    pub fn backward(&self, out: ValueId) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(EvaError::InvalidArgument(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[out.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            let d = match &grads[idx] {
                Some(d) if self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) => {
                    d.clone()
                }
                _ => continue,
            };
            let node = &self.nodes[idx];
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: ValueId, len: usize| {
                grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                    acc(&mut grads, a, la);
                    acc(&mut grads, b, lb);
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di;
                        grads[b.0].as_mut().unwrap()[i % lb] += di;
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let len = d.len();
                    acc(&mut grads, a, len);
                    acc(&mut grads, b, len);
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di;
                        grads[b.0].as_mut().unwrap()[i] -= di;
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                    acc(&mut grads, a, la);
                    acc(&mut grads, b, lb);
                    for (i, di) in d.iter().enumerate() {
                        let av = self.nodes[a.0].value[i];
                        let bv = self.nodes[b.0].value[i % lb];
                        grads[a.0].as_mut().unwrap()[i] += di * bv;
                        grads[b.0].as_mut().unwrap()[i % lb] += di * av;
                    }
                }
                Op::AddScalar(_) => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di;
                    }
                }
                Op::MulScalar(c) => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di * c;
                    }
                }
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    acc(&mut grads, a, m * k);
                    acc(&mut grads, b, k * n);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = grads[a.0].as_mut().unwrap();
                        for i in 0..m {
                            for j in 0..n {
                                let dij = d[i * n + j];
                                if dij == 0.0 {
                                    continue;
                                }
                                for l in 0..k {
                                    ga[i * k + l] += dij * bv[l * n + j];
                                }
                            }
                        }
                    }
                    {
                        let gb = grads[b.0].as_mut().unwrap();
                        for i in 0..m {
                            for l in 0..k {
                                let ail = av[i * k + l];
                                if ail == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[l * n + j] += ail * d[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let (x, wt, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let sx = &self.nodes[x.0].shape;
                    let sw = &self.nodes[wt.0].shape;
                    let (ci, h, w) = (sx[0], sx[1], sx[2]);
                    let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    acc(&mut grads, x, ci * h * w);
                    acc(&mut grads, wt, co * ci * kh * kw);
                    acc(&mut grads, b, co);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[wt.0].value;
                    // Split-borrow the three adjoint buffers.
                    let mut gx = grads[x.0].take().unwrap();
                    let mut gw = grads[wt.0].take().unwrap();
                    let mut gb = grads[b.0].take().unwrap();
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                let dij = d[(o * oh + i) * ow + j];
                                if dij == 0.0 {
                                    continue;
                                }
                                gb[o] += dij;
                                for c in 0..ci {
                                    for a in 0..kh {
                                        let yy = (i * stride + a) as isize - *pad as isize;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        for bb in 0..kw {
                                            let xx = (j * stride + bb) as isize - *pad as isize;
                                            if xx < 0 || xx >= w as isize {
                                                continue;
                                            }
                                            let xi = (c * h + yy as usize) * w + xx as usize;
                                            let wi = ((o * ci + c) * kh + a) * kw + bb;
                                            gx[xi] += dij * wv[wi];
                                            gw[wi] += dij * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                    grads[wt.0] = Some(gw);
                    grads[b.0] = Some(gb);
                }
                Op::Relu => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        if self.nodes[a.0].value[i] > 0.0 {
                            grads[a.0].as_mut().unwrap()[i] += di;
                        }
                    }
                }
                Op::Sigmoid => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        let y = node.value[i];
                        grads[a.0].as_mut().unwrap()[i] += di * y * (1.0 - y);
                    }
                }
                Op::Exp => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di * node.value[i];
                    }
                }
                Op::Clamp { lo, hi } => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        let x = self.nodes[a.0].value[i];
                        if x > *lo && x < *hi {
                            grads[a.0].as_mut().unwrap()[i] += di;
                        }
                    }
                }
                Op::Sum => {
                    let a = node.inputs[0];
                    let len = self.nodes[a.0].value.len();
                    acc(&mut grads, a, len);
                    for g in grads[a.0].as_mut().unwrap().iter_mut() {
                        *g += d[0];
                    }
                }
                Op::Mean => {
                    let a = node.inputs[0];
                    let len = self.nodes[a.0].value.len();
                    acc(&mut grads, a, len);
                    let scale = d[0] / len as f64;
                    for g in grads[a.0].as_mut().unwrap().iter_mut() {
                        *g += scale;
                    }
                }
                Op::SoftmaxRows => {
                    let a = node.inputs[0];
                    let (r, c) = (node.shape[0], node.shape[1]);
                    acc(&mut grads, a, r * c);
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..r {
                        let p = &node.value[i * c..(i + 1) * c];
                        let di = &d[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(di).map(|(pj, dj)| pj * dj).sum();
                        for j in 0..c {
                            ga[i * c + j] += p[j] * (di[j] - dot);
                        }
                    }
                }
                Op::GaussLogPdf { sigma } => {
                    let (mu, obs) = (node.inputs[0], node.inputs[1]);
                    let len = self.nodes[mu.0].value.len();
                    acc(&mut grads, mu, len);
                    acc(&mut grads, obs, len);
                    let inv_var = 1.0 / (sigma * sigma);
                    for i in 0..len {
                        let diff = self.nodes[obs.0].value[i] - self.nodes[mu.0].value[i];
                        grads[mu.0].as_mut().unwrap()[i] += d[0] * diff * inv_var;
                        grads[obs.0].as_mut().unwrap()[i] -= d[0] * diff * inv_var;
                    }
                }
                Op::MinElem => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let len = d.len();
                    acc(&mut grads, a, len);
                    acc(&mut grads, b, len);
                    for (i, di) in d.iter().enumerate() {
                        if self.nodes[a.0].value[i] <= self.nodes[b.0].value[i] {
                            grads[a.0].as_mut().unwrap()[i] += di;
                        } else {
                            grads[b.0].as_mut().unwrap()[i] += di;
                        }
                    }
                }
                Op::Reshape => {
                    let a = node.inputs[0];
                    acc(&mut grads, a, d.len());
                    for (i, di) in d.iter().enumerate() {
                        grads[a.0].as_mut().unwrap()[i] += di;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Builds the graph through `build`, checks the output is a finite scalar,
/// and returns the loss with one gradient tensor per parameter.
/// Parameters the loss does not depend on receive zero gradients.
pub fn evaluate_with_gradients<F>(build: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut ComputeGraph, &[ValueId]) -> Result<ValueId>,
{
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(EvaError::InvalidArgument(format!(
                "parameter {i} does not have requires_grad set"
            )));
        }
    }
    let mut graph = ComputeGraph::new();
    let ids: Vec<ValueId> = params.iter().map(|p| graph.leaf(p)).collect();
    let out = build(&mut graph, &ids)?;
    if graph.value(out).len() != 1 {
        return Err(EvaError::InvalidArgument(format!(
            "loss must be scalar, got shape {:?}",
            graph.shape(out)
        )));
    }
    let loss = graph.value(out)[0];
    let adjoints = graph.backward(out)?;
    let mut grads = Vec::with_capacity(params.len());
    for (p, id) in params.iter().zip(&ids) {
        let g = adjoints[id.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; p.len()]);
        grads.push(Tensor::new(p.shape().to_vec(), g)?);
    }
    Ok((loss, grads))
}

/// Central-difference gradients `(L(p+h) - L(p-h)) / 2h` per coordinate.
/// The independent oracle every reverse-mode gradient is checked against.
pub fn finite_difference_gradient<F>(build: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut ComputeGraph, &[ValueId]) -> Result<ValueId>,
{
    if !(h > 0.0) {
        return Err(EvaError::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut graph = ComputeGraph::new();
        let ids: Vec<ValueId> = ps.iter().map(|p| graph.leaf(p)).collect();
        let out = build(&mut graph, &ids)?;
        if graph.value(out).len() != 1 {
            return Err(EvaError::InvalidArgument("loss must be scalar".into()));
        }
        Ok(graph.value(out)[0])
    };
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = vec![0.0; params[i].len()];
        for j in 0..params[i].len() {
            let mut plus: Vec<Tensor> = params.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus: Vec<Tensor> = params.to_vec();
            minus[i].data_mut()[j] -= h;
            g[j] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        grads.push(Tensor::new(params[i].shape().to_vec(), g)?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn assert_close(a: f64, b: f64, tol: f64, ctx: &str) {
        assert!((a - b).abs() <= tol, "{ctx}: {a} vs {b}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let (loss, grads) =
            evaluate_with_gradients(|g, ids| g.sum(ids[0]), std::slice::from_ref(&p)).unwrap();
        assert_eq!(loss, 6.0);
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        // loss = ||p||^2 / 2 at p = (1, -2) -> grad = (1, -2)
        let p = Tensor::from_vec(vec![1.0, -2.0]).unwrap().with_grad();
        let (loss, grads) = evaluate_with_gradients(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum(sq)?;
                g.mul_scalar(s, 0.5)
            },
            std::slice::from_ref(&p),
        )
        .unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(grads[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn sigmoid_matches_finite_differences() {
        // loss = sigmoid(2 p) at p = 0.3
        let p = Tensor::from_vec(vec![0.3]).unwrap().with_grad();
        let build = |g: &mut ComputeGraph, ids: &[ValueId]| {
            let two_p = g.mul_scalar(ids[0], 2.0)?;
            let s = g.sigmoid(two_p)?;
            g.sum(s)
        };
        let (_, grads) = evaluate_with_gradients(build, std::slice::from_ref(&p)).unwrap();
        let fd = finite_difference_gradient(build, std::slice::from_ref(&p), 1e-5).unwrap();
        assert_close(grads[0].data()[0], fd[0].data()[0], 1e-6, "sigmoid grad");
    }

    #[test]
    fn fd_oracle_square() {
        // loss = p^2 at p = 3, h = 1e-4 -> 6.0
        let p = Tensor::from_vec(vec![3.0]).unwrap();
        let fd = finite_difference_gradient(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            std::slice::from_ref(&p),
            1e-4,
        )
        .unwrap();
        assert_close(fd[0].data()[0], 6.0, 1e-6, "fd of p^2");
    }

    #[test]
    fn fd_oracle_constant_is_zero() {
        let p = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let fd = finite_difference_gradient(
            |g, _ids| Ok(g.scalar_const(7.0)),
            std::slice::from_ref(&p),
            1e-4,
        )
        .unwrap();
        assert_eq!(fd[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn fd_oracle_product_rule() {
        // loss = p1 * p2 at (2, 5) -> (5, 2)
        let p = Tensor::from_vec(vec![2.0, 5.0]).unwrap();
        let fd = finite_difference_gradient(
            |g, ids| {
                let x = g.reshape(ids[0], &[1, 2])?;
                let a = g.constant(&[1, 2], vec![1.0, 0.0])?;
                let b = g.constant(&[1, 2], vec![0.0, 1.0])?;
                let p1 = g.mul(x, a)?;
                let p1 = g.sum(p1)?;
                let p2 = g.mul(x, b)?;
                let p2 = g.sum(p2)?;
                let p1 = g.reshape(p1, &[1])?;
                let p2 = g.reshape(p2, &[1])?;
                let prod = g.mul(p1, p2)?;
                g.sum(prod)
            },
            std::slice::from_ref(&p),
            1e-5,
        )
        .unwrap();
        assert_close(fd[0].data()[0], 5.0, 1e-6, "d/dp1");
        assert_close(fd[0].data()[1], 2.0, 1e-6, "d/dp2");
    }

    #[test]
    fn non_participating_param_gets_zero_gradient() {
        let a = Tensor::from_vec(vec![1.0]).unwrap().with_grad();
        let b = Tensor::from_vec(vec![2.0, 3.0]).unwrap().with_grad();
        let (_, grads) =
            evaluate_with_gradients(|g, ids| g.sum(ids[0]), &[a, b]).unwrap();
        assert_eq!(grads[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = Tensor::from_vec(vec![1.0, 2.0]).unwrap().with_grad();
        let err = evaluate_with_gradients(|_, ids| Ok(ids[0]), std::slice::from_ref(&p));
        assert!(err.is_err());
    }

    #[test]
    fn nan_names_the_offending_node() {
        // exp overflows to Inf at node "exp#1".
        let p = Tensor::from_vec(vec![1000.0]).unwrap().with_grad();
        let err = evaluate_with_gradients(
            |g, ids| {
                let e = g.exp(ids[0])?;
                g.sum(e)
            },
            std::slice::from_ref(&p),
        )
        .unwrap_err();
        match err {
            EvaError::NonFinite { node } => assert!(node.starts_with("exp#"), "node {node}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn replay_reproduces_recorded_values_bitwise() {
        let mut rng = StreamRng::new(11, 0);
        let mut g = ComputeGraph::new();
        let a = g
            .constant(&[2, 3], (0..6).map(|_| rng.normal()).collect())
            .unwrap();
        let b = g
            .constant(&[3, 2], (0..6).map(|_| rng.normal()).collect())
            .unwrap();
        let m = g.matmul(a, b).unwrap();
        let r = g.relu(m).unwrap();
        let s = g.softmax_rows(r).unwrap();
        let out = g.mean(s).unwrap();
        let replayed = g.replay(out).unwrap();
        assert_eq!(replayed, g.value(out));
    }

    // Per-primitive randomized gradient checks against the finite-difference
    // oracle: 100 seeds spread across all differentiable primitives.
    #[test]
    fn primitives_match_finite_differences() {
        let mut checked = 0usize;
        for seed in 0..100u64 {
            let mut rng = StreamRng::new(seed, 0);
            let mut t = |n: usize| {
                Tensor::from_vec((0..n).map(|_| rng.normal()).collect())
                    .unwrap()
                    .with_grad()
            };
            let kind = seed % 10;
            let (params, build): (Vec<Tensor>, Box<dyn Fn(&mut ComputeGraph, &[ValueId]) -> Result<ValueId>>) =
                match kind {
                    0 => (vec![t(4), t(4)], Box::new(|g, ids| {
                        let s = g.add(ids[0], ids[1])?;
                        let sq = g.mul(s, s)?;
                        g.sum(sq)
                    })),
                    1 => (vec![t(4), t(4)], Box::new(|g, ids| {
                        let s = g.sub(ids[0], ids[1])?;
                        let sq = g.mul(s, s)?;
                        g.mean(sq)
                    })),
                    2 => (vec![t(6), t(6)], Box::new(|g, ids| {
                        let m = g.mul(ids[0], ids[1])?;
                        g.sum(m)
                    })),
                    3 => (vec![t(6), t(6)], Box::new(|g, ids| {
                        let a = g.reshape(ids[0], &[2, 3])?;
                        let b = g.reshape(ids[1], &[3, 2])?;
                        let m = g.matmul(a, b)?;
                        let sq = g.mul(m, m)?;
                        g.sum(sq)
                    })),
                    4 => (vec![t(5)], Box::new(|g, ids| {
                        let r = g.relu(ids[0])?;
                        let e = g.sigmoid(r)?;
                        g.sum(e)
                    })),
                    5 => (vec![t(5)], Box::new(|g, ids| {
                        let e = g.exp(ids[0])?;
                        g.mean(e)
                    })),
                    6 => (vec![t(6)], Box::new(|g, ids| {
                        let m = g.reshape(ids[0], &[2, 3])?;
                        let s = g.softmax_rows(m)?;
                        let w = g.constant(&[2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4])?;
                        let p = g.mul(s, w)?;
                        g.sum(p)
                    })),
                    7 => (vec![t(4), t(4)], Box::new(|g, ids| {
                        g.gauss_log_pdf(ids[0], ids[1], 0.7)
                    })),
                    8 => (vec![t(4), t(4)], Box::new(|g, ids| {
                        let m = g.min_elem(ids[0], ids[1])?;
                        g.sum(m)
                    })),
                    _ => (vec![t(6)], Box::new(|g, ids| {
                        let c = g.clamp(ids[0], -3.0, 3.0)?;
                        let e = g.exp(c)?;
                        g.mean(e)
                    })),
                };
            let (_, grads) = evaluate_with_gradients(&build, &params).unwrap();
            let fd = finite_difference_gradient(&build, &params, 1e-5).unwrap();
            for (ga, gf) in grads.iter().zip(&fd) {
                for (x, y) in ga.data().iter().zip(gf.data()) {
                    assert!(
                        (x - y).abs() <= 1e-5,
                        "seed {seed} kind {kind}: reverse {x} vs fd {y}"
                    );
                }
            }
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = StreamRng::new(seed, 3);
            let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng).with_grad();
            let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng).with_grad();
            let b = Tensor::randn(&[3], 0.5, &mut rng).with_grad();
            let build = |g: &mut ComputeGraph, ids: &[ValueId]| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            };
            let params = vec![x, w, b];
            let (_, grads) = evaluate_with_gradients(build, &params).unwrap();
            let fd = finite_difference_gradient(build, &params, 1e-5).unwrap();
            for (ga, gf) in grads.iter().zip(&fd) {
                for (a, f) in ga.data().iter().zip(gf.data()) {
                    assert!((a - f).abs() <= 1e-4, "seed {seed}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn row_broadcast_add_and_mul_gradients() {
        let mut rng = StreamRng::new(5, 9);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng).with_grad();
        let b = Tensor::randn(&[1, 4], 1.0, &mut rng).with_grad();
        let build = |g: &mut ComputeGraph, ids: &[ValueId]| {
            let s = g.add(ids[0], ids[1])?;
            let m = g.mul(s, ids[1])?;
            let sq = g.mul(m, m)?;
            g.sum(sq)
        };
        let params = vec![a, b];
        let (_, grads) = evaluate_with_gradients(build, &params).unwrap();
        let fd = finite_difference_gradient(build, &params, 1e-5).unwrap();
        for (ga, gf) in grads.iter().zip(&fd) {
            for (x, y) in ga.data().iter().zip(gf.data()) {
                assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
            }
        }
    }
}
