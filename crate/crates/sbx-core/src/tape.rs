//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Forward ops append nodes to the tape; `backward` replays the nodes once,
//! in reverse recording order, accumulating gradients into every leaf that
//! was recorded with `requires_grad`. Ops whose inputs carry no gradient are
//! skipped during the reverse sweep, so frozen subnetworks cost nothing on
//! the way back.
//!
//! There is no broadcasting beyond scalar-tensor `scale` and the dedicated
//! `bias_add` rule; every other op requires exactly conforming shapes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    BiasAdd(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Relu(Var),
    Reshape(Var),
    Softmax { input: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
    MaxAll(Var),
    MinAll(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Every `requires_grad` leaf gets an entry; leaves that were not reachable
/// from the loss hold zeros. Constants and intermediate values report `None`.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward/backward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at `v`.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> Var {
        // Recording new work re-arms the tape for another backward pass.
        self.consumed = false;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var> {
        t.check_finite("tape.leaf")?;
        let needs = t.requires_grad();
        Ok(self.push(t, Op::Leaf, needs))
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        t.check_finite("tape.constant")?;
        Ok(self.push(t, Op::Constant, false))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape { op: op_name, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    /// Elementwise addition of same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a `[d]` bias vector to the trailing axis of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let d = *xs.last().ok_or(Error::Shape {
            op: "bias_add",
            detail: "rank-0 input".into(),
        })?;
        if bs != [d] {
            return Err(Error::Shape {
                op: "bias_add",
                detail: format!("input {xs:?} needs bias [{d}], got {bs:?}"),
            });
        }
        let bd = self.value(bias).data().to_vec();
        let data: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bd[i % d])
            .collect();
        let out = Tensor::new(xs, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::BiasAdd(x, bias), needs))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Multiplies every element by the scalar `k`.
    pub fn scale(&mut self, x: Var, k: F) -> Result<Var> {
        let out = self.value(x).scale(k);
        out.check_finite("scale")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, k.as_f64()), needs))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape { op: "bmm", detail: format!("{sa:?} x {sb:?}") });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            let lhs = &self.value(a).data()[i * m * k..(i + 1) * m * k];
            let rhs = &self.value(b).data()[i * k * n..(i + 1) * k * n];
            data.extend_from_slice(&matmul_raw(lhs, rhs, m, k, n));
        }
        let out = Tensor::new(vec![bsz, m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Bmm(a, b), needs))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (bsz, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::Shape { op: "transpose", detail: format!("rank {}", s.len()) }),
        };
        let data = transpose_raw(self.value(x).data(), bsz, m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    /// 2-D convolution over `[B,H,W,Cin]` with kernel `[kh,kw,Cin,Cout]`,
    /// zero padding and the given stride.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidConfig { detail: "conv2d stride must be >= 1".into() });
        }
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 4 || sk.len() != 4 || si[3] != sk[2] {
            return Err(Error::Shape { op: "conv2d", detail: format!("input {si:?} kernel {sk:?}") });
        }
        let (h, w) = (si[1], si[2]);
        let (kh, kw) = (sk[0], sk[1]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let data = conv2d_raw(
            self.value(input).data(),
            self.value(kernel).data(),
            [si[0], h, w, si[3]],
            [kh, kw, sk[2], sk[3]],
            stride,
            padding,
        );
        let out = Tensor::new(vec![si[0], oh, ow, sk[3]], data)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, padding }, needs))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<F> =
            self.value(x).data().iter().map(|v| if *v > F::zero() { *v } else { F::zero() }).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu(x), needs))
    }

    /// Reinterprets `x` under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Collapses all trailing axes: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(Error::Shape { op: "flatten", detail: "rank-0 input".into() });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let data = softmax_raw(self.value(x).data(), &s, axis);
        let out = Tensor::new(s, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { input: x, axis }, needs))
    }

    /// Mean cross-entropy of `[B,C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape { op: "cross_entropy", detail: format!("logits {s:?}") });
        }
        let (b, c) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::Empty { what: "cross_entropy" });
        }
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{b} rows vs {} labels", labels.len()),
            });
        }
        for &l in labels {
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, num_classes: c });
            }
        }
        let per = per_sample_cross_entropy_raw(self.value(logits).data(), b, c, labels);
        let mut total = F::zero();
        for v in &per {
            total += *v;
        }
        let mean = total / F::from_f64(b as f64);
        let out = Tensor::scalar(mean);
        out.check_finite("cross_entropy")?;
        let needs = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec() }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut total = F::zero();
        for v in self.value(x).data() {
            total += *v;
        }
        let out = Tensor::scalar(total);
        out.check_finite("sum")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sum(x), needs))
    }

    /// Largest element, as a scalar; gradient routes to the first maximum.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).max_value()?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(m), Op::MaxAll(x), needs))
    }

    /// Smallest element, as a scalar; gradient routes to the first minimum.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).min_value()?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(m), Op::MinAll(x), needs))
    }

    /// Reverse sweep from the scalar `loss`. Each node is visited exactly
    /// once, in reverse recording order. Consumes the tape until new ops are
    /// recorded.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss has shape {:?}, expected scalar", self.value(loss).shape()),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue, // not reachable from the loss
            };
            self.accumulate_inputs(i, &g, &mut grads)?;
            // Leaves keep their gradient; intermediates drop it.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        // Unreached trainable leaves get explicit zeros.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad && grads[i].is_none()
            {
                grads[i] = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }

        for g in grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        node: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>| {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[node].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![F::zero(); d];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % d] += *v;
                    }
                    accumulate(grads, *bias, Tensor::new(vec![d], db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<F> =
                        g.data().iter().zip(self.value(*b).data()).map(|(x, y)| *x * *y).collect();
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d: Vec<F> =
                        g.data().iter().zip(self.value(*a).data()).map(|(x, y)| *x * *y).collect();
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, k) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.scale(F::from_f64(*k)));
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = dC @ B^T
                    let bt = transpose_raw(self.value(*b).data(), 1, k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    // dB = A^T @ dC
                    let at = transpose_raw(self.value(*a).data(), 1, m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(bsz * m * k);
                    for i in 0..bsz {
                        let gb = &g.data()[i * m * n..(i + 1) * m * n];
                        let bt = transpose_raw(
                            &self.value(*b).data()[i * k * n..(i + 1) * k * n],
                            1,
                            k,
                            n,
                        );
                        da.extend_from_slice(&matmul_raw(gb, &bt, m, n, k));
                    }
                    accumulate(grads, *a, Tensor::new(vec![bsz, m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(bsz * k * n);
                    for i in 0..bsz {
                        let gb = &g.data()[i * m * n..(i + 1) * m * n];
                        let at = transpose_raw(
                            &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                            1,
                            m,
                            k,
                        );
                        db.extend_from_slice(&matmul_raw(&at, gb, k, m, n));
                    }
                    accumulate(grads, *b, Tensor::new(vec![bsz, k, n], db)?);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let s = g.shape();
                    let (bsz, m, n) = match s.len() {
                        2 => (1, s[0], s[1]),
                        _ => (s[0], s[1], s[2]),
                    };
                    let d = transpose_raw(g.data(), bsz, m, n);
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?);
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let si = self.value(*input).shape().to_vec();
                let sk = self.value(*kernel).shape().to_vec();
                let (din, dk) = conv2d_backward_raw(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    [si[0], si[1], si[2], si[3]],
                    [sk[0], sk[1], sk[2], sk[3]],
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if self.needs(*input) {
                    accumulate(grads, *input, Tensor::new(si, din)?);
                }
                if self.needs(*kernel) {
                    accumulate(grads, *kernel, Tensor::new(sk, dk)?);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let d: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| if *xv > F::zero() { *gv } else { F::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let d = Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec())?;
                    accumulate(grads, *x, d);
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(*input) {
                    let y = self.value(Var(node));
                    let d = softmax_backward_raw(y.data(), g.data(), y.shape(), *axis);
                    accumulate(grads, *input, Tensor::new(y.shape().to_vec(), d)?);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let s = self.value(*logits).shape();
                    let (b, c) = (s[0], s[1]);
                    let gs = g.item();
                    let probs = softmax_raw(self.value(*logits).data(), &[b, c], 1);
                    let inv_b = F::one() / F::from_f64(b as f64);
                    let mut d = vec![F::zero(); b * c];
                    for row in 0..b {
                        for col in 0..c {
                            let one_hot =
                                if labels[row] == col { F::one() } else { F::zero() };
                            d[row * c + col] = (probs[row * c + col] - one_hot) * inv_b * gs;
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(vec![b, c], d)?);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gv = g.item();
                    accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
            }
            Op::MaxAll(x) => {
                if self.needs(*x) {
                    let data = self.value(*x).data();
                    let mut best = 0usize;
                    for (i, v) in data.iter().enumerate() {
                        if *v > data[best] {
                            best = i;
                        }
                    }
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    d.data_mut()[best] = g.item();
                    accumulate(grads, *x, d);
                }
            }
            Op::MinAll(x) => {
                if self.needs(*x) {
                    let data = self.value(*x).data();
                    let mut best = 0usize;
                    for (i, v) in data.iter().enumerate() {
                        if *v < data[best] {
                            best = i;
                        }
                    }
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    d.data_mut()[best] = g.item();
                    accumulate(grads, *x, d);
                }
            }
        }
        Ok(())
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

fn transpose_raw<F: Scalar>(x: &[F], bsz: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); bsz * m * n];
    for b in 0..bsz {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
            }
        }
    }
    out
}

fn conv2d_raw<F: Scalar>(
    input: &[F],
    kernel: &[F],
    ishape: [usize; 4],
    kshape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Vec<F> {
    let [bsz, h, w, cin] = ishape;
    let [kh, kw, _, cout] = kshape;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![F::zero(); bsz * oh * ow * cout];
    for b in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin;
                        let out_base = ((b * oh + oy) * ow + ox) * cout;
                        for ic in 0..cin {
                            let iv = input[in_base + ic];
                            let kk = (k_base + ic) * cout;
                            for oc in 0..cout {
                                out[out_base + oc] += iv * kernel[kk + oc];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_raw<F: Scalar>(
    input: &[F],
    kernel: &[F],
    gout: &[F],
    ishape: [usize; 4],
    kshape: [usize; 4],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Vec<F>, Vec<F>) {
    let [bsz, h, w, cin] = ishape;
    let [kh, kw, _, cout] = kshape;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut din = vec![F::zero(); if need_input { bsz * h * w * cin } else { 0 }];
    let mut dk = vec![F::zero(); if need_kernel { kh * kw * cin * cout } else { 0 }];
    for b in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin;
                        let out_base = ((b * oh + oy) * ow + ox) * cout;
                        for ic in 0..cin {
                            let kk = (k_base + ic) * cout;
                            for oc in 0..cout {
                                let gv = gout[out_base + oc];
                                if need_input {
                                    din[in_base + ic] += kernel[kk + oc] * gv;
                                }
                                if need_kernel {
                                    dk[kk + oc] += input[in_base + ic] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (din, dk)
}

/// Stable softmax along `axis` of an arbitrary-rank tensor.
pub(crate) fn softmax_raw<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis_len + a) * inner + i;
            let mut mx = x[idx(0)];
            for a in 1..axis_len {
                if x[idx(a)] > mx {
                    mx = x[idx(a)];
                }
            }
            let mut total = F::zero();
            for a in 0..axis_len {
                let e = (x[idx(a)] - mx).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..axis_len {
                out[idx(a)] = out[idx(a)] / total;
            }
        }
    }
    out
}

fn softmax_backward_raw<F: Scalar>(y: &[F], g: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis_len + a) * inner + i;
            let mut dot = F::zero();
            for a in 0..axis_len {
                dot += g[idx(a)] * y[idx(a)];
            }
            for a in 0..axis_len {
                out[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
            }
        }
    }
    out
}

/// Per-sample `-log softmax(logits)[label]` via a stable log-sum-exp.
pub(crate) fn per_sample_cross_entropy_raw<F: Scalar>(
    logits: &[F],
    b: usize,
    c: usize,
    labels: &[usize],
) -> Vec<F> {
    let mut out = Vec::with_capacity(b);
    for row in 0..b {
        let r = &logits[row * c..(row + 1) * c];
        let mut mx = r[0];
        for v in &r[1..] {
            if *v > mx {
                mx = *v;
            }
        }
        let mut total = F::zero();
        for v in r {
            total += (*v - mx).exp();
        }
        let log_z = mx + total.ln();
        out.push(log_z - r[labels[row]]);
    }
    out
}

/// Per-sample cross-entropy on a plain value tensor (no tape participation).
pub fn per_sample_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<Vec<F>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape { op: "per_sample_cross_entropy", detail: format!("{s:?}") });
    }
    let (b, c) = (s[0], s[1]);
    if labels.len() != b {
        return Err(Error::Shape {
            op: "per_sample_cross_entropy",
            detail: format!("{b} rows vs {} labels", labels.len()),
        });
    }
    for &l in labels {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, num_classes: c });
        }
    }
    Ok(per_sample_cross_entropy_raw(logits.data(), b, c, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6])).unwrap();
        let b = tape.constant(t(&[2, 2], &[0.; 4])).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., -2., 0.5, 10., 10., -10.])).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1., 2.])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 2.]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 10], &[0.; 10])).unwrap();
        let l = tape.cross_entropy(x, &[3]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 10];
        row[7] = 40.0;
        let x = tape.constant(t(&[1, 10], &row)).unwrap();
        let l = tape.cross_entropy(x, &[7]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_direct_value() {
        // -log(e^0 / (e^1 + e^0)) = ln(1 + e)
        let expected = (1.0 + std::f64::consts::E).ln();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1., 0.])).unwrap();
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-9);
        assert!((tape.value(l).item() - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.; 3])).unwrap();
        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn re_recording_rearms_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        let y = tape.leaf(t(&[2], &[3., 4.]).with_grad()).unwrap();
        let s2 = tape.sum(y).unwrap();
        assert!(tape.backward(s2).is_ok());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let y = tape.leaf(t(&[2], &[3., 4.]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn constant_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let c = tape.constant(t(&[2], &[5., 6.])).unwrap();
        let m = tape.mul(x, c).unwrap();
        let s = tape.sum(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5., 6.]);
    }

    #[test]
    fn diamond_reuse_accumulates_once_per_path() {
        // s = sum(x + x) => ds/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad()).unwrap();
        let a = tape.add(x, x).unwrap();
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn conv2d_stride_arithmetic() {
        // 16x16 input, 3x3 kernel, stride 2, pad 1 -> 8x8 -> 4x4.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 16, 16, 1])).unwrap();
        let k1 = tape.constant(Tensor::zeros(&[3, 3, 1, 2])).unwrap();
        let h1 = tape.conv2d(x, k1, 2, 1).unwrap();
        assert_eq!(tape.value(h1).shape(), &[1, 8, 8, 2]);
        let k2 = tape.constant(Tensor::zeros(&[3, 3, 2, 4])).unwrap();
        let h2 = tape.conv2d(h1, k2, 2, 1).unwrap();
        assert_eq!(tape.value(h2).shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn bias_add_rule() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0., 0., 0., 1., 1., 1.])).unwrap();
        let b = tape.constant(t(&[3], &[1., 2., 3.])).unwrap();
        let y = tape.bias_add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 2., 3., 4.]);
        let bad = tape.constant(t(&[2], &[0., 0.])).unwrap();
        assert!(tape.bias_add(x, bad).is_err());
    }

    #[test]
    fn max_min_all_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., 5., -3., 5.]).with_grad()).unwrap();
        let mx = tape.max_all(x).unwrap();
        assert_eq!(tape.value(mx).item(), 5.0);
        let grads = tape.backward(mx).unwrap();
        // routes to the first maximum
        assert_eq!(grads.get(x).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn per_sample_ce_matches_mean_op() {
        let logits = t(&[2, 3], &[1., 0., -1., 0.5, 0.5, 0.5]);
        let per = per_sample_cross_entropy(&logits, &[0, 2]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits).unwrap();
        let ce = tape.cross_entropy(l, &[0, 2]).unwrap();
        let mean = (per[0] + per[1]) / 2.0;
        assert!((tape.value(ce).item() - mean).abs() < 1e-12);
    }
}
