//! Generic differentiable operations recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, VjpRule};
use crate::tensor::Tensor;

/// Default negative slope for leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    LeakyRelu(f64),
}

struct Binary {
    kind: Elementwise,
}

impl VjpRule for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            _ => "mul",
        }
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let full = match self.kind {
                Elementwise::Mul => grad.mul(b).expect("broadcast checked in forward"),
                _ => grad.clone(),
            };
            full.reduce_to_shape(a.shape())
        });
        let gb = needs[1].then(|| {
            let full = match self.kind {
                Elementwise::Mul => grad.mul(a).expect("broadcast checked in forward"),
                Elementwise::Sub => grad.scale(-1.0),
                _ => grad.clone(),
            };
            full.reduce_to_shape(b.shape())
        });
        vec![ga, gb]
    }
}

struct Unary {
    kind: Elementwise,
}

impl VjpRule for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            Elementwise::Exp => "exp",
            _ => "leaky_relu",
        }
    }

    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = match self.kind {
            Elementwise::Exp => grad.mul(out).unwrap(),
            Elementwise::LeakyRelu(slope) => inputs[0]
                .zip_broadcast(grad, "leaky_relu", |x, g| if x > 0.0 { g } else { slope * g })
                .unwrap(),
            _ => unreachable!(),
        };
        vec![Some(g)]
    }
}

struct Scale(f64);

impl VjpRule for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct Relu;

impl VjpRule for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = inputs[0]
            .zip_broadcast(grad, "relu", |x, g| if x > 0.0 { g } else { 0.0 })
            .unwrap();
        vec![Some(g)]
    }
}

struct Reshape;

impl VjpRule for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(inputs[0].shape()).unwrap())]
    }
}

struct SumAll {
    mean: bool,
}

impl VjpRule for SumAll {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let n = inputs[0].numel() as f64;
        let g = if self.mean { grad.item() / n } else { grad.item() };
        vec![Some(Tensor::full(inputs[0].shape(), g).unwrap())]
    }
}

/// Mean over one axis, removing it.
struct MeanAxis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl VjpRule for MeanAxis {
    fn name(&self) -> &'static str {
        "mean_axis"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let inv = 1.0 / self.len as f64;
        let g = grad.data();
        let mut out = vec![0.0; inputs[0].numel()];
        for o in 0..self.outer {
            for l in 0..self.len {
                let base = (o * self.len + l) * self.inner;
                for i in 0..self.inner {
                    out[base + i] = g[o * self.inner + i] * inv;
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

/// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
struct BatchedMatmul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

pub(crate) fn bmm_kernel(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        let (a, b) = (&a[t * m * k..(t + 1) * m * k], &b[t * k * n..(t + 1) * k * n]);
        let o = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    o[i * n + j] += av * b[p * n + j];
                }
            }
        }
    }
    out
}

impl VjpRule for BatchedMatmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let ga = needs[0].then(|| {
            // dA = G B^T
            let mut out = vec![0.0; self.batch * m * k];
            for t in 0..self.batch {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[t * m * n + i * n + j] * b[t * k * n + p * n + j];
                        }
                        out[t * m * k + i * k + p] = acc;
                    }
                }
            }
            Tensor::from_parts(inputs[0].shape().to_vec(), out)
        });
        let gb = needs[1].then(|| {
            // dB = A^T G
            let mut out = vec![0.0; self.batch * k * n];
            for t in 0..self.batch {
                for i in 0..m {
                    for p in 0..k {
                        let av = a[t * m * k + i * k + p];
                        for j in 0..n {
                            out[t * k * n + p * n + j] += av * g[t * m * n + i * n + j];
                        }
                    }
                }
            }
            Tensor::from_parts(inputs[1].shape().to_vec(), out)
        });
        vec![ga, gb]
    }
}

struct Transpose2d {
    rows: usize,
    cols: usize,
}

fn transpose_kernel(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl VjpRule for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = transpose_kernel(grad.data(), self.cols, self.rows);
        vec![Some(Tensor::from_parts(vec![self.rows, self.cols], data))]
    }
}

/// Contiguous range `[start, start + len)` along one axis.
struct SliceAxis {
    outer: usize,
    axis_len: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl VjpRule for SliceAxis {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut out = vec![0.0; inputs[0].numel()];
        let g = grad.data();
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.axis_len + self.start) * self.inner;
            out[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

struct Concat {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

impl VjpRule for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let total: usize = self.lens.iter().sum();
        let g = grad.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (idx, (&len, input)) in self.lens.iter().zip(inputs).enumerate() {
            if needs[idx] {
                let chunk = len * self.inner;
                let mut out = Vec::with_capacity(input.numel());
                for o in 0..self.outer {
                    let src = (o * total + offset) * self.inner;
                    out.extend_from_slice(&g[src..src + chunk]);
                }
                grads.push(Some(Tensor::from_parts(input.shape().to_vec(), out)));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        grads
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

impl Tape {
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, Some(b)) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let value = match kind {
                    Elementwise::Add => ta.add(tb)?,
                    Elementwise::Sub => ta.sub(tb)?,
                    _ => ta.mul(tb)?,
                };
                Ok(self.record(value, &[a, b], Binary { kind }))
            }
            (Elementwise::Exp, None) => {
                let value = self.value(a).map(f64::exp);
                Ok(self.record(value, &[a], Unary { kind }))
            }
            (Elementwise::LeakyRelu(slope), None) => {
                let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
                Ok(self.record(value, &[a], Unary { kind }))
            }
            _ => Err(Error::Config(format!("operand count does not match {kind:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Exp, a, None).expect("unary")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.elementwise(Elementwise::LeakyRelu(slope), a, None).expect("unary")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record(value, &[a], Relu)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.record(value, &[a], Scale(factor))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.record(value, &[a], Reshape))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, &[a], SumAll { mean: false })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.record(value, &[a], SumAll { mean: true })
    }

    /// Mean over `axis`, dropping it. A rank-1 input yields shape `[1]`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let inv = 1.0 / len as f64;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(Tensor::from_parts(out_shape, out), &[a], MeanAxis { outer, len, inner }))
    }

    /// Standard 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = bmm_kernel(self.value(a).data(), self.value(b).data(), 1, m, k, n);
        Ok(self.record(Tensor::from_parts(vec![m, n], data), &[a, b], BatchedMatmul { batch: 1, m, k, n }))
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch { op: "batched_matmul", lhs: sa, rhs: sb });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = bmm_kernel(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        Ok(self.record(
            Tensor::from_parts(vec![batch, m, n], data),
            &[a, b],
            BatchedMatmul { batch, m, k, n },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape { shape, reason: "transpose expects rank 2".into() });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = transpose_kernel(self.value(a).data(), rows, cols);
        Ok(self.record(Tensor::from_parts(vec![cols, rows], data), &[a], Transpose2d { rows, cols }))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice {start}..{} out of range on axis {axis}", start + len),
            });
        }
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let chunk = len * inner;
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let src = (o * axis_len + start) * inner;
            out.extend_from_slice(&x[src..src + chunk]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[a],
            SliceAxis { outer, axis_len, inner, start, len },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?).to_vec();
        check_axis(&first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let x = self.value(p).data();
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        Ok(self.record(Tensor::from_parts(out_shape, out), parts, Concat { outer, inner, lens }))
    }
}
