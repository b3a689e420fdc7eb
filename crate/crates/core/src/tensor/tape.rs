use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    DisplacementMean {
        pred: Var,
        target: Var,
        dist: Vec<T>,
    },
    Upsample(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution-ordered record of operations. Single-threaded; use one tape per worker.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// dLoss/dVar; zeros when the value did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Raw gradient buffer, `None` when unreached.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, &t.shape, &[0, 0])),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Whether every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Only leaves with `requires_grad` (and values derived
    /// from them) take part in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.val(a))?;
        let (k2, n) = matrix_dims("matmul", self.val(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                &self.val(a).shape,
                &self.val(b).shape,
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(&self.val(a).data, &self.val(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.val(a), self.val(b))?;
        let data = self
            .val(a)
            .data
            .iter()
            .zip(&self.val(b).data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.val(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.val(a), self.val(b))?;
        let data = self
            .val(a)
            .data
            .iter()
            .zip(&self.val(b).data)
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.val(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.val(a).last_dim();
        if self.val(bias).shape != [n] {
            return Err(Error::shape(
                "add_bias",
                &self.val(a).shape,
                &self.val(bias).shape,
            ));
        }
        let b = &self.val(bias).data;
        let data = self
            .val(a)
            .data
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| *x + *y))
            .collect();
        let shape = self.val(a).shape.clone();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.val(a).data.iter().map(|x| *x * s).collect();
        let shape = self.val(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a, s), rg)
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.val(
            *inputs
                .first()
                .ok_or_else(|| Error::shape("concat", &[], &[]))?,
        );
        if axis >= first.shape.len() {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        let mut shape = first.shape.clone();
        let outer: usize = shape[..axis].iter().product();
        let mut total = 0;
        for v in inputs {
            let s = &self.val(*v).shape;
            if s.len() != shape.len()
                || s[..axis] != shape[..axis]
                || s[axis + 1..] != shape[axis + 1..]
            {
                return Err(Error::shape("concat", &shape, s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.val(*v);
                let chunk: usize = t.shape[axis..].iter().product();
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.val(input);
        if axis >= t.shape.len() || start + len > t.shape[axis] {
            return Err(Error::shape("slice", &t.shape, &[axis, start, len]));
        }
        let outer: usize = t.shape[..axis].iter().product();
        let inner: usize = t.shape[axis + 1..].iter().product();
        let full = t.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &t.data[o * full + start * inner..o * full + (start + len) * inner],
            );
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data }, Op::Slice { input, axis, start }, rg))
    }

    /// Selects rows of a `[r, d]` matrix; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = matrix_dims("gather_rows", self.val(input))?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, d], &[*bad]));
        }
        let src = &self.val(input).data;
        let data = rows
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), d],
                data,
            },
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.val(input))?;
        let src = &self.val(input).data;
        let data = (0..r * c).map(|idx| src[(idx % r) * c + idx / r]).collect();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(input),
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(input);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", &t.shape, shape));
        }
        let data = t.data.clone();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(input),
            rg,
        ))
    }

    /// Softmax over the last axis. Weights below `epsilon^2` are flushed to
    /// zero, which keeps subnormals out of the backward pass.
    pub fn softmax(&mut self, input: Var) -> Var {
        let t = self.val(input);
        let n = t.last_dim();
        let mut data = t.data.clone();
        let floor = T::epsilon() * T::epsilon();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
                if *v < floor {
                    *v = T::zero();
                }
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::Softmax(input), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.val(x).last_dim();
        if self.val(gamma).shape != [d] || self.val(beta).shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                &self.val(x).shape,
                &self.val(gamma).shape,
            ));
        }
        let xs = &self.val(x).data;
        let g = &self.val(gamma).data;
        let b = &self.val(beta).data;
        let rows = xs.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.val(x).shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let t = self.val(input);
        let data = t
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = t.shape.clone();
        let rg = self.rg(input);
        self.push(Tensor { shape, data }, Op::LeakyRelu { input, slope }, rg)
    }

    /// 2-D convolution with zero padding. `input: [n, c, h, w]`,
    /// `weight: [o, c, kh, kw]`, `bias: [o]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = &self.val(input).shape;
        let ws = &self.val(weight).shape;
        let (&[n, c, h, w], &[o, c2, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("conv2d", xs, ws));
        };
        if input == weight || c != c2 || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if self.val(bias).shape != [o] {
            return Err(Error::shape("conv2d", ws, &self.val(bias).shape));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![T::zero(); n * o * geom.oh * geom.ow];
        kernels::conv2d_forward(
            &geom,
            &self.val(input).data,
            &self.val(weight).data,
            &self.val(bias).data,
            &mut out,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor {
                shape: vec![n, o, geom.oh, geom.ow],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.val(input).data.iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.val(input);
        let s = t.data.iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Mean(input), rg)
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("squared_error", self.val(a), self.val(b))?;
        let data = self
            .val(a)
            .data
            .iter()
            .zip(&self.val(b).data)
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .collect();
        let shape = self.val(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::SquaredError(a, b), rg))
    }

    /// Mean of `sqrt(|p - q|^2 + eps)` over all points of `[.., 2]` tensors.
    pub fn displacement_mean(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        same_shape("displacement_mean", self.val(pred), self.val(target))?;
        if self.val(pred).last_dim() != 2 || self.val(pred).shape.is_empty() {
            return Err(Error::shape(
                "displacement_mean",
                &self.val(pred).shape,
                &[2],
            ));
        }
        let p = &self.val(pred).data;
        let q = &self.val(target).data;
        let dist: Vec<T> = p
            .chunks_exact(2)
            .zip(q.chunks_exact(2))
            .map(|(a, b)| {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                (dx * dx + dy * dy + eps).sqrt()
            })
            .collect();
        let m = dist.iter().copied().sum::<T>() / T::of(dist.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(m),
            Op::DisplacementMean { pred, target, dist },
            rg,
        ))
    }

    /// `[.., k, 2]` waypoints at double spacing to `[.., 2k, 2]`: odd rows copy
    /// the input, even rows are midpoints with the origin before the first.
    pub fn upsample(&mut self, input: Var) -> Result<Var> {
        let t = self.val(input);
        let s = &t.shape;
        if s.len() < 2 || s[s.len() - 1] != 2 {
            return Err(Error::shape("upsample", s, &[0, 2]));
        }
        let k = s[s.len() - 2];
        let half = T::of(0.5);
        let mut data = Vec::with_capacity(t.numel() * 2);
        for traj in t.data.chunks_exact(2 * k) {
            for i in 0..k {
                for c in 0..2 {
                    let prev = if i == 0 {
                        T::zero()
                    } else {
                        traj[2 * (i - 1) + c]
                    };
                    data.push((prev + traj[2 * i + c]) * half);
                }
                data.extend_from_slice(&traj[2 * i..2 * i + 2]);
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape[l - 2] = 2 * k;
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data }, Op::Upsample(input), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn take_grad(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        grads[v.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.val(v).numel()])
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Temporarily moves the gradient buffer of `$v` out of `grads`.
        macro_rules! with {
            ($v:expr, |$buf:ident| $body:expr) => {
                if self.rg($v) {
                    let mut $buf = self.take_grad(grads, $v);
                    $body;
                    grads[$v.0] = Some($buf);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                let n = self.val(*b).shape[1];
                with!(*a, |ga| kernels::matmul_nt_acc(
                    g,
                    &self.val(*b).data,
                    &mut ga,
                    m,
                    n,
                    k
                ));
                with!(*b, |gb| kernels::matmul_tn_acc(
                    &self.val(*a).data,
                    g,
                    &mut gb,
                    m,
                    k,
                    n
                ));
            }
            Op::Add(a, b) => {
                with!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                with!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
            }
            Op::Sub(a, b) => {
                with!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                with!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y));
            }
            Op::AddBias(a, b) => {
                with!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                let n = self.val(*b).numel();
                with!(*b, |gb| for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y)
                });
            }
            Op::Scale(a, s) => {
                with!(*a, |ga| ga
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += *y * *s));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape[..*axis].iter().product();
                let full: usize = node.value.shape[*axis..].iter().product();
                let mut offset = 0;
                for v in inputs {
                    let chunk: usize = self.val(*v).shape[*axis..].iter().product();
                    with!(*v, |gv| for o in 0..outer {
                        let src = &g[o * full + offset..o * full + offset + chunk];
                        gv[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += *y);
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = &self.val(*input).shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis] * inner;
                let part = node.value.shape[*axis] * inner;
                with!(*input, |gi| for o in 0..outer {
                    let dst = &mut gi[o * full + start * inner..o * full + start * inner + part];
                    dst.iter_mut()
                        .zip(&g[o * part..(o + 1) * part])
                        .for_each(|(x, y)| *x += *y);
                });
            }
            Op::GatherRows { input, rows } => {
                let d = self.val(*input).shape[1];
                with!(*input, |gi| for (k, &r) in rows.iter().enumerate() {
                    gi[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(x, y)| *x += *y);
                });
            }
            Op::Transpose(input) => {
                let (r, c) = (self.val(*input).shape[0], self.val(*input).shape[1]);
                // output is [c, r]
                with!(*input, |gi| for i in 0..r {
                    for j in 0..c {
                        gi[i * c + j] += g[j * r + i];
                    }
                });
            }
            Op::Reshape(input) => {
                with!(*input, |gi| gi
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += *y));
            }
            Op::Softmax(input) => {
                let y = &node.value.data;
                let n = node.value.last_dim();
                with!(*input, |gi| for ((yr, gr), dst) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(gi.chunks_exact_mut(n))
                {
                    let dotp: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..n {
                        dst[j] += yr[j] * (gr[j] - dotp);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.val(*gamma).numel();
                let dn = T::of(d as f64);
                let gam = &self.val(*gamma).data;
                with!(
                    *gamma,
                    |gg| for (hr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                );
                with!(*beta, |gb| for gr in g.chunks_exact(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += *b);
                });
                with!(*x, |gx| for (r, ((hr, gr), dst)) in xhat
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dst[j] += inv_std[r] * (dh - m1 - hr[j] * m2);
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let xs = &self.val(*input).data;
                with!(
                    *input,
                    |gi| for ((dst, x), gv) in gi.iter_mut().zip(xs).zip(g) {
                        *dst += if *x > T::zero() { *gv } else { *gv * *slope };
                    }
                );
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = &self.val(*input).data;
                let w = &self.val(*weight).data;
                let mut gx = self.rg(*input).then(|| self.take_grad(grads, *input));
                let mut gw = self.rg(*weight).then(|| self.take_grad(grads, *weight));
                let mut gb = self.rg(*bias).then(|| self.take_grad(grads, *bias));
                kernels::conv2d_backward(
                    geom,
                    x,
                    w,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(*input, gx), (*weight, gw), (*bias, gb)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::Sum(input) => {
                with!(*input, |gi| gi.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(input) => {
                let s = g[0] / T::of(self.val(*input).numel() as f64);
                with!(*input, |gi| gi.iter_mut().for_each(|x| *x += s));
            }
            Op::SquaredError(a, b) => {
                let av = &self.val(*a).data;
                let bv = &self.val(*b).data;
                let two = T::of(2.0);
                with!(*a, |ga| for i in 0..ga.len() {
                    ga[i] += two * (av[i] - bv[i]) * g[i];
                });
                with!(*b, |gb| for i in 0..gb.len() {
                    gb[i] -= two * (av[i] - bv[i]) * g[i];
                });
            }
            Op::DisplacementMean { pred, target, dist } => {
                let p = &self.val(*pred).data;
                let q = &self.val(*target).data;
                let s = g[0] / T::of(dist.len() as f64);
                with!(*pred, |gp| for (i, d) in dist.iter().enumerate() {
                    gp[2 * i] += s * (p[2 * i] - q[2 * i]) / *d;
                    gp[2 * i + 1] += s * (p[2 * i + 1] - q[2 * i + 1]) / *d;
                });
                with!(*target, |gq| for (i, d) in dist.iter().enumerate() {
                    gq[2 * i] -= s * (p[2 * i] - q[2 * i]) / *d;
                    gq[2 * i + 1] -= s * (p[2 * i + 1] - q[2 * i + 1]) / *d;
                });
            }
            Op::Upsample(input) => {
                let k = self.val(*input).shape[self.val(*input).shape.len() - 2];
                let half = T::of(0.5);
                with!(*input, |gi| for (gt, dst) in
                    g.chunks_exact(4 * k).zip(gi.chunks_exact_mut(2 * k))
                {
                    for i in 0..k {
                        for c in 0..2 {
                            let mid = gt[4 * i + c] * half;
                            dst[2 * i + c] += gt[4 * i + 2 + c] + mid;
                            if i > 0 {
                                dst[2 * (i - 1) + c] += mid;
                            }
                        }
                    }
                });
            }
        }
    }
}
