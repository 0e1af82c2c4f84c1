//! Differentiable primitives. Each method records one tape entry.

use crate::graph::BackwardFn;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{broadcast_map, broadcast_shape};
use crate::{Result, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
        }
    }

    fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative expressed through input and output.
    fn grad<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backward<T: Scalar>(
    f: impl Fn(&[T], &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Vec<T>>> + 'static,
) -> BackwardFn<T> {
    Box::new(f)
}

impl<'g, T: Scalar> Var<'g, T> {
    fn wrap(&self, id: usize) -> Var<'g, T> {
        Var {
            graph: self.graph,
            id,
        }
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn binary(&self, rhs: &Var<'g, T>, kind: Binary) -> Result<Var<'g, T>> {
        self.same_graph(rhs);
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let id = self.graph.apply(op, &[self.id, rhs.id], |v, needs_backward| {
            let (a, b) = (v[0], v[1]);
            let f = move |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                let out = Tensor::from_parts(a.shape().to_vec(), data);
                let bw = needs_backward.then(|| {
                    backward(move |g: &[T], inp, _out, needs| {
                        let (a, b) = (inp[0].data(), inp[1].data());
                        let ga = needs[0].then(|| match kind {
                            Binary::Add | Binary::Sub => g.to_vec(),
                            Binary::Mul => g.iter().zip(b).map(|(&g, &y)| g * y).collect(),
                        });
                        let gb = needs[1].then(|| match kind {
                            Binary::Add => g.to_vec(),
                            Binary::Sub => g.iter().map(|&g| -g).collect(),
                            Binary::Mul => g.iter().zip(a).map(|(&g, &x)| g * x).collect(),
                        });
                        vec![ga, gb]
                    })
                });
                return Ok((out, bw));
            }
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
            })?;
            let map_a = broadcast_map(a.shape(), &shape);
            let map_b = broadcast_map(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let data = map_a.iter().zip(&map_b).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            let out = Tensor::from_parts(shape, data);
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], inp, _out, needs| {
                    let (a, b) = (inp[0], inp[1]);
                    let ga = needs[0].then(|| {
                        let mut ga = vec![T::zero(); a.numel()];
                        for (k, &gk) in g.iter().enumerate() {
                            ga[map_a[k]] += match kind {
                                Binary::Add | Binary::Sub => gk,
                                Binary::Mul => gk * b.data()[map_b[k]],
                            };
                        }
                        ga
                    });
                    let gb = needs[1].then(|| {
                        let mut gb = vec![T::zero(); b.numel()];
                        for (k, &gk) in g.iter().enumerate() {
                            gb[map_b[k]] += match kind {
                                Binary::Add => gk,
                                Binary::Sub => -gk,
                                Binary::Mul => gk * a.data()[map_a[k]],
                            };
                        }
                        gb
                    });
                    vec![ga, gb]
                })
            });
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Element-wise sum with broadcasting.
    pub fn add(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, Binary::Sub)
    }

    /// Element-wise (Hadamard) product with broadcasting.
    pub fn mul(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, Binary::Mul)
    }

    fn unary(&self, kind: Unary) -> Result<Var<'g, T>> {
        let id = self.graph.apply(kind.name(), &[self.id], |v, needs_backward| {
            let out = v[0].map(|x| kind.eval(x));
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], inp, out, _| {
                    let gx = g
                        .iter()
                        .zip(inp[0].data().iter().zip(out.data()))
                        .map(|(&g, (&x, &y))| g * kind.grad(x, y))
                        .collect();
                    vec![Some(gx)]
                })
            });
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.unary(Unary::Relu)
    }

    pub fn tanh(&self) -> Result<Var<'g, T>> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.unary(Unary::Exp)
    }

    /// `s · x`
    pub fn scale(&self, s: f64) -> Result<Var<'g, T>> {
        let s = T::cast(s);
        let id = self.graph.apply("scale", &[self.id], |v, needs_backward| {
            let out = v[0].map(|x| x * s);
            let bw = needs_backward
                .then(|| backward(move |g: &[T], _, _, _| vec![Some(g.iter().map(|&g| g * s).collect())]));
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'g, T>> {
        let s = T::cast(s);
        let id = self.graph.apply("add_scalar", &[self.id], |v, needs_backward| {
            let out = v[0].map(|x| x + s);
            let bw = needs_backward.then(|| backward(move |g: &[T], _, _, _| vec![Some(g.to_vec())]));
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    /// `s · x` where `mask` is set and `0` elsewhere.
    pub fn masked_scale(&self, mask: &[bool], s: f64) -> Result<Var<'g, T>> {
        let s = T::cast(s);
        let mask = mask.to_vec();
        let id = self.graph.apply("masked_scale", &[self.id], |v, needs_backward| {
            if mask.len() != v[0].numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_scale",
                    lhs: v[0].shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let data = v[0]
                .data()
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| if m { x * s } else { T::zero() })
                .collect();
            let out = Tensor::from_parts(v[0].shape().to_vec(), data);
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| {
                    let gx = g
                        .iter()
                        .zip(&mask)
                        .map(|(&g, &m)| if m { g * s } else { T::zero() })
                        .collect();
                    vec![Some(gx)]
                })
            });
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(rhs);
        let id = self.graph.apply("matmul", &[self.id, rhs.id], |v, needs_backward| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], inp, _, needs| {
                    let ga = needs[0].then(|| {
                        let mut ga = vec![T::zero(); m * k];
                        kernels::gemm_nt(m, n, k, g, inp[1].data(), &mut ga);
                        ga
                    });
                    let gb = needs[1].then(|| {
                        let mut gb = vec![T::zero(); k * n];
                        kernels::gemm_tn(k, m, n, inp[0].data(), g, &mut gb);
                        gb
                    });
                    vec![ga, gb]
                })
            });
            Ok((Tensor::from_parts(vec![m, n], c), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let id = self.graph.apply("transpose", &[self.id], |v, needs_backward| {
            let x = v[0];
            if x.rank() != 2 {
                return Err(TensorError::InvalidShape {
                    op: "transpose",
                    shape: x.shape().to_vec(),
                    reason: "expected rank 2".into(),
                });
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let out = Tensor::from_parts(vec![c, r], kernels::transpose(r, c, x.data()));
            let bw = needs_backward
                .then(|| backward(move |g: &[T], _, _, _| vec![Some(kernels::transpose(c, r, g))]));
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let shape = shape.to_vec();
        let id = self.graph.apply("reshape", &[self.id], |v, needs_backward| {
            let out = v[0].clone().reshape(&shape)?;
            let bw = needs_backward.then(|| backward(|g: &[T], _, _, _| vec![Some(g.to_vec())]));
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Right-aligned broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let shape = shape.to_vec();
        let id = self.graph.apply("broadcast", &[self.id], |v, needs_backward| {
            let x = v[0];
            if broadcast_shape(x.shape(), &shape).as_deref() != Some(shape.as_slice()) {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            let map = broadcast_map(x.shape(), &shape);
            let data = map.iter().map(|&i| x.data()[i]).collect();
            let n_in = x.numel();
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| {
                    let mut gx = vec![T::zero(); n_in];
                    for (&i, &gk) in map.iter().zip(g) {
                        gx[i] += gk;
                    }
                    vec![Some(gx)]
                })
            });
            Ok((Tensor::from_parts(shape.clone(), data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        for p in parts {
            first.same_graph(p);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let id = first.graph.apply("concat", &ids, |v, needs_backward| {
            let base = v[0].shape();
            check_axis("concat", axis, base.len())?;
            for t in v {
                let s = t.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.to_vec(),
                        rhs: s.to_vec(),
                    });
                }
            }
            let (outer, _, inner) = split_at_axis(base, axis);
            let extents: Vec<usize> = v.iter().map(|t| t.shape()[axis]).collect();
            let total: usize = extents.iter().sum();
            let mut shape = base.to_vec();
            shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (t, &e) in v.iter().zip(&extents) {
                    data.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
                }
            }
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, needs| {
                    let mut out: Vec<Option<Vec<T>>> = needs
                        .iter()
                        .zip(&extents)
                        .map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner)))
                        .collect();
                    for o in 0..outer {
                        let mut offset = o * total * inner;
                        for (slot, &e) in out.iter_mut().zip(&extents) {
                            if let Some(buf) = slot {
                                buf.extend_from_slice(&g[offset..offset + e * inner]);
                            }
                            offset += e * inner;
                        }
                    }
                    out
                })
            });
            Ok((Tensor::from_parts(shape, data), bw))
        })?;
        Ok(first.wrap(id))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let id = self.graph.apply("narrow", &[self.id], |v, needs_backward| {
            let x = v[0];
            check_axis("narrow", axis, x.rank())?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(TensorError::InvalidShape {
                    op: "narrow",
                    shape: x.shape().to_vec(),
                    reason: format!("range {start}..{} on axis {axis}", start + len),
                });
            }
            let (outer, extent, inner) = split_at_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let n_in = x.numel();
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| {
                    let mut gx = vec![T::zero(); n_in];
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        gx[base..base + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    vec![Some(gx)]
                })
            });
            Ok((Tensor::from_parts(shape, data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Sum over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let axes = axes.to_vec();
        let id = self.graph.apply("sum_axes", &[self.id], |v, needs_backward| {
            let x = v[0];
            for &a in &axes {
                check_axis("sum_axes", a, x.rank())?;
            }
            let mut shape = x.shape().to_vec();
            for &a in &axes {
                shape[a] = 1;
            }
            let map = broadcast_map(&shape, x.shape());
            let mut data = vec![T::zero(); shape.iter().product()];
            for (&i, &xv) in map.iter().zip(x.data()) {
                data[i] += xv;
            }
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| vec![Some(map.iter().map(|&i| g[i]).collect())])
            });
            Ok((Tensor::from_parts(shape, data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Mean over `axes`, keeping them as extent-1 axes (global average pooling
    /// when the axes are the spatial ones).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut count = 1usize;
        for &a in axes {
            check_axis("mean_axes", a, shape.len())?;
            count *= shape[a];
        }
        self.sum_axes(axes)?.scale(1.0 / count as f64)
    }

    /// Mean over the leading (channel) axis: `[C, ...] -> [1, ...]`.
    pub fn channel_mean(&self) -> Result<Var<'g, T>> {
        self.mean_axes(&[0])
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'g, T>> {
        let id = self.graph.apply("sum", &[self.id], |v, needs_backward| {
            let n = v[0].numel();
            let s: T = v[0].data().iter().copied().sum();
            let bw = needs_backward.then(|| backward(move |g: &[T], _, _, _| vec![Some(vec![g[0]; n])]));
            Ok((Tensor::scalar(s), bw))
        })?;
        Ok(self.wrap(id))
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let id = self.graph.apply("softmax", &[self.id], |v, needs_backward| {
            let x = v[0];
            check_axis("softmax", axis, x.rank())?;
            let (outer, extent, inner) = split_at_axis(x.shape(), axis);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * extent + e) * inner + i;
                    let mut max = T::neg_infinity();
                    for e in 0..extent {
                        max = max.max(data[idx(e)]);
                    }
                    let mut total = T::zero();
                    for e in 0..extent {
                        let y = (data[idx(e)] - max).exp();
                        data[idx(e)] = y;
                        total += y;
                    }
                    for e in 0..extent {
                        data[idx(e)] = data[idx(e)] / total;
                    }
                }
            }
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, out, _| {
                    let y = out.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + i;
                            let dot: T = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                            for e in 0..extent {
                                gx[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                            }
                        }
                    }
                    vec![Some(gx)]
                })
            });
            Ok((Tensor::from_parts(x.shape().to_vec(), data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Standardizes every slice along the last axis to zero mean and unit
    /// variance: `(x − μ) / sqrt(σ² + eps)` with the biased variance.
    pub fn standardize(&self, eps: f64) -> Result<Var<'g, T>> {
        let eps = T::cast(eps);
        let id = self.graph.apply("standardize", &[self.id], |v, needs_backward| {
            let x = v[0];
            let n = *x.shape().last().ok_or_else(|| TensorError::InvalidShape {
                op: "standardize",
                shape: vec![],
                reason: "rank 0".into(),
            })?;
            let nt = T::cast(n as f64);
            let rows = x.numel() / n;
            let mut data = vec![T::zero(); x.numel()];
            let mut inv_std = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, &v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
            }
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, out, _| {
                    let y = out.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let mean_g = gr.iter().copied().sum::<T>() / nt;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                        for ((o, &gv), &yv) in gx[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    vec![Some(gx)]
                })
            });
            Ok((Tensor::from_parts(x.shape().to_vec(), data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Instance normalization of `[C, ...spatial]` over the spatial positions
    /// of each channel, followed by the per-channel affine `gamma`, `beta`
    /// (both `[C]`).
    pub fn instance_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "instance_norm",
                shape,
                reason: "expected [C, spatial...]".into(),
            });
        }
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        let mut affine_shape = vec![1; shape.len()];
        affine_shape[0] = c;
        let normed = self.reshape(&[c, n])?.standardize(eps)?.reshape(&shape)?;
        normed
            .mul(&gamma.reshape(&affine_shape)?)?
            .add(&beta.reshape(&affine_shape)?)
    }

    /// Layer normalization of `[N, D]` rows with affine `gamma`, `beta` of `[D]`.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.standardize(eps)?.mul(gamma)?.add(beta)
    }

    /// 2-D convolution of one `[C_in, H, W]` image with `[C_out, C_in, k, k]`
    /// kernels and an optional `[C_out]` bias. Padding is zero padding.
    pub fn conv2d(
        &self,
        weight: &Var<'g, T>,
        bias: Option<&Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        self.same_graph(weight);
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_graph(b);
            ids.push(b.id);
        }
        let id = self.graph.apply("conv2d", &ids, |v, needs_backward| {
            let (x, w) = (v[0], v[1]);
            let ws = w.shape();
            if x.rank() != 3 || ws.len() != 4 || ws[1] != x.shape()[0] || ws[2] != ws[3] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let c_out = ws[0];
            if let Some(b) = v.get(2) {
                if b.shape() != [c_out] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        lhs: ws.to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
            }
            let xs = x.shape();
            let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], stride, padding).ok_or_else(|| {
                TensorError::InvalidShape {
                    op: "conv2d",
                    shape: xs.to_vec(),
                    reason: format!("kernel {} stride {stride} padding {padding} does not fit", ws[2]),
                }
            })?;
            let positions = geom.positions();
            let patch = geom.patch_len();
            let cols = if ws[2] == 1 && stride == 1 && padding == 0 {
                x.data().to_vec()
            } else {
                kernels::im2col(&geom, x.data())
            };
            let mut out = vec![T::zero(); c_out * positions];
            if let Some(b) = v.get(2) {
                for (row, &bv) in out.chunks_exact_mut(positions).zip(b.data()) {
                    row.fill(bv);
                }
            }
            kernels::gemm_nn(c_out, patch, positions, w.data(), &cols, &mut out);
            let shape = vec![c_out, geom.out_height, geom.out_width];
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], inp, _, needs| {
                    let gx = needs[0].then(|| {
                        let mut gcols = vec![T::zero(); patch * positions];
                        kernels::gemm_tn(patch, c_out, positions, inp[1].data(), g, &mut gcols);
                        if geom.kernel == 1 && geom.stride == 1 && geom.padding == 0 {
                            gcols
                        } else {
                            kernels::col2im(&geom, &gcols)
                        }
                    });
                    let gw = needs[1].then(|| {
                        let mut gw = vec![T::zero(); c_out * patch];
                        kernels::gemm_nt(c_out, positions, patch, g, &cols, &mut gw);
                        gw
                    });
                    let mut res = vec![gx, gw];
                    if needs.len() == 3 {
                        res.push(needs[2].then(|| {
                            g.chunks_exact(positions).map(|row| row.iter().copied().sum()).collect()
                        }));
                    }
                    res
                })
            });
            Ok((Tensor::from_parts(shape, out), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Per-position linear map over the leading channel axis:
    /// `[C_in, ...] -> [C_out, ...]` with weight `[C_out, C_in]`, bias `[C_out]`.
    pub fn conv1x1(&self, weight: &Var<'g, T>, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(weight);
        self.same_graph(bias);
        let id = self.graph.apply("conv1x1", &[self.id, weight.id, bias.id], |v, needs_backward| {
            let (x, w, b) = (v[0], v[1], v[2]);
            let xs = x.shape();
            let ws = w.shape();
            if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] || b.shape() != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1x1",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let (c_out, c_in) = (ws[0], ws[1]);
            let n = x.numel() / c_in;
            let mut out = vec![T::zero(); c_out * n];
            for (row, &bv) in out.chunks_exact_mut(n).zip(b.data()) {
                row.fill(bv);
            }
            kernels::gemm_nn(c_out, c_in, n, w.data(), x.data(), &mut out);
            let mut shape = xs.to_vec();
            shape[0] = c_out;
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], inp, _, needs| {
                    let gx = needs[0].then(|| {
                        let mut gx = vec![T::zero(); c_in * n];
                        kernels::gemm_tn(c_in, c_out, n, inp[1].data(), g, &mut gx);
                        gx
                    });
                    let gw = needs[1].then(|| {
                        let mut gw = vec![T::zero(); c_out * c_in];
                        kernels::gemm_nt(c_out, n, c_in, g, inp[0].data(), &mut gw);
                        gw
                    });
                    let gb = needs[2]
                        .then(|| g.chunks_exact(n).map(|row| row.iter().copied().sum()).collect());
                    vec![gx, gw, gb]
                })
            });
            Ok((Tensor::from_parts(shape, out), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Row-wise affine map of `[N, D_in]` by weight `[D_out, D_in]` and bias
    /// `[D_out]`: `x Wᵀ + b`.
    pub fn linear(&self, weight: &Var<'g, T>, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.transpose()?.conv1x1(weight, bias)?.transpose()
    }

    /// Rows of a `[V, D]` table selected by `ids`: `[ids.len(), D]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let ids = ids.to_vec();
        let id = self.graph.apply("gather_rows", &[self.id], |v, needs_backward| {
            let t = v[0];
            if t.rank() != 2 || ids.is_empty() {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    shape: t.shape().to_vec(),
                    reason: "expected a rank-2 table and at least one id".into(),
                });
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Contract(format!("gather_rows: id {bad} out of range {rows}")));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in &ids {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            let shape = vec![ids.len(), d];
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| {
                    let mut gt = vec![T::zero(); rows * d];
                    for (k, &i) in ids.iter().enumerate() {
                        for (a, &b) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *a += b;
                        }
                    }
                    vec![Some(gt)]
                })
            });
            Ok((Tensor::from_parts(shape, data), bw))
        })?;
        Ok(self.wrap(id))
    }

    /// Per-row cross-entropy of `[N, K]` logits against class indices:
    /// `logsumexp(row) − row[target]`, as an `[N]` tensor.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Var<'g, T>> {
        let targets = targets.to_vec();
        let id = self.graph.apply("cross_entropy", &[self.id], |v, needs_backward| {
            let x = v[0];
            if x.rank() != 2 || x.shape()[0] != targets.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let k = x.shape()[1];
            if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
                return Err(TensorError::Contract(format!("cross_entropy: class {bad} out of range {k}")));
            }
            let mut probs = vec![T::zero(); x.numel()];
            let mut loss = Vec::with_capacity(targets.len());
            for (r, &t) in targets.iter().enumerate() {
                let row = &x.data()[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + total.ln();
                for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
                loss.push(lse - row[t]);
            }
            let out = Tensor::from_parts(vec![targets.len()], loss);
            let bw = needs_backward.then(|| {
                backward(move |g: &[T], _, _, _| {
                    let mut gx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gx[r * k + t] -= T::one();
                        for v in &mut gx[r * k..(r + 1) * k] {
                            *v *= g[r];
                        }
                    }
                    vec![Some(gx)]
                })
            });
            Ok((out, bw))
        })?;
        Ok(self.wrap(id))
    }
}
