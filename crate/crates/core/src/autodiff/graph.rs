use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, axis_split, ConvDims};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Cached values from a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention for running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    BiasAdd { x: Var, bias: Var, axis: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, dims: ConvDims },
    AvgPool2(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, inv_std: Vec<T>, mean: Vec<T> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize, softmax: Vec<T> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Gather { x: Var, indices: Vec<usize> },
    L2Norm(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Each op computes its value eagerly when recorded; [`Graph::gradient`]
/// replays the tape in reverse. Graphs are cheap and meant to be rebuilt for
/// every forward pass.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// A graph that rejects any op producing NaN or infinity.
    pub fn strict() -> Self {
        Graph {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a)?.zip_map(self.value(b)?, f)?;
        self.record(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x)?.map(|v| v * c);
        self.record("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.map(|v| v * v);
        self.record("square", value, Op::Square(x), &[x])
    }

    /// Adds a vector along `axis`, broadcasting over every other axis.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let bs = self.shape(bias)?;
        if axis >= xs.len() || bs != [xs[axis]] {
            return Err(Error::shape("bias_add", format!("bias {:?} on axis {} of {:?}", bs, axis, xs)));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let b = self.value(bias)?.data();
        let mut out = self.value(x)?.data().to_vec();
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[a];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.record("bias_add", value, Op::BiasAdd { x, bias, axis }, &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a)?.data(), self.value(b)?.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Stride-1 2D convolution with `pad` zeros on each border.
    ///
    /// `x` is `[batch, c_in, h, w]`, `w` is `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x)?, self.shape(w)?);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", xs, ws)));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            pad,
        };
        if dims.height + 2 * pad < dims.kernel || dims.width + 2 * pad < dims.kernel {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let data = kernels::conv2d(self.value(x)?.data(), self.value(w)?.data(), dims);
        let value = Tensor::new(vec![dims.batch, dims.c_out, dims.out_height(), dims.out_width()], data)?;
        self.record("conv2d", value, Op::Conv2d { x, w, dims }, &[x, w])
    }

    /// 2×2 average pooling with stride 2 over NCHW input of even height and width.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{:?}", xs)));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x)?.data();
        let quarter = T::lit(0.25);
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = p * h * w + 2 * oy * w + 2 * ox;
                    out[(p * oh + oy) * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        self.record("avg_pool2", value, Op::AvgPool2(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let value = self.value(x)?.map(|v| if v > T::zero() { v } else { v * slope });
        self.record("leaky_relu", value, Op::LeakyRelu(x, slope), &[x])
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x)?;
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input rank {} (need 2 or 4)", xs.len())));
        }
        let c = xs[1];
        if self.shape(gamma)? != [c] || self.shape(beta)? != [c] {
            return Err(Error::shape("batch_norm", format!("affine params must be [{}]", c)));
        }
        Ok(axis_split(xs, 1))
    }

    /// Batch normalization over every axis except 1, using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (outer, c, inner) = self.bn_layout(x, gamma, beta)?;
        let m = outer * inner;
        if m < 2 {
            return Err(Error::shape("batch_norm", "training mode needs more than one value per channel"));
        }
        let xs = self.shape(x)?.to_vec();
        let src = self.value(x)?.data();
        let (g, b) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let mf = T::lit(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for a in 0..c {
                let base = (o * c + a) * inner;
                for &v in &src[base..base + inner] {
                    mean[a] += v;
                }
            }
        }
        for mu in &mut mean {
            *mu = *mu / mf;
        }
        for o in 0..outer {
            for a in 0..c {
                let base = (o * c + a) * inner;
                for &v in &src[base..base + inner] {
                    let d = v - mean[a];
                    var[a] += d * d;
                }
            }
        }
        let unbiased: Vec<T> = var.iter().map(|&s| s / T::lit((m - 1) as f64)).collect();
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / mf + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for a in 0..c {
                let base = (o * c + a) * inner;
                for i in base..base + inner {
                    xhat[i] = (src[i] - mean[a]) * inv_std[a];
                    out[i] = g[a] * xhat[i] + b[a];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let stats = BatchStats { mean, var: unbiased };
        let v = self.record(
            "batch_norm",
            value,
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (outer, c, inner) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length mismatch"));
        }
        let xs = self.shape(x)?.to_vec();
        let src = self.value(x)?.data();
        let (g, b) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for a in 0..c {
                let base = (o * c + a) * inner;
                for i in base..base + inner {
                    out[i] = g[a] * ((src[i] - mean[a]) * inv_std[a]) + b[a];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            inv_std,
            mean: mean.to_vec(),
        };
        self.record("batch_norm", value, op, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.reshape(shape)?;
        self.record("reshape", value, Op::Reshape(x), &[x])
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x)?;
        let rows = xs.first().copied().unwrap_or(1);
        let cols = xs.iter().skip(1).product();
        self.reshape(x, &[rows, cols])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.data().iter().copied().fold(T::zero(), |a, b| a + b);
        self.record("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().copied().fold(T::zero(), |a, b| a + b) / T::lit(t.numel() as f64);
        self.record("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("sum_axis", format!("axis {} of {:?}", axis, xs)));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let src = self.value(x)?.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + a) * inner + i];
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.record("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    /// `log Σ exp` over `axis` with max-subtraction, removing the axis.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("logsumexp", format!("axis {} of {:?}", axis, xs)));
        }
        if xs[axis] == 0 {
            return Err(Error::shape("logsumexp", "empty reduction axis"));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let (out, softmax) = kernels::logsumexp(self.value(x)?.data(), outer, n, inner);
        let mut shape = xs;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.record("logsumexp", value, Op::LogSumExp { x, axis, softmax }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits)?;
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", ls, labels.len()),
            ));
        }
        let (b, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, c)));
        }
        let (lse, probs) = kernels::logsumexp(self.value(logits)?.data(), b, c, 1);
        let src = self.value(logits)?.data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            total += lse[i] - src[i * c + y];
        }
        let value = Tensor::scalar(total / T::lit(b as f64));
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("softmax_cross_entropy", value, op, &[logits])
    }

    /// Picks `x[i, indices[i]]` for each row of a `[batch, n]` tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xs = self.shape(x)?;
        if xs.len() != 2 || xs[0] != indices.len() {
            return Err(Error::shape("gather", format!("{:?} with {} indices", xs, indices.len())));
        }
        let n = xs[1];
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("index {} out of range for {} columns", bad, n)));
        }
        let src = self.value(x)?.data();
        let out: Vec<T> = indices.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let value = Tensor::from_vec(out);
        self.record("gather", value, Op::Gather { x, indices: indices.to_vec() }, &[x])
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.data().iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        self.record("l2_norm", Tensor::scalar(s), Op::L2Norm(x), &[x])
    }

    /// Reverse-mode gradient of a scalar output with respect to `wrt`.
    ///
    /// Variables that do not influence `output` (or were created with
    /// [`Graph::constant`]) receive zero gradients of their own shape.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let out_node = self.node(output)?;
        if out_node.value.numel() != 1 || !out_node.value.shape().is_empty() {
            return Err(Error::NotScalar(out_node.value.shape().to_vec()));
        }
        for &w in wrt {
            self.node(w)?;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.index).map(|_| None).collect();
        grads[output.index] = Some(vec![T::one()]);

        for idx in (0..=output.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.nodes[w.index].value.shape();
                match grads.get(w.index).and_then(|g| g.as_ref()) {
                    Some(g) if self.nodes[w.index].requires_grad => {
                        Tensor::new(shape.to_vec(), g.clone()).expect("gradient shape")
                    }
                    _ => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.index].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.index].requires_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                acc(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&d| d * *c).collect()),
            Op::Square(x) => {
                let two = T::lit(2.0);
                acc(*x, g.iter().zip(val(*x)).map(|(&d, &v)| two * v * d).collect());
            }
            Op::BiasAdd { x, bias, axis } => {
                let xs = self.nodes[x.index].value.shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let mut db = vec![T::zero(); n];
                for o in 0..outer {
                    for (a, dba) in db.iter_mut().enumerate() {
                        let base = (o * n + a) * inner;
                        for &d in &g[base..base + inner] {
                            *dba += d;
                        }
                    }
                }
                acc(*x, g.to_vec());
                acc(*bias, db);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.index].value.shape(), self.nodes[b.index].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.index].requires_grad {
                    acc(*a, kernels::matmul_grad_a(g, val(*b), m, k, n));
                }
                if self.nodes[b.index].requires_grad {
                    acc(*b, kernels::matmul_grad_b(g, val(*a), m, k, n));
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (dx, dw) = kernels::conv2d_grad(val(*x), val(*w), g, *dims);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::AvgPool2(x) => {
                let xs = self.nodes[x.index].value.shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = g[(p * oh + oy) * ow + ox] * quarter;
                            let i = p * h * w + 2 * oy * w + 2 * ox;
                            dx[i] += d;
                            dx[i + 1] += d;
                            dx[i + w] += d;
                            dx[i + w + 1] += d;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { d * *slope })
                    .collect(),
            ),
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let xs = self.nodes[x.index].value.shape();
                let (outer, c, inner) = axis_split(xs, 1);
                let mf = T::lit((outer * inner) as f64);
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for o in 0..outer {
                    for a in 0..c {
                        let base = (o * c + a) * inner;
                        for i in base..base + inner {
                            dgamma[a] += g[i] * xhat[i];
                            dbeta[a] += g[i];
                        }
                    }
                }
                if self.nodes[x.index].requires_grad {
                    // dxhat = g * gamma; Σdxhat = gamma * dbeta; Σ dxhat·xhat = gamma * dgamma
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for a in 0..c {
                            let base = (o * c + a) * inner;
                            let k = inv_std[a] / mf;
                            for i in base..base + inner {
                                let dxhat = g[i] * gam[a];
                                dx[i] = k * (mf * dxhat - gam[a] * dbeta[a] - xhat[i] * gam[a] * dgamma[a]);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, mean } => {
                let xs = self.nodes[x.index].value.shape();
                let (outer, c, inner) = axis_split(xs, 1);
                let (src, gam) = (val(*x), val(*gamma));
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for o in 0..outer {
                    for a in 0..c {
                        let base = (o * c + a) * inner;
                        for i in base..base + inner {
                            dx[i] = g[i] * gam[a] * inv_std[a];
                            dgamma[a] += g[i] * (src[i] - mean[a]) * inv_std[a];
                            dbeta[a] += g[i];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.index].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.index].value.numel();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SumAxis { x, axis } => {
                let xs = self.nodes[x.index].value.shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSumExp { x, axis, softmax } => {
                let xs = self.nodes[x.index].value.shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let mut dx = vec![T::zero(); softmax.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            let j = (o * n + a) * inner + i;
                            dx[j] = g[o * inner + i] * softmax[j];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let k = g[0] / T::lit(b as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= k;
                }
                acc(*logits, dx);
            }
            Op::Gather { x, indices } => {
                let n = self.nodes[x.index].value.shape()[1];
                let mut dx = vec![T::zero(); indices.len() * n];
                for (i, &j) in indices.iter().enumerate() {
                    dx[i * n + j] = g[i];
                }
                acc(*x, dx);
            }
            Op::L2Norm(x) => {
                let norm = node.value.data()[0];
                let dx = if norm > T::zero() {
                    val(*x).iter().map(|&v| g[0] * v / norm).collect()
                } else {
                    vec![T::zero(); self.nodes[x.index].value.numel()]
                };
                acc(*x, dx);
            }
        }
    }
}
