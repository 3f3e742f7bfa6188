use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        /// im2col buffer per batch item, `(3·C_in) × T`.
        cols: Vec<F>,
    },
    InstanceNorm {
        input: usize,
        inv_std: Vec<F>,
    },
    Relu {
        input: usize,
    },
    L1 {
        prediction: usize,
        target: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    MeanTime {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: F,
    },
    SelectItems {
        input: usize,
        items: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Operation records in creation order, which is a topological order.
#[derive(Debug)]
pub struct Graph<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split a `[C, T]` or `[B, C, T]` shape into `(B, C, T)`.
fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize), AutodiffError> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("expected [C, T] or [B, C, T], got {shape:?}"),
        }),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        v.index
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[self.idx(v)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[self.idx(v)].as_deref()
    }

    /// Record a tensor as a leaf; it is differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    /// Record a tensor as a constant regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.values.clone(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<Var, AutodiffError> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, false, Op::Leaf))
    }

    /// Add the gradient accumulated for `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![F::zero(); t.numel()]),
        }
    }

    /// `out[o,t] = bias[o] + Σ_{c,k} weight[o,c,k] · in[c, t+k-1]`, zero
    /// padded so the temporal length is preserved.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (b, c_in, t) = batch_dims(self.shape(input), "conv1d")?;
        let (c_out, k) = match *self.shape(weight) {
            [o, c, 3] if c == c_in => (o, 3),
            ref s => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("weight {s:?} incompatible with {c_in} input channels, kernel 3"),
                })
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                detail: format!("bias {:?} for {c_out} output channels", self.shape(bias)),
            });
        }
        let rows = c_in * k;
        let x = self.value(input);
        let mut cols = vec![F::zero(); b * rows * t];
        for item in 0..b {
            let xb = &x[item * c_in * t..(item + 1) * c_in * t];
            let cb = &mut cols[item * rows * t..(item + 1) * rows * t];
            for c in 0..c_in {
                let src = &xb[c * t..(c + 1) * t];
                // tap 0 reads t-1, tap 1 reads t, tap 2 reads t+1
                cb[(c * 3) * t + 1..(c * 3 + 1) * t].copy_from_slice(&src[..t - 1]);
                cb[(c * 3 + 1) * t..(c * 3 + 2) * t].copy_from_slice(src);
                cb[(c * 3 + 2) * t..(c * 3 + 3) * t - 1].copy_from_slice(&src[1..]);
            }
        }
        let w = self.value(weight);
        let bias_v = self.value(bias);
        let mut out = vec![F::zero(); b * c_out * t];
        for item in 0..b {
            let ob = &mut out[item * c_out * t..(item + 1) * c_out * t];
            for (o, row) in ob.chunks_exact_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v = bias_v[o]);
            }
            // SAFETY: W is c_out × rows, cols_b is rows × t, out_b is c_out × t.
            unsafe {
                F::gemm(
                    c_out,
                    rows,
                    t,
                    F::one(),
                    w.as_ptr(),
                    rows as isize,
                    1,
                    cols[item * rows * t..].as_ptr(),
                    t as isize,
                    1,
                    F::one(),
                    ob.as_mut_ptr(),
                    t as isize,
                    1,
                );
            }
        }
        let shape = if self.shape(input).len() == 2 {
            vec![c_out, t]
        } else {
            vec![b, c_out, t]
        };
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        let op = Op::Conv1d {
            input: self.idx(input),
            weight: self.idx(weight),
            bias: self.idx(bias),
            cols,
        };
        Ok(self.push(shape, out, rg, op))
    }

    /// Per-channel standardization over time with biased variance; no
    /// affine parameters.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (b, c, t) = batch_dims(self.shape(input), "instance_norm")?;
        let x = self.value(input);
        let n = F::lit(t as f64);
        let eps = F::lit(eps);
        let mut out = vec![F::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(b * c);
        for (row, dst) in x.chunks_exact(t).zip(out.chunks_exact_mut(t)) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let s = F::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        let op = Op::InstanceNorm {
            input: self.idx(input),
            inv_std,
        };
        Ok(self.push(shape, out, rg, op))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        let op = Op::Relu {
            input: self.idx(input),
        };
        self.push(shape, out, rg, op)
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, prediction: Var, target: Var) -> Result<Var, AutodiffError> {
        if self.shape(prediction) != self.shape(target) {
            return Err(AutodiffError::ShapeMismatch {
                op: "l1_loss",
                detail: format!("{:?} vs {:?}", self.shape(prediction), self.shape(target)),
            });
        }
        let p = self.value(prediction);
        let q = self.value(target);
        let total: F = p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum();
        let loss = total / F::lit(p.len() as f64);
        let rg = self.requires_grad(prediction) || self.requires_grad(target);
        let op = Op::L1 {
            prediction: self.idx(prediction),
            target: self.idx(target),
        };
        Ok(self.push(vec![1], vec![loss], rg, op))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    ///
    /// `logits` is `[n]` with one label or `[B, n]` with `B` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (b, n) = match *self.shape(logits) {
            [n] => (1, n),
            [b, n] => (b, n),
            ref s => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("logits shape {s:?}"),
                })
            }
        };
        if labels.len() != b {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: n });
        }
        let z = self.value(logits);
        let mut probs = vec![F::zero(); b * n];
        let mut total = F::zero();
        for (item, &label) in labels.iter().enumerate() {
            let row = &z[item * n..(item + 1) * n];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum_exp: F = row.iter().map(|&v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            total += log_norm - row[label];
            for (p, &v) in probs[item * n..(item + 1) * n].iter_mut().zip(row) {
                *p = (v - log_norm).exp();
            }
        }
        let loss = total / F::lit(b as f64);
        let rg = self.requires_grad(logits);
        let op = Op::CrossEntropy {
            logits: self.idx(logits),
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], rg, op))
    }

    /// Average over the trailing (time) axis: `[C, T] → [C]`, `[B, C, T] → [B, C]`.
    pub fn mean_time(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let (_, _, t) = batch_dims(self.shape(input), "mean_time")?;
        let n = F::lit(t as f64);
        let out = self
            .value(input)
            .chunks_exact(t)
            .map(|row| row.iter().copied().sum::<F>() / n)
            .collect();
        let mut shape = self.shape(input).to_vec();
        shape.pop();
        let rg = self.requires_grad(input);
        let op = Op::MeanTime {
            input: self.idx(input),
        };
        Ok(self.push(shape, out, rg, op))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().copied().sum();
        let rg = self.requires_grad(input);
        let op = Op::Sum {
            input: self.idx(input),
        };
        self.push(vec![1], vec![total], rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let op = Op::Add {
            a: self.idx(a),
            b: self.idx(b),
        };
        Ok(self.push(shape, out, rg, op))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = F::lit(factor);
        let out = self.value(input).iter().map(|&v| v * f).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        let op = Op::Scale {
            input: self.idx(input),
            factor: f,
        };
        self.push(shape, out, rg, op)
    }

    /// Gather items along the leading batch axis.
    pub fn select_items(&mut self, input: Var, items: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(input).to_vec();
        let b = shape[0];
        if shape.len() < 2 || items.is_empty() || items.iter().any(|&i| i >= b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_items",
                detail: format!("items {items:?} from shape {shape:?}"),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let x = self.value(input);
        let mut out = Vec::with_capacity(items.len() * stride);
        for &i in items {
            out.extend_from_slice(&x[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = shape;
        out_shape[0] = items.len();
        let rg = self.requires_grad(input);
        let op = Op::SelectItems {
            input: self.idx(input),
            items: items.to_vec(),
        };
        Ok(self.push(out_shape, out, rg, op))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedGraph);
        }
        let root = loss.index;
        if self.nodes[root].value.len() != 1 {
            return Err(AutodiffError::NotScalar(self.nodes[root].shape.clone()));
        }
        if !self.nodes[root].requires_grad {
            return Err(AutodiffError::DetachedGraph);
        }

        let mut pending: Vec<Option<Vec<F>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(vec![F::one()]);
        for i in (0..=root).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], pending: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut send = |j: usize, f: &dyn Fn(&mut [F])| {
            let slot = pending[j].get_or_insert_with(|| vec![F::zero(); nodes[j].value.len()]);
            f(slot);
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                cols,
            } => {
                let (b, c_in, t) = batch_dims(&nodes[*input].shape, "conv1d").expect("recorded");
                let c_out = nodes[*weight].shape[0];
                let rows = c_in * 3;
                if wants(*bias) {
                    send(*bias, &|db| {
                        for item in 0..b {
                            for (o, acc) in db.iter_mut().enumerate() {
                                let start = (item * c_out + o) * t;
                                *acc += g[start..start + t].iter().copied().sum::<F>();
                            }
                        }
                    });
                }
                if wants(*weight) {
                    send(*weight, &|dw| {
                        for item in 0..b {
                            // dW += dY_b · cols_bᵀ
                            // SAFETY: dY_b is c_out × t, cols_bᵀ is t × rows.
                            unsafe {
                                F::gemm(
                                    c_out,
                                    t,
                                    rows,
                                    F::one(),
                                    g[item * c_out * t..].as_ptr(),
                                    t as isize,
                                    1,
                                    cols[item * rows * t..].as_ptr(),
                                    1,
                                    t as isize,
                                    F::one(),
                                    dw.as_mut_ptr(),
                                    rows as isize,
                                    1,
                                );
                            }
                        }
                    });
                }
                if wants(*input) {
                    let w = &nodes[*weight].value;
                    send(*input, &|dx| {
                        let mut dcols = vec![F::zero(); rows * t];
                        for item in 0..b {
                            // dcols = Wᵀ · dY_b
                            // SAFETY: Wᵀ is rows × c_out, dY_b is c_out × t.
                            unsafe {
                                F::gemm(
                                    rows,
                                    c_out,
                                    t,
                                    F::one(),
                                    w.as_ptr(),
                                    1,
                                    rows as isize,
                                    g[item * c_out * t..].as_ptr(),
                                    t as isize,
                                    1,
                                    F::zero(),
                                    dcols.as_mut_ptr(),
                                    t as isize,
                                    1,
                                );
                            }
                            let dxb = &mut dx[item * c_in * t..(item + 1) * c_in * t];
                            for c in 0..c_in {
                                let dst = &mut dxb[c * t..(c + 1) * t];
                                let tap0 = &dcols[(c * 3) * t..(c * 3 + 1) * t];
                                let tap1 = &dcols[(c * 3 + 1) * t..(c * 3 + 2) * t];
                                let tap2 = &dcols[(c * 3 + 2) * t..(c * 3 + 3) * t];
                                for s in 0..t {
                                    let mut acc = tap1[s];
                                    if s + 1 < t {
                                        acc += tap0[s + 1];
                                    }
                                    if s > 0 {
                                        acc += tap2[s - 1];
                                    }
                                    dst[s] += acc;
                                }
                            }
                        }
                    });
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let t = *node.shape.last().expect("rank >= 2");
                let n = F::lit(t as f64);
                let y = &node.value;
                send(*input, &|dx| {
                    for (r, &s) in inv_std.iter().enumerate() {
                        let range = r * t..(r + 1) * t;
                        let (gy, yy) = (&g[range.clone()], &y[range.clone()]);
                        let mean_g = gy.iter().copied().sum::<F>() / n;
                        let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for ((d, &gi), &yi) in dx[range].iter_mut().zip(gy).zip(yy) {
                            *d += s * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = &nodes[*input].value;
                send(*input, &|dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                        if xi > F::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::L1 { prediction, target } => {
                let p = &nodes[*prediction].value;
                let q = &nodes[*target].value;
                let scale = g[0] / F::lit(p.len() as f64);
                let sign = |a: F, b: F| {
                    if a > b {
                        F::one()
                    } else if a < b {
                        -F::one()
                    } else {
                        F::zero()
                    }
                };
                if wants(*prediction) {
                    send(*prediction, &|d| {
                        for ((di, &a), &b) in d.iter_mut().zip(p).zip(q) {
                            *di += scale * sign(a, b);
                        }
                    });
                }
                if wants(*target) {
                    send(*target, &|d| {
                        for ((di, &a), &b) in d.iter_mut().zip(p).zip(q) {
                            *di -= scale * sign(a, b);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = probs.len() / labels.len();
                let scale = g[0] / F::lit(labels.len() as f64);
                send(*logits, &|d| {
                    for (item, &label) in labels.iter().enumerate() {
                        for k in 0..n {
                            let onehot = if k == label { F::one() } else { F::zero() };
                            d[item * n + k] += scale * (probs[item * n + k] - onehot);
                        }
                    }
                });
            }
            Op::MeanTime { input } => {
                let t = *nodes[*input].shape.last().expect("rank >= 2");
                let inv = F::one() / F::lit(t as f64);
                send(*input, &|dx| {
                    for (row, &gi) in dx.chunks_exact_mut(t).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi * inv);
                    }
                });
            }
            Op::Sum { input } => {
                send(*input, &|dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Add { a, b } => {
                for &j in [a, b] {
                    if wants(j) {
                        send(j, &|d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                    }
                }
            }
            Op::Scale { input, factor } => {
                send(*input, &|dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *factor)
                });
            }
            Op::SelectItems { input, items } => {
                let stride = g.len() / items.len();
                send(*input, &|dx| {
                    for (k, &i) in items.iter().enumerate() {
                        let src = &g[k * stride..(k + 1) * stride];
                        dx[i * stride..(i + 1) * stride]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                });
            }
        }
    }
}
