use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    ScaleRows { x: Var, factors: Vec<f64> },
    MaxNormalize { x: Var, argmax: Vec<Option<usize>> },
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, weight: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    UpsampleBilinear { input: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    WeightedChannelSum { acts: Var, weights: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(Error::shape(
            op,
            format!("expected rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn add_into(slot: &mut [f64], f: impl Fn(usize) -> f64) {
    for (j, s) in slot.iter_mut().enumerate() {
        *s += f(j);
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. Gradients are collected only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), libm::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), libm::log)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = if t.is_empty() {
            0.0
        } else {
            t.data.iter().sum::<f64>() / t.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum over every axis but the first: `N×… -> N`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = *t
            .shape
            .first()
            .ok_or_else(|| Error::shape("sum_per_sample", "scalar input"))?;
        let per = t.len().checked_div(n).unwrap_or(0);
        let data: Vec<f64> = if per == 0 {
            vec![0.0; n]
        } else {
            t.data.chunks_exact(per).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor { shape: vec![n], data };
        Ok(self.push(value, Op::SumPerSample(x), &[x]))
    }

    /// Multiply each leading-axis slice by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.shape.first().copied().unwrap_or(0);
        if n != factors.len() {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for leading extent {n}", factors.len()),
            ));
        }
        let per = t.len().checked_div(n).unwrap_or(0);
        let mut data = t.data.clone();
        if per > 0 {
            for (chunk, &f) in data.chunks_exact_mut(per).zip(factors) {
                chunk.iter_mut().for_each(|v| *v *= f);
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(
            value,
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            &[x],
        ))
    }

    /// Divide each leading-axis slice by its maximum (first index on ties).
    /// Slices whose maximum is not positive pass through unchanged.
    pub fn max_normalize(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = *t
            .shape
            .first()
            .ok_or_else(|| Error::shape("max_normalize", "scalar input"))?;
        let per = t.len().checked_div(n).unwrap_or(0);
        let mut data = t.data.clone();
        let mut argmax = Vec::with_capacity(n);
        if per > 0 {
            for chunk in data.chunks_exact_mut(per) {
                let mut best = 0;
                for (j, &v) in chunk.iter().enumerate() {
                    if v > chunk[best] {
                        best = j;
                    }
                }
                let m = chunk[best];
                if m > 0.0 {
                    chunk.iter_mut().for_each(|v| *v /= m);
                    argmax.push(Some(best));
                } else {
                    argmax.push(None);
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::MaxNormalize { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        rank("matmul", ta, 2)?;
        rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            &ta.data,
            (k as isize, 1),
            &tb.data,
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x · weightᵀ + bias` with `x: N×K`, `weight: O×K`, `bias: O`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        rank("linear", tx, 2)?;
        rank("linear", tw, 2)?;
        let (n, k, o) = (tx.shape[0], tx.shape[1], tw.shape[0]);
        if tw.shape[1] != k || tb.shape != [o] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, weight {:?}, bias {:?}", tx.shape, tw.shape, tb.shape),
            ));
        }
        let mut out = vec![0.0; n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(&tb.data);
        }
        kernels::gemm(
            n,
            k,
            o,
            &tx.data,
            (k as isize, 1),
            &tw.data,
            (1, k as isize),
            1.0,
            &mut out,
        );
        let value = Tensor {
            shape: vec![n, o],
            data: out,
        };
        Ok(self.push(value, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// Zero-padded cross-correlation of `N×I×H×W` with `O×I×K×K`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        rank("conv2d", ti, 4)?;
        rank("conv2d", tk, 4)?;
        let [n, c_in, h, w] = [ti.shape[0], ti.shape[1], ti.shape[2], ti.shape[3]];
        let [c_out, kc, k, k2] = [tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]];
        if kc != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", ti.shape, tk.shape),
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.shape != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", self.nodes[b.0].value.shape),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: kernels::conv_out_extent(h, k, stride, padding)?,
            w_out: kernels::conv_out_extent(w, k, stride, padding)?,
        };
        let out = kernels::conv2d_forward(
            &geom,
            &ti.data,
            &tk.data,
            bias.map(|b| self.nodes[b.0].value.data.as_slice()),
        );
        let value = Tensor {
            shape: vec![n, c_out, geom.h_out, geom.w_out],
            data: out,
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Non-overlapping `size×size` max-pool on `N×C×H×W`; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        rank("max_pool2d", t, 4)?;
        let [n, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
        if size == 0 || h < size || w < size {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {size} on {h}×{w}"),
            ));
        }
        let (out, argmax) = kernels::max_pool_forward(&t.data, n * c, h, w, size);
        let value = Tensor {
            shape: vec![n, c, h / size, w / size],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// `N×C×H×W -> N×C` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        rank("global_avg_pool", t, 4)?;
        let [n, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
        let area = (h * w) as f64;
        let data = if h * w == 0 {
            vec![0.0; n * c]
        } else {
            t.data
                .chunks_exact(h * w)
                .map(|p| p.iter().sum::<f64>() / area)
                .collect()
        };
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Corner-aligned bilinear upsampling of `N×C×h×w` to `N×C×out_h×out_w`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        rank("upsample_bilinear", t, 4)?;
        let [n, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("cannot downscale {h}×{w} to {out_h}×{out_w}"),
            ));
        }
        let data = kernels::upsample_bilinear_forward(&t.data, n * c, (h, w), (out_h, out_w));
        let value = Tensor {
            shape: vec![n, c, out_h, out_w],
            data,
        };
        Ok(self.push(value, Op::UpsampleBilinear { input }, &[input]))
    }

    /// Gather rows of an `R×K` matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        rank("select_rows", t, 2)?;
        let (r, k) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(rows.len() * k);
        for &i in rows {
            if i >= r {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {i} out of range for {r} rows"),
                ));
            }
            data.extend_from_slice(&t.data[i * k..(i + 1) * k]);
        }
        let value = Tensor {
            shape: vec![rows.len(), k],
            data,
        };
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-sample channel mix: `acts: N×K×h×w`, `weights: N×K` -> `N×1×h×w`.
    pub fn weighted_channel_sum(&mut self, acts: Var, weights: Var) -> Result<Var> {
        let (ta, tw) = (&self.nodes[acts.0].value, &self.nodes[weights.0].value);
        rank("weighted_channel_sum", ta, 4)?;
        let [n, k, h, w] = [ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]];
        if tw.shape != [n, k] {
            return Err(Error::shape(
                "weighted_channel_sum",
                format!("weights {:?} for activations {:?}", tw.shape, ta.shape),
            ));
        }
        let plane = h * w;
        let mut data = vec![0.0; n * plane];
        for s in 0..n {
            let dst = &mut data[s * plane..(s + 1) * plane];
            for c in 0..k {
                let wt = tw.data[s * k + c];
                let src = &ta.data[(s * k + c) * plane..(s * k + c + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, &a)| *d += wt * a);
            }
        }
        let value = Tensor {
            shape: vec![n, 1, h, w],
            data,
        };
        Ok(self.push(value, Op::WeightedChannelSum { acts, weights }, &[acts, weights]))
    }

    /// Mean softmax cross-entropy of `N×C` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        rank("softmax_cross_entropy", t, 2)?;
        let (n, c) = (t.shape[0], t.shape[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &y) in t.data.chunks_exact(c).zip(labels) {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
            let log_z = max + libm::log(z);
            total += log_z - row[y];
            probs.extend(row.iter().map(|&v| libm::exp(v - log_z)));
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Smallest distance from any input of a non-smooth op (relu, abs,
    /// clamp, max-pool) to its kink, over the grad-carrying part of the
    /// graph. Central differences with a step well below this value see a
    /// locally smooth function. Exact ties (a dead relu feeding another
    /// relu, an all-zero pool window, tanh saturated onto its target) are
    /// structural and stay tied under perturbation, so they are not counted.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            let data = |v: &Var| &self.nodes[v.0].value.data;
            let m = match &node.op {
                Op::Relu(x) | Op::Abs(x) => data(x).iter().map(|v| v.abs()).fold(f64::INFINITY, nonzero_min),
                Op::Clamp { x, lo, hi } => data(x)
                    .iter()
                    .flat_map(|v| [(v - lo).abs(), (v - hi).abs()])
                    .fold(f64::INFINITY, nonzero_min),
                Op::MaxPool2d { input, .. } => {
                    let t = &self.nodes[input.0].value;
                    let [n, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
                    let size = h / node.value.shape[2];
                    kernels::max_pool_margin(&t.data, n * c, h, w, size)
                }
                Op::MaxNormalize { x, argmax } => {
                    let d = data(x);
                    let per = if argmax.is_empty() { 0 } else { d.len() / argmax.len() };
                    argmax
                        .iter()
                        .enumerate()
                        .map(|(s, am)| {
                            let chunk = &d[s * per..(s + 1) * per];
                            match *am {
                                // the top value against every other entry, and against 0
                                Some(k) => chunk
                                    .iter()
                                    .enumerate()
                                    .filter(|&(j, _)| j != k)
                                    .map(|(_, v)| chunk[k] - v)
                                    .fold(chunk[k], nonzero_min),
                                None => chunk.iter().map(|v| v.abs()).fold(f64::INFINITY, nonzero_min),
                            }
                        })
                        .fold(f64::INFINITY, f64::min)
                }
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        margin
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape),
            ));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                let slot = acc(&mut self.nodes[i].grad, g.len());
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        // Adds `f(j)` into the gradient slot of `v` for every element j.
        macro_rules! each {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if wants(&v) {
                    let len = val(&v).len();
                    add_into(acc(&mut grads[v.0], len), $f);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                each!(*a, |j| g[j]);
                each!(*b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                each!(*a, |j| g[j]);
                each!(*b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (&val(a).data, &val(b).data);
                each!(*a, |j| g[j] * db[j]);
                each!(*b, |j| g[j] * da[j]);
            }
            Op::Div(a, b) => {
                let (da, db) = (&val(a).data, &val(b).data);
                each!(*a, |j| g[j] / db[j]);
                each!(*b, |j| -g[j] * da[j] / (db[j] * db[j]));
            }
            Op::AddScalar(x) | Op::Reshape(x) => each!(*x, |j| g[j]),
            Op::MulScalar(x, s) => each!(*x, |j| g[j] * s),
            Op::Abs(x) => {
                let d = &val(x).data;
                each!(*x, |j| {
                    let v: f64 = d[j];
                    if v > 0.0 {
                        g[j]
                    } else if v < 0.0 {
                        -g[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Relu(x) => {
                let d = &val(x).data;
                each!(*x, |j| if d[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                each!(*x, |j| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                each!(*x, |j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::Ln(x) => {
                let d = &val(x).data;
                each!(*x, |j| g[j] / d[j]);
            }
            Op::Clamp { x, lo, hi } => {
                let d = &val(x).data;
                each!(*x, |j| if d[j] > *lo && d[j] < *hi { g[j] } else { 0.0 });
            }
            Op::Sum(x) => each!(*x, |_| g[0]),
            Op::Mean(x) => {
                let n = val(x).len().max(1) as f64;
                each!(*x, |_| g[0] / n);
            }
            Op::SumPerSample(x) => {
                let n = node.value.len();
                let per = val(x).len().checked_div(n).unwrap_or(0);
                each!(*x, |j| g[j / per]);
            }
            Op::ScaleRows { x, factors } => {
                let n = factors.len();
                let per = val(x).len().checked_div(n).unwrap_or(0);
                each!(*x, |j| g[j] * factors[j / per]);
            }
            Op::MaxNormalize { x, argmax } => {
                if wants(x) {
                    let tx = val(x);
                    let per = if argmax.is_empty() { 0 } else { tx.len() / argmax.len() };
                    let slot = acc(&mut grads[x.0], tx.len());
                    for (s, am) in argmax.iter().enumerate() {
                        let range = s * per..(s + 1) * per;
                        match *am {
                            None => add_into(&mut slot[range.clone()], |j| g[s * per + j]),
                            Some(k) => {
                                let m = tx.data[s * per + k];
                                let dot: f64 = range.clone().map(|i| g[i] * tx.data[i]).sum();
                                add_into(&mut slot[range.clone()], |j| g[s * per + j] / m);
                                slot[s * per + k] -= dot / (m * m);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    let slot = acc(&mut grads[a.0], m * k);
                    kernels::gemm(m, n, k, g, (n as isize, 1), &tb.data, (1, n as isize), 1.0, slot);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let slot = acc(&mut grads[b.0], k * n);
                    kernels::gemm(k, m, n, &ta.data, (1, k as isize), g, (n as isize, 1), 1.0, slot);
                }
            }
            Op::Linear { x, weight, bias } => {
                let (tx, tw) = (val(x), val(weight));
                let (n, k, o) = (tx.shape[0], tx.shape[1], tw.shape[0]);
                if wants(x) {
                    // dX = G (n×o) · W (o×k)
                    let slot = acc(&mut grads[x.0], n * k);
                    kernels::gemm(n, o, k, g, (o as isize, 1), &tw.data, (k as isize, 1), 1.0, slot);
                }
                if wants(weight) {
                    // dW = Gᵀ (o×n) · X (n×k)
                    let slot = acc(&mut grads[weight.0], o * k);
                    kernels::gemm(o, n, k, g, (1, o as isize), &tx.data, (k as isize, 1), 1.0, slot);
                }
                if wants(bias) {
                    let slot = acc(&mut grads[bias.0], o);
                    for row in g.chunks_exact(o) {
                        slot.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (ti, tk) = (val(input), val(kernel));
                let mut gi = wants(input).then(|| grads[input.0].take().unwrap_or_else(|| vec![0.0; ti.len()]));
                let mut gk = wants(kernel).then(|| grads[kernel.0].take().unwrap_or_else(|| vec![0.0; tk.len()]));
                let mut gb = bias
                    .filter(wants)
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; geom.c_out]));
                kernels::conv2d_backward(
                    geom,
                    &ti.data,
                    &tk.data,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[kernel.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    grads[b.0] = Some(v);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants(input) {
                    let slot = acc(&mut grads[input.0], val(input).len());
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = val(x);
                let area = t.shape[2] * t.shape[3];
                let inv = 1.0 / area.max(1) as f64;
                each!(*x, |j| g[j / area] * inv);
            }
            Op::UpsampleBilinear { input } => {
                if wants(input) {
                    let t = val(input);
                    let [n, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
                    let (oh, ow) = (node.value.shape[2], node.value.shape[3]);
                    let slot = acc(&mut grads[input.0], t.len());
                    kernels::upsample_bilinear_backward(g, n * c, (h, w), (oh, ow), slot);
                }
            }
            Op::SelectRows { x, rows } => {
                if wants(x) {
                    let t = val(x);
                    let k = t.shape[1];
                    let slot = acc(&mut grads[x.0], t.len());
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..k {
                            slot[src * k + c] += g[r * k + c];
                        }
                    }
                }
            }
            Op::WeightedChannelSum { acts, weights } => {
                let (ta, tw) = (val(acts), val(weights));
                let [n, k, h, w] = [ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]];
                let plane = h * w;
                if wants(acts) {
                    each!(*acts, |j: usize| {
                        let s = j / (k * plane);
                        let c = (j / plane) % k;
                        g[s * plane + j % plane] * tw.data[s * k + c]
                    });
                }
                if wants(weights) {
                    let slot = acc(&mut grads[weights.0], n * k);
                    for s in 0..n {
                        let gs = &g[s * plane..(s + 1) * plane];
                        for c in 0..k {
                            let a = &ta.data[(s * k + c) * plane..(s * k + c + 1) * plane];
                            slot[s * k + c] += gs.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(logits).shape[1];
                let n = labels.len().max(1) as f64;
                each!(*logits, |j: usize| {
                    let (r, col) = (j / c, j % c);
                    let onehot = if labels[r] == col { 1.0 } else { 0.0 };
                    g[0] * (probs[j] - onehot) / n
                });
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn nonzero_min(acc: f64, v: f64) -> f64 {
    if v > 0.0 { acc.min(v) } else { acc }
}
