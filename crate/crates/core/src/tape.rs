//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the indices of its inputs. [`Tape::backward`] sweeps the nodes in
//! reverse order and accumulates vector-Jacobian products into the inputs.
//!
//! Only the operations the front-ends and the sequence model need are
//! provided; each one carries a hand-derived backward rule that is checked
//! against central finite differences in the tests below.
//!
//! Shape mismatches inside the tape are programming errors and panic; public
//! entry points of the other modules validate user-supplied shapes first.
//!
//! ```
//! use distvad::tape::Tape;
//! use distvad::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let p = tape.param("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(p, p);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use ndarray::linalg::general_mat_mul;

use crate::error::{Error, Result};
use crate::tensor::{view2, view2_mut, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log { x: Var, eps: f64 },
    Cos(Var),
    Sin(Var),
    Softmax(Var),
    Reshape(Var),
    SwapAxes01(Var),
    BroadcastLast { x: Var, n: usize },
    Sum(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Mvn { x: Var, eps: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CausalConv { x: Var, w: Var, b: Var, dilation: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    ComplexAbs { re: Var, im: Var },
    FrobNorm { x: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros for nodes the loss never reached.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients for every named parameter, in registration order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.get_or_zero(*v)))
            .collect()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor has at least one axis")
}

/// Splits a 2-D or 3-D shape into (batch, rows, cols).
fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul expects 2-D or 3-D operands, got {shape:?}"),
    }
}

/// c (+)= a · op(b) on row-major slices, with `b` given as (rows, cols) before
/// the optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = view2(a, a_dims.0, a_dims.1);
    let bv = view2(b, b_dims.0, b_dims.1);
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = view2_mut(c, m, n);
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

fn softmax_rows(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// im2col for a dilated causal convolution: `col[t, i*k + j] = x[t - (k-1-j)*d, i]`.
fn causal_columns(x: &[f64], t_len: usize, cin: usize, k: usize, d: usize) -> Vec<f64> {
    let mut col = vec![0.0; t_len * cin * k];
    for t in 0..t_len {
        let row = &mut col[t * cin * k..(t + 1) * cin * k];
        for j in 0..k {
            let back = (k - 1 - j) * d;
            if back > t {
                continue;
            }
            let src = &x[(t - back) * cin..(t - back + 1) * cin];
            for (i, &v) in src.iter().enumerate() {
                row[i * k + j] = v;
            }
        }
    }
    col
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Matrix product, batched over a leading axis when both operands are 3-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, transposing the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "matmul rank mismatch {sa:?} vs {sb:?}");
        let (batch, m, k) = batch_dims(&sa);
        let (bb, br, bc) = batch_dims(&sb);
        assert_eq!(batch, bb, "matmul batch mismatch {sa:?} vs {sb:?}");
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner mismatch {sa:?} vs {sb:?} (trans_b={trans_b})");
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    &av[bi * m * k..(bi + 1) * m * k],
                    (m, k),
                    false,
                    &bv[bi * br * bc..(bi + 1) * br * bc],
                    (br, bc),
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let needs = self.needs(&[a, b]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::MatMul { a, b, trans_b },
            needs,
        )
    }

    /// `x + bias`, broadcasting `bias` over every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = last_dim(self.shape(x));
        assert_eq!(self.shape(bias), &[n], "bias shape mismatch");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise shape mismatch"
        );
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(&shape, data).unwrap(), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let needs = self.needs(&[x]);
        self.push(out, op, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Elementwise `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| (v + eps).ln(), Op::Log { x, eps })
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut out = self.value(x).clone();
        softmax_rows(out.data_mut(), n);
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape element count");
        let needs = self.needs(&[x]);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Swaps the first two axes: `[A, B, ...] -> [B, A, ...]`.
    pub fn swap_axes01(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "swap_axes01 needs rank >= 2");
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..a {
            for j in 0..b {
                let s = (i * b + j) * inner;
                let d = (j * a + i) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.swap(0, 1);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(&new_shape, out).unwrap(), Op::SwapAxes01(x), needs)
    }

    /// Repeats `x` along a new trailing axis of length `n`.
    pub fn broadcast_last(&mut self, x: Var, n: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        shape.push(n);
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(n))
            .collect();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(&shape, data).unwrap(), Op::BroadcastLast { x, n }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        assert!(start + len <= n, "narrow out of bounds");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(&new_shape, out).unwrap(),
            Op::Narrow { x, axis, start },
            needs,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = self.needs(parts);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Mean and variance normalisation over the first axis:
    /// `(x - mean) / (std + eps)` with the population standard deviation.
    pub fn mvn(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let t_len = shape[0];
        let m: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for j in 0..m {
            let (mean, std) = column_stats(src, t_len, m, j);
            for t in 0..t_len {
                out[t * m + j] = (src[t * m + j] - mean) / (std + eps);
            }
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Mvn { x, eps }, needs)
    }

    /// Layer normalisation over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let n = last_dim(self.shape(x));
        assert_eq!(self.shape(gain), &[n]);
        assert_eq!(self.shape(bias), &[n]);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[i] + b[i];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            },
            needs,
        )
    }

    /// Dilated causal 1-D convolution of a `[T, C_in]` sequence with weights
    /// `[C_out, C_in, k]` and bias `[C_out]`. Tap `j` reads frame
    /// `t - (k - 1 - j) * dilation`; frames before the start are zero.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 2, "causal_conv input must be [T, C_in]");
        assert_eq!(sw.len(), 3, "causal_conv weight must be [C_out, C_in, k]");
        let (t_len, cin) = (sx[0], sx[1]);
        let (cout, wcin, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(cin, wcin, "causal_conv channel mismatch");
        assert_eq!(self.shape(b), &[cout]);
        let col = causal_columns(self.value(x).data(), t_len, cin, k, dilation);
        let mut out = vec![0.0; t_len * cout];
        gemm(
            &col,
            (t_len, cin * k),
            false,
            self.value(w).data(),
            (cout, cin * k),
            true,
            &mut out,
            0.0,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let needs = self.needs(&[x, w, b]);
        self.push(
            Tensor::new(&[t_len, cout], out).unwrap(),
            Op::CausalConv { x, w, b, dilation },
            needs,
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy expects [T, n_classes]");
        assert_eq!(shape[0], labels.len(), "cross_entropy label count");
        let n = shape[1];
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in data.chunks(n).zip(labels) {
            assert!(y < n, "label {y} out of range");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let loss = total / labels.len().max(1) as f64;
        let needs = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// `sqrt(re² + im²)`, with gradient defined as zero at the origin.
    pub fn complex_abs(&mut self, re: Var, im: Var) -> Var {
        self.binary(re, im, |a, b| a.hypot(b), Op::ComplexAbs { re, im })
    }

    /// Frobenius norm plus `eps`; the gradient at zero is taken as zero.
    pub fn frob_norm(&mut self, x: Var, eps: f64) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(n + eps), Op::FrobNorm { x, eps }, needs)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    ///
    /// Fails with a numeric error if any value feeding the loss is not finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.needs_grad && !node.value.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in forward pass at node {i} ({:?})",
                    op_name(&node.op)
                )));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).unwrap()))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (batch, m, k) = batch_dims(sa);
                let (_, br, bc) = batch_dims(sb);
                let n = if *trans_b { br } else { bc };
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for bi in 0..batch {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            &g[bi * m * n..(bi + 1) * m * n],
                            (m, n),
                            false,
                            &bv[bi * br * bc..(bi + 1) * br * bc],
                            (br, bc),
                            !*trans_b,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let dbs = &mut db[bi * br * bc..(bi + 1) * br * bc];
                        if *trans_b {
                            // C = A Bᵀ  =>  dB = dCᵀ A
                            gemm(gs, (m, n), true, asl, (m, k), false, dbs, 1.0);
                        } else {
                            // dB = Aᵀ dC
                            gemm(asl, (m, k), true, gs, (m, n), false, dbs, 1.0);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let n = self.nodes[bias.0].value.len();
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Log { x, eps } => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / (xv[i] + eps);
                    }
                });
            }
            Op::Cos(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * xv[i].sin();
                    }
                });
            }
            Op::Sin(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * xv[i].cos();
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::SwapAxes01(x) => {
                let s = self.nodes[x.0].value.shape();
                let (a, b) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                acc(*x, &mut |d| {
                    for i in 0..a {
                        for j in 0..b {
                            let di = (i * b + j) * inner;
                            let gi = (j * a + i) * inner;
                            add_into(&mut d[di..di + inner], &g[gi..gi + inner]);
                        }
                    }
                });
            }
            Op::BroadcastLast { x, n } => acc(*x, &mut |d| {
                for (dv, gr) in d.iter_mut().zip(g.chunks(*n)) {
                    *dv += gr.iter().sum::<f64>();
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Narrow { x, axis, start } => {
                let s = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        add_into(
                            &mut d[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut d[o * n * inner..(o + 1) * n * inner],
                                &g[src..src + n * inner],
                            );
                        }
                    });
                    offset += n;
                }
            }
            Op::Mvn { x, eps } => {
                let s = self.nodes[x.0].value.shape();
                let t_len = s[0];
                let m: usize = s[1..].iter().product();
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..m {
                        let (mean, std) = column_stats(xv, t_len, m, j);
                        let sd = std + eps;
                        let gmean = (0..t_len).map(|t| g[t * m + j]).sum::<f64>() / t_len as f64;
                        let gx: f64 = (0..t_len)
                            .map(|t| g[t * m + j] * (xv[t * m + j] - mean))
                            .sum();
                        for t in 0..t_len {
                            let c = xv[t * m + j] - mean;
                            let mut v = (g[t * m + j] - gmean) / sd;
                            if std > 0.0 {
                                v -= gx / (sd * sd) * c / (t_len as f64 * std);
                            }
                            d[t * m + j] += v;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            } => {
                let n = self.nodes[gain.0].value.len();
                let xv = val(*x);
                let gv = val(*gain);
                let mut dx_all = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for ((xr, gr), dxr) in xv.chunks(n).zip(g.chunks(n)).zip(dx_all.chunks_mut(n)) {
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..n).map(|i| gr[i] * gv[i]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for i in 0..n {
                        dxr[i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                        dgain[i] += gr[i] * xhat[i];
                        dbias[i] += gr[i];
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx_all));
                acc(*gain, &mut |d| add_into(d, &dgain));
                acc(*bias, &mut |d| add_into(d, &dbias));
            }
            Op::CausalConv { x, w, b, dilation } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (t_len, cin) = (sx[0], sx[1]);
                let (cout, k) = (sw[0], sw[2]);
                let wv = val(*w);
                acc(*b, &mut |db| {
                    for row in g.chunks(cout) {
                        add_into(db, row);
                    }
                });
                if self.nodes[w.0].needs_grad {
                    let col = causal_columns(val(*x), t_len, cin, k, *dilation);
                    acc(*w, &mut |dw| {
                        // dW = gᵀ · col
                        gemm(g, (t_len, cout), true, &col, (t_len, cin * k), false, dw, 1.0);
                    });
                }
                acc(*x, &mut |dx| {
                    let mut dcol = vec![0.0; t_len * cin * k];
                    gemm(g, (t_len, cout), false, wv, (cout, cin * k), false, &mut dcol, 0.0);
                    for t in 0..t_len {
                        let row = &dcol[t * cin * k..(t + 1) * cin * k];
                        for j in 0..k {
                            let back = (k - 1 - j) * dilation;
                            if back > t {
                                continue;
                            }
                            let dst = &mut dx[(t - back) * cin..(t - back + 1) * cin];
                            for (i, dv) in dst.iter_mut().enumerate() {
                                *dv += row[i * k + j];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let n = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / labels.len().max(1) as f64;
                acc(*logits, &mut |d| {
                    for ((dr, lr), &y) in d.chunks_mut(n).zip(lv.chunks(n)).zip(labels) {
                        let mut p = lr.to_vec();
                        softmax_rows(&mut p, n);
                        for i in 0..n {
                            let target = if i == y { 1.0 } else { 0.0 };
                            dr[i] += scale * (p[i] - target);
                        }
                    }
                });
            }
            Op::ComplexAbs { re, im } => {
                let mag = node.value.data();
                let (rv, iv) = (val(*re), val(*im));
                acc(*re, &mut |d| {
                    for i in 0..d.len() {
                        if mag[i] > 0.0 {
                            d[i] += g[i] * rv[i] / mag[i];
                        }
                    }
                });
                acc(*im, &mut |d| {
                    for i in 0..d.len() {
                        if mag[i] > 0.0 {
                            d[i] += g[i] * iv[i] / mag[i];
                        }
                    }
                });
            }
            Op::FrobNorm { x, eps } => {
                let norm = node.value.data()[0] - eps;
                let xv = val(*x);
                if norm > 0.0 {
                    acc(*x, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * xv[i] / norm;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn column_stats(data: &[f64], t_len: usize, m: usize, j: usize) -> (f64, f64) {
    let mean = (0..t_len).map(|t| data[t * m + j]).sum::<f64>() / t_len as f64;
    let var = (0..t_len)
        .map(|t| (data[t * m + j] - mean).powi(2))
        .sum::<f64>()
        / t_len as f64;
    (mean, var.sqrt())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Log { .. } => "log",
        Op::Cos(_) => "cos",
        Op::Sin(_) => "sin",
        Op::Softmax(_) => "softmax",
        Op::Reshape(_) => "reshape",
        Op::SwapAxes01(_) => "swap_axes01",
        Op::BroadcastLast { .. } => "broadcast_last",
        Op::Sum(_) => "sum",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::Mvn { .. } => "mvn",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CausalConv { .. } => "causal_conv",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::ComplexAbs { .. } => "complex_abs",
        Op::FrobNorm { .. } => "frob_norm",
    }
}
