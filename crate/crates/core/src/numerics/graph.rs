use std::collections::HashMap;
use std::str::FromStr;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Abs,
    Sigmoid,
    Scale,
}

impl FromStr for Elementwise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "abs" => Self::Abs,
            "sigmoid" => Self::Sigmoid,
            "scale" => Self::Scale,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Right-hand operand of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    None,
    Var(Var),
    Scalar(T),
}

/// Precomputed source taps for one axis of a bilinear resize.
#[derive(Clone, Debug)]
struct Taps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Abs { a: Var },
    Sigmoid { a: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Linear { x: Var, w: Var, b: Var, n: usize, cin: usize, cout: usize },
    SoftmaxRows { a: Var, cols: usize },
    Bce { logits: Var, targets: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, h: usize, wd: usize, cin: usize, cout: usize, k: usize },
    Resize { a: Var, c: usize, rows: Taps<T>, cols: Taps<T>, in_w: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, c: usize, xhat: Vec<T>, rstd: Vec<T> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { a: Var, start: usize, len: usize, cols: usize },
    RowScale { x: Var, s: Var, cols: usize },
    Sum { a: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward simply walks it in reverse. Every binary
/// operation demands identical shapes: there is no broadcasting.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    param_order: Vec<String>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// tanh-form GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn taps<T: Scalar>(src: usize, dst: usize) -> Taps<T> {
    let scale = T::from_usize_exact(src) / T::from_usize_exact(dst);
    let half = T::lit(0.5);
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((T::from_usize_exact(i) + half) * scale - half).max(T::zero());
        let lo = pos.floor().to_usize().unwrap_or(0).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - T::from_usize_exact(lo));
    }
    t
}

pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { a, .. }
            | Op::Reshape { a }
            | Op::Abs { a }
            | Op::Sigmoid { a }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::SoftmaxRows { a, .. }
            | Op::Resize { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::Bce { logits, .. } => vec![*logits],
            Op::Linear { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols { parts, .. } => parts.iter().map(|(v, _)| *v).collect(),
            Op::RowScale { x, s, .. } => vec![*x, *s],
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a named parameter. Repeated binds of one name return the same node,
    /// so weight sharing accumulates into a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.input(store.get(name)?.clone())?;
        self.bound.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        self.push(Tensor::new(&[cols, rows], out)?, Op::Transpose { a, rows, cols }, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a }, "reshape")
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, rhs: Operand<T>) -> Result<Var> {
        match (kind, rhs) {
            (Elementwise::Add, Operand::Var(b)) => self.add(a, b),
            (Elementwise::Sub, Operand::Var(b)) => self.sub(a, b),
            (Elementwise::Mul, Operand::Var(b)) => self.mul(a, b),
            (Elementwise::Abs, Operand::None) => self.abs(a),
            (Elementwise::Sigmoid, Operand::None) => self.sigmoid(a),
            (Elementwise::Scale, Operand::Scalar(f)) => self.scale(a, f),
            (kind, _) => Err(Error::InvalidArgument {
                op: "elementwise",
                msg: format!("operand does not fit kind {kind:?}"),
            }),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.abs());
        self.push(t, Op::Abs { a }, "abs")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale { a, factor }, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| gelu(x).0);
        self.push(t, Op::Gelu { a }, "gelu")
    }

    /// `x[n×cin] · w[cin×cout] + b[cout]`, the per-token form of a 1×1 convolution.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("linear", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(shape_err("linear", sw, sb));
        }
        let (n, cin, cout) = (sx[0], sx[1], sw[1]);
        let mut out = matmul_kernel(self.value(x).data(), self.value(w).data(), n, cin, cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::new(&[n, cout], out)?, Op::Linear { x, w, b, n, cin, cout }, "linear")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", s, &[]));
        }
        let cols = s[1];
        let src = self.value(a);
        if !src.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = s.to_vec();
        self.push(Tensor::new(&shape, out)?, Op::SoftmaxRows { a, cols }, "softmax_rows")
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn stable_bce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(shape_err("stable_bce", x.shape(), targets.shape()));
        }
        if let Some(&bad) = targets.data().iter().find(|&&y| !(y >= T::zero() && y <= T::one())) {
            return Err(Error::TargetOutOfRange {
                value: bad.to_f64_lossy(),
            });
        }
        let mut total = T::zero();
        for (&xv, &yv) in x.data().iter().zip(targets.data()) {
            total += xv.max(T::zero()) - xv * yv + (-xv.abs()).exp().ln_1p();
        }
        let mean = total / T::from_usize_exact(x.len());
        self.push(
            Tensor::scalar(mean),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            "stable_bce",
        )
    }

    /// Same-padded, stride-1 convolution on an `h×w×cin` grid with
    /// `k×k×cin×cout` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 4 || sw[0] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        let k = sw[0];
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if sx.len() != 3 || sx[2] != sw[2] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if sb != [sw[3]] {
            return Err(shape_err("conv2d", sw, sb));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        let r = k / 2;
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); h * wd * cout];
        for oy in 0..h {
            for ox in 0..wd {
                let o = &mut out[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
                o.copy_from_slice(bs);
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(r).filter(|&iy| iy < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(r).filter(|&ix| ix < wd) else {
                            continue;
                        };
                        let xin = &xs[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        let wbase = (ky * k + kx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let wrow = &ws[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (ov, &wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[h, wd, cout], out)?,
            Op::Conv2d { x, w, b, h, wd, cin, cout, k },
            "conv2d",
        )
    }

    /// Bilinear resize of an `h×w×c` grid, half-pixel (align-corners-false)
    /// convention with source coordinates clamped at zero.
    pub fn bilinear_resize(&mut self, a: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || new_h == 0 || new_w == 0 {
            return Err(shape_err("bilinear_resize", s, &[new_h, new_w]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let rows = taps::<T>(h, new_h);
        let cols = taps::<T>(w, new_w);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); new_h * new_w * c];
        for oy in 0..new_h {
            let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..new_w {
                let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let o = &mut out[(oy * new_w + ox) * c..(oy * new_w + ox + 1) * c];
                for (ch, ov) in o.iter_mut().enumerate() {
                    let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                    let top = (T::one() - lx) * at(y0, x0) + lx * at(y0, x1);
                    let bottom = (T::one() - lx) * at(y1, x0) + lx * at(y1, x1);
                    *ov = (T::one() - ly) * top + ly * bottom;
                }
            }
        }
        self.push(
            Tensor::new(&[new_h, new_w, c], out)?,
            Op::Resize {
                a,
                c,
                rows,
                cols,
                in_w: w,
            },
            "bilinear_resize",
        )
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let sx = self.shape(x);
        let c = *sx.last().expect("non-empty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", sx, self.shape(gamma)));
        }
        let shape = sx.to_vec();
        let cf = T::from_usize_exact(c);
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / c;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cf;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cf;
            let inv = T::one() / (var + eps).sqrt();
            rstd.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                xhat.push(n);
                out.push(gs[j] * n + bs[j]);
            }
        }
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Concatenates `[n×c_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols { parts, rows }, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(shape_err("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let out = (0..rows)
            .flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        self.push(
            Tensor::new(&[rows, len], out)?,
            Op::SliceCols { a, start, len, cols },
            "slice_cols",
        )
    }

    /// Multiplies row `i` of `x[n×c]` by `s[i]`; `s` has `n` elements in any shape.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss.iter().product::<usize>() != sx[0] {
            return Err(shape_err("row_scale", sx, ss));
        }
        let cols = sx[1];
        let shape = sx.to_vec();
        let scales = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(scales)
            .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
            .collect();
        self.push(Tensor::new(&shape, out)?, Op::RowScale { x, s, cols }, "row_scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), Op::Sum { a }, "sum")
    }

    /// Names of parameters bound into this graph, in first-bind order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|n| (n.as_str(), self.bound[n]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != [1] {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                leaves.insert(i, Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d += aip * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => acc(*a, &mut |da| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        da[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            Op::Reshape { a } => acc(*a, &mut |da| add_into(da, g)),
            Op::Add { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Abs { a } => {
                let av = val(*a);
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                        // subgradient at exactly 0 is 0
                        if v > T::zero() {
                            *d += x;
                        } else if v < T::zero() {
                            *d -= x;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                acc(*a, &mut |da| {
                    for ((d, &x), &s) in da.iter_mut().zip(g).zip(y) {
                        *d += x * s * (T::one() - s);
                    }
                });
            }
            Op::Scale { a, factor } => acc(*a, &mut |da| {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * *factor;
                }
            }),
            Op::Gelu { a } => {
                let av = val(*a);
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                        *d += x * gelu(v).1;
                    }
                });
            }
            Op::Linear { x, w, b, n, cin, cout } => {
                let (n, cin, cout) = (*n, *cin, *cout);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        let grow = &g[i * cout..(i + 1) * cout];
                        for p in 0..cin {
                            let wrow = &wv[p * cout..(p + 1) * cout];
                            let mut s = T::zero();
                            for (&a, &bb) in grow.iter().zip(wrow) {
                                s += a * bb;
                            }
                            dx[i * cin + p] += s;
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for i in 0..n {
                        let grow = &g[i * cout..(i + 1) * cout];
                        for p in 0..cin {
                            let xip = xv[i * cin + p];
                            for (d, &a) in dw[p * cout..(p + 1) * cout].iter_mut().zip(grow) {
                                *d += xip * a;
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for row in g.chunks(cout) {
                        add_into(db, row);
                    }
                });
            }
            Op::SoftmaxRows { a, cols } => {
                let y = node.value.data();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&x, &v)| s + x * v);
                        for ((d, &x), &v) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += v * (x - dot);
                        }
                    }
                });
            }
            Op::Bce { logits, targets } => {
                let xv = val(*logits);
                let scale = g[0] / T::from_usize_exact(targets.len());
                acc(*logits, &mut |dx| {
                    for ((d, &x), &y) in dx.iter_mut().zip(xv).zip(targets) {
                        *d += (sigmoid(x) - y) * scale;
                    }
                });
            }
            Op::Conv2d { x, w, b, h, wd, cin, cout, k } => {
                let (h, wd, cin, cout, k) = (*h, *wd, *cin, *cout, *k);
                let r = k / 2;
                let (xv, wv) = (val(*x), val(*w));
                let window = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<(usize, usize)> {
                    let iy = (oy + ky).checked_sub(r).filter(|&iy| iy < h)?;
                    let ix = (ox + kx).checked_sub(r).filter(|&ix| ix < wd)?;
                    Some((iy, ix))
                };
                acc(*x, &mut |dx| {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let go = &g[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let Some((iy, ix)) = window(oy, ox, ky, kx) else { continue };
                                    let wbase = (ky * k + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let s = go.iter().zip(wrow).fold(T::zero(), |s, (&a, &bb)| s + a * bb);
                                        dx[(iy * wd + ix) * cin + ci] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let go = &g[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let Some((iy, ix)) = window(oy, ox, ky, kx) else { continue };
                                    let wbase = (ky * k + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xval = xv[(iy * wd + ix) * cin + ci];
                                        let drow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        for (d, &a) in drow.iter_mut().zip(go) {
                                            *d += xval * a;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for row in g.chunks(cout) {
                        add_into(db, row);
                    }
                });
            }
            Op::Resize { a, c, rows, cols, in_w } => {
                let (c, in_w) = (*c, *in_w);
                let new_w = cols.lo.len();
                acc(*a, &mut |da| {
                    for oy in 0..rows.lo.len() {
                        let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                        for ox in 0..new_w {
                            let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                            let go = &g[(oy * new_w + ox) * c..(oy * new_w + ox + 1) * c];
                            let weights = [
                                (y0, x0, (T::one() - ly) * (T::one() - lx)),
                                (y0, x1, (T::one() - ly) * lx),
                                (y1, x0, ly * (T::one() - lx)),
                                (y1, x1, ly * lx),
                            ];
                            for (y, x, wgt) in weights {
                                let base = (y * in_w + x) * c;
                                for (d, &v) in da[base..base + c].iter_mut().zip(go) {
                                    *d += wgt * v;
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                xhat,
                rstd,
            } => {
                let c = *c;
                let gv = val(*gamma);
                let cf = T::from_usize_exact(c);
                acc(*x, &mut |dx| {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = grow[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= cf;
                        mean_dh /= cf;
                        for j in 0..c {
                            let d = grow[j] * gv[j];
                            dx[r * c + j] += inv * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &a), &hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += a * hv;
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, wd) in parts {
                    acc(p, &mut |dp| {
                        for r in 0..*rows {
                            add_into(
                                &mut dp[r * wd..(r + 1) * wd],
                                &g[r * total + offset..r * total + offset + wd],
                            );
                        }
                    });
                    offset += wd;
                }
            }
            Op::SliceCols { a, start, len, cols } => acc(*a, &mut |da| {
                for (r, grow) in g.chunks(*len).enumerate() {
                    add_into(&mut da[r * cols + start..r * cols + start + len], grow);
                }
            }),
            Op::RowScale { x, s, cols } => {
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |dx| {
                    for ((drow, grow), &f) in dx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(sv) {
                        for (d, &a) in drow.iter_mut().zip(grow) {
                            *d += a * f;
                        }
                    }
                });
                acc(*s, &mut |ds| {
                    for ((d, grow), xrow) in ds.iter_mut().zip(g.chunks(*cols)).zip(xv.chunks(*cols)) {
                        *d += grow.iter().zip(xrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created by [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradients for every tensor in `store`, zero for parameters the graph
    /// never touched.
    pub fn to_store(&self, graph: &Graph<T>, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.zeros_like();
        for (name, var) in graph.bound_params() {
            if let (Ok(slot), Some(g)) = (out.get_mut(name), self.wrt(var)) {
                *slot = g.clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4., 5., 6.]);

        let r = g.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let col = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., -3.])).unwrap();
        let b = g.constant(t(&[2], &[2., -1.])).unwrap();
        let z = g.elementwise(Elementwise::Sub, a, Operand::Var(a)).unwrap();
        assert_eq!(g.value(z).data(), &[0., 0.]);
        let d = g.sub(a, b).unwrap();
        let m = g.abs(d).unwrap();
        assert_eq!(g.value(m).data(), &[1., 2.]);
        let zero = g.constant(t(&[1], &[0.])).unwrap();
        let s = g.sigmoid(zero).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert!(matches!("cube".parse::<Elementwise>(), Err(Error::UnknownOp(_))));
        let c = g.constant(t(&[3], &[0.; 3])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn abs_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0., 2., -2.])).unwrap();
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0., 1., -1.]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0., 0., 0., 1., 2., 3.])).unwrap();
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s).data();
        for &x in &v[..3] {
            assert!((x - 1. / 3.).abs() < 1e-15);
        }
        let e: Vec<f64> = [1f64, 2., 3.].iter().map(|x| x.exp()).collect();
        let total: f64 = e.iter().sum();
        for (x, ei) in v[3..].iter().zip(&e) {
            assert!((x - ei / total).abs() < 1e-15);
        }

        let b = g.constant(t(&[1, 2], &[5., 5. - 100.])).unwrap();
        let s = g.softmax_rows(b).unwrap();
        let v = g.value(s).data();
        let expect = (-100f64).exp() / (1. + (-100f64).exp());
        assert!((v[1] - expect).abs() < 1e-58);
        assert!((v[1] - 3.72e-44).abs() < 0.01e-44);
        assert!((v[0] - 1.).abs() < 1e-15);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.])).unwrap();
        let l = g.stable_bce(x, &t(&[1], &[1.])).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let x = g.constant(t(&[1], &[100.])).unwrap();
        let l = g.stable_bce(x, &t(&[1], &[1.])).unwrap();
        assert!(g.value(l).data()[0] < 1e-30);

        let x = g.constant(t(&[2], &[-2., 3.])).unwrap();
        let l = g.stable_bce(x, &t(&[2], &[0., 1.])).unwrap();
        let naive = |x: f64, y: f64| {
            let s = 1. / (1. + (-x).exp());
            -(y * s.ln() + (1. - y) * (1. - s).ln())
        };
        let expect = (naive(-2., 0.) + naive(3., 1.)) / 2.;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);

        assert!(matches!(
            g.stable_bce(x, &t(&[2], &[0., 1.5])),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        // 1x1 identity kernel
        let x = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.5 - 1.)).unwrap();
        let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        // all-ones 3x3 kernel on a one-hot grid
        let mut onehot = vec![0.; 9];
        onehot[4] = 1.;
        let x = g.constant(t(&[3, 3, 1], &onehot)).unwrap();
        let w = g.constant(Tensor::full(&[3, 3, 1, 1], 1.)).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.; 9]);

        let w2 = g.constant(Tensor::full(&[2, 2, 1, 1], 1.)).unwrap();
        assert!(matches!(g.conv2d(x, w2, b), Err(Error::EvenKernel(2))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 5, 2], |i| (i as f64).sin())).unwrap();
        let y = g.bilinear_resize(x, 3, 5).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let c = g.constant(Tensor::full(&[2, 3, 1], 0.7)).unwrap();
        let y = g.bilinear_resize(c, 7, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[4., 4., 1., 3.])).unwrap();
        let gamma = g.constant(Tensor::full(&[2], 1.)).unwrap();
        let beta = g.constant(Tensor::zeros(&[2])).unwrap();
        let eps = 1e-5;
        let y = g.layer_norm(x, gamma, beta, eps).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0., 0.]);
        let s = 1. / (1f64 + eps).sqrt();
        assert!((v[2] + s).abs() < 1e-15 && (v[3] - s).abs() < 1e-15);
        assert!(g.layer_norm(x, gamma, beta, 0.).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("a", t(&[2], &[1., 2.]));
        store.insert("b", t(&[2], &[3., 4.]));
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap().to_store(&g, &store);
        assert_eq!(grads.get("a").unwrap().data(), &[1., 1.]);
        assert_eq!(grads.get("b").unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1], &[3.]));
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let p = g.mul(w1, w2).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.wrt(w1).unwrap().data(), &[6.]);
    }
}
