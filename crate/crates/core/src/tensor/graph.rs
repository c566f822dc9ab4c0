use std::collections::HashMap;

use super::gemm::{gemm, MatRef};
use super::{shape_err, ParameterSet, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[R, C] + b[r, C]`, row `i` of `a` paired with row `i % r` of `b`.
    AddTiled(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        dead_rows: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
        dead_rows: Vec<bool>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    ToTokens(Var),
    ConcatSeq {
        parts: Vec<Var>,
        batch: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    d: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax of `row` over entries where `keep` is true; masked
/// entries become 0. A row with nothing kept becomes uniform. Returns
/// whether the row was fully masked.
fn softmax_in_place(row: &mut [f64], keep: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|x| *x = u);
        return true;
    }
    let mut total = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        *x = if keep(j) { (*x - max).exp() } else { 0.0 };
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
    false
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every node so the graph can record a new computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.param_index.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. `None` when `v` did not
    /// take part in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::Usage(format!("{op}: variable {} does not belong to this graph", v.0)))
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Leaf holding a copy of parameter `name`. Repeated requests return the
    /// same variable.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable, "param")?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters referenced by this graph, in first-use order.
    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, mk(a, b), rg, op)
    }

    fn unary(&mut self, a: Var, op_name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a, op_name)?;
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        self.push(t, op, rg, op_name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    /// Element-wise product with a constant of the same size (masks, noise).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        self.check(a, "mul_const")?;
        let va = self.value(a);
        if c.len() != va.len() {
            return Err(shape_err("mul_const", format!("{:?} vs {} constants", va.shape(), c.len())));
        }
        let data = va.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c), rg, "mul_const")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", f64::abs, Op::Abs(a))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum")?;
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_rows(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Broadcast-add `b[r, C]` over `a[R, C]` by tiling rows; `R` must be a
    /// multiple of `r`. Covers bias (`r = 1`) and per-sample positional tables.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "add_tiled")?;
        self.check(b, "add_tiled")?;
        let (ra, ca) = self.value(a).dims2("add_tiled")?;
        let (rb, cb) = match self.value(b).shape() {
            &[c] => (1, c),
            &[r, c] => (r, c),
            s => return Err(shape_err("add_tiled", format!("tile must be a vector or matrix, got {s:?}"))),
        };
        if ca != cb || rb == 0 || ra % rb != 0 {
            return Err(shape_err("add_tiled", format!("[{ra}, {ca}] + tiled [{rb}, {cb}]")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = va.to_vec();
        for (i, row) in out.chunks_mut(ca).enumerate() {
            let tile = &vb[(i % rb) * cb..(i % rb + 1) * cb];
            row.iter_mut().zip(tile).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_rows(ra, ca, out)?, Op::AddTiled(a, b), rg, "add_tiled")
    }

    /// Row-wise layer normalisation (ε = 1e-5) with gain and bias of width C.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        for v in [x, gain, bias] {
            self.check(v, "layer_norm")?;
        }
        let (rows, cols) = self.value(x).dims2("layer_norm")?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape_err(
                "layer_norm",
                format!("width {cols} vs gain {:?} / bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        self.push(Tensor::from_rows(rows, cols, out)?, op, rg, "layer_norm")
    }

    /// Row-wise softmax. `mask[i]` false excludes entry `i`; fully-masked rows
    /// come out uniform.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check(x, "softmax")?;
        let (rows, cols) = self.value(x).dims2("softmax")?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(shape_err("softmax", format!("mask of {} for [{rows}, {cols}]", m.len())));
            }
        }
        let mut out = self.value(x).data().to_vec();
        let mut dead_rows = vec![false; rows];
        for (r, row) in out.chunks_mut(cols).enumerate() {
            dead_rows[r] = softmax_in_place(row, |j| mask.is_none_or(|m| m[r * cols + j]));
        }
        let rg = self.rg(x);
        self.push(Tensor::from_rows(rows, cols, out)?, Op::Softmax { x, dead_rows }, rg, "softmax")
    }

    /// Multi-head scaled dot-product attention over a batch of independent
    /// sequences stacked by rows: `q` is `[batch·tq, d]`, `k` and `v` are
    /// `[batch·tk, d]`. `key_mask` (length `batch·tk`) marks keys that may be
    /// attended to.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        for x in [q, k, v] {
            self.check(x, "attention")?;
        }
        let (rq, d) = self.value(q).dims2("attention")?;
        let (rk, dk) = self.value(k).dims2("attention")?;
        let (rv, dv) = self.value(v).dims2("attention")?;
        if batch == 0 || heads == 0 || d % heads != 0 || dk != d || dv != d || rk != rv || rq % batch != 0 || rk % batch != 0 {
            return Err(shape_err(
                "attention",
                format!("q [{rq}, {d}], k [{rk}, {dk}], v [{rv}, {dv}], batch {batch}, heads {heads}"),
            ));
        }
        let dims = AttnDims { batch, heads, tq: rq / batch, tk: rk / batch, d };
        if let Some(m) = key_mask {
            if m.len() != rk {
                return Err(shape_err("attention", format!("key mask of {} for {rk} keys", m.len())));
            }
        }
        let AttnDims { tq, tk, .. } = dims;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut dead_rows = vec![false; batch * heads * tq];
        let mut out = vec![0.0; rq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qi = &qv[(b * tq + i) * d + off..][..dh];
                    let base = ((b * heads + h) * tq + i) * tk;
                    let row = &mut probs[base..base + tk];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * tk + j) * d + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    dead_rows[(b * heads + h) * tq + i] =
                        softmax_in_place(row, |j| key_mask.is_none_or(|m| m[b * tk + j]));
                    let oi = &mut out[(b * tq + i) * d + off..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vv[(b * tk + j) * d + off..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention { q, k, v, dims, probs, dead_rows };
        self.push(Tensor::from_rows(rq, d, out)?, op, rg, "attention")
    }

    /// 2-D convolution: `x [B, Ci, H, W]`, `w [Co, Ci, kh, kw]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v, "conv2d")?;
        }
        let (batch, c_in, h, wd) = match self.shape(x) {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(shape_err("conv2d", format!("input must be [B, C, H, W], got {s:?}"))),
        };
        let (c_out, kh, kw) = match self.shape(w) {
            &[o, i, kh, kw] if i == c_in => (o, kh, kw),
            s => return Err(shape_err("conv2d", format!("kernel {s:?} for {c_in} input channels"))),
        };
        if self.value(b).len() != c_out {
            return Err(shape_err("conv2d", format!("bias {:?} for {c_out} output channels", self.shape(b))));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}")));
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, hw) = (dims.patch(), dims.spatial_out());
        let xv = self.value(x).data();
        let mut cols = vec![0.0; batch * patch * hw];
        for bi in 0..batch {
            im2col(&xv[bi * c_in * h * wd..][..c_in * h * wd], &dims, &mut cols[bi * patch * hw..][..patch * hw]);
        }
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * c_out * hw];
        for bi in 0..batch {
            let o = &mut out[bi * c_out * hw..][..c_out * hw];
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.fill(bv[co]);
            }
            gemm(
                MatRef::new(wv, c_out, patch),
                MatRef::new(&cols[bi * patch * hw..][..patch * hw], patch, hw),
                1.0,
                o,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::new(vec![batch, c_out, dims.h_out, dims.w_out], out)?;
        self.push(t, Op::Conv2d { x, w, b, dims, cols }, rg, "conv2d")
    }

    /// `[B, C, H, W]` feature maps to `[B·H·W, C]` tokens (row-major over
    /// the spatial grid within each sample).
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        self.check(x, "to_tokens")?;
        let (b, c, h, w) = match self.shape(x) {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(shape_err("to_tokens", format!("expected [B, C, H, W], got {s:?}"))),
        };
        let xv = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = xv[(bi * c + ci) * hw + p];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_rows(b * hw, c, out)?, Op::ToTokens(x), rg, "to_tokens")
    }

    /// Concatenate per-sample sequences: each part is `[batch·T_i, C]` and the
    /// result is `[batch·ΣT_i, C]` with each sample's rows contiguous.
    pub fn concat_seq(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        if parts.is_empty() || batch == 0 {
            return Err(shape_err("concat_seq", "need at least one part and a non-zero batch"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        let mut width = None;
        for &p in parts {
            self.check(p, "concat_seq")?;
            let (r, c) = self.value(p).dims2("concat_seq")?;
            if r % batch != 0 || width.is_some_and(|w| w != c) {
                return Err(shape_err("concat_seq", format!("part [{r}, {c}] with batch {batch}")));
            }
            width = Some(c);
            lens.push(r / batch);
        }
        let c = width.unwrap_or(0);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(batch * total * c);
        for bi in 0..batch {
            for (&p, &t) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[bi * t * c..(bi + 1) * t * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::ConcatSeq { parts: parts.to_vec(), batch };
        self.push(Tensor::from_rows(batch * total, c, out)?, op, rg, "concat_seq")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x, "slice_cols")?;
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x).data();
        let out = (0..r).flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied()).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_rows(r, len, out)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x, "select_rows")?;
        let (r, c) = self.value(x).dims2("select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("select_rows", format!("row {bad} of {r}")));
        }
        let xv = self.value(x).data();
        let out = rows.iter().flat_map(|&i| xv[i * c..(i + 1) * c].iter().copied()).collect();
        let rg = self.rg(x);
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        self.push(Tensor::from_rows(rows.len(), c, out)?, op, rg, "select_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x, "reshape")?;
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.shape(x))));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Reverse-mode sweep from the scalar `loss`. Gradients of every node that
    /// requires one become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "backward called before the loss was computed on this graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        let elementwise = |grads: &mut [Option<Vec<f64>>], a: Var, f: &dyn Fn(usize) -> f64| {
            if rg(a) {
                let ga = accumulate(&mut grads[a.0], len(a));
                for (j, x) in ga.iter_mut().enumerate() {
                    *x += g[j] * f(j);
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                elementwise(grads, *a, &|j| vb[j]);
                elementwise(grads, *b, &|j| va[j]);
            }
            Op::Scale(a, c) => elementwise(grads, *a, &|_| *c),
            Op::AddScalar(a) => elementwise(grads, *a, &|_| 1.0),
            Op::MulConst(a, c) => elementwise(grads, *a, &|j| c[j]),
            Op::Gelu(a) => {
                let va = val(*a);
                elementwise(grads, *a, &|j| gelu_grad(va[j]));
            }
            Op::Relu(a) => {
                let va = val(*a);
                elementwise(grads, *a, &|j| if va[j] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Tanh(a) => elementwise(grads, *a, &|j| 1.0 - out[j] * out[j]),
            Op::Exp(a) => elementwise(grads, *a, &|j| out[j]),
            Op::Abs(a) => {
                let va = val(*a);
                elementwise(grads, *a, &|j| {
                    if va[j] > 0.0 {
                        1.0
                    } else if va[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], len(*a)).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Reshape(a) => elementwise(grads, *a, &|_| 1.0),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").expect("checked");
                let n = node.value.shape()[1];
                let gm = MatRef::new(g, m, n);
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(gm, MatRef::new(val(*b), k, n).t(), 1.0, ga);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(MatRef::new(val(*a), m, k).t(), gm, 1.0, gb);
                }
            }
            Op::AddTiled(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                if rg(*b) {
                    let nb = len(*b);
                    let gb = accumulate(&mut grads[b.0], nb);
                    for (j, x) in g.iter().enumerate() {
                        gb[j % nb] += x;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = len(*gain);
                let gv = val(*gain);
                if rg(*gain) {
                    let gg = accumulate(&mut grads[gain.0], cols);
                    for (j, x) in g.iter().enumerate() {
                        gg[j % cols] += x * xhat[j];
                    }
                }
                if rg(*bias) {
                    let gb = accumulate(&mut grads[bias.0], cols);
                    for (j, x) in g.iter().enumerate() {
                        gb[j % cols] += x;
                    }
                }
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, &s) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            m1 += d;
                            m2 += d * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += s * (gr[c] * gv[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, dead_rows } => {
                if rg(*x) {
                    let cols = node.value.shape()[1];
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, &dead) in dead_rows.iter().enumerate() {
                        if dead {
                            continue;
                        }
                        let p = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += p[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs, dead_rows } => {
                self.backprop_attention(*q, *k, *v, dims, probs, dead_rows, g, grads);
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                self.backprop_conv(*x, *w, *b, dims, cols, g, grads);
            }
            Op::ToTokens(x) => {
                if rg(*x) {
                    let (b, c, h, w) = match self.nodes[x.0].value.shape() {
                        &[b, c, h, w] => (b, c, h, w),
                        _ => unreachable!(),
                    };
                    let hw = h * w;
                    let gx = accumulate(&mut grads[x.0], b * c * hw);
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..hw {
                                gx[(bi * c + ci) * hw + p] += g[(bi * hw + p) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::ConcatSeq { parts, batch } => {
                let c = node.value.shape()[1];
                let lens: Vec<usize> = parts.iter().map(|p| len(*p) / c / batch).collect();
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &t) in parts.iter().zip(&lens) {
                    if rg(p) {
                        let gp = accumulate(&mut grads[p.0], len(p));
                        for bi in 0..*batch {
                            let src = &g[(bi * total + offset) * c..][..t * c];
                            gp[bi * t * c..(bi + 1) * t * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += t;
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let (r, width) = node.value.dims2("slice_cols").expect("checked");
                    let c = self.nodes[x.0].value.shape()[1];
                    let gx = accumulate(&mut grads[x.0], r * c);
                    for i in 0..r {
                        for j in 0..width {
                            gx[i * c + start + j] += g[i * width + j];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if rg(*x) {
                    let c = node.value.shape()[1];
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    for (o, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[o * c + j];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: &AttnDims,
        probs: &[f64],
        dead_rows: &[bool],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnDims { batch, heads, tq, tk, d } = *dims;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let (rq, rk, rv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut gq = rq.then(|| vec![0.0; qv.len()]);
        let mut gk = rk.then(|| vec![0.0; kv.len()]);
        let mut gv = rv.then(|| vec![0.0; vv.len()]);
        let mut dp = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let row_id = (b * heads + h) * tq + i;
                    let p = &probs[row_id * tk..(row_id + 1) * tk];
                    let go = &g[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        let vj = &vv[(b * tk + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        if let Some(gv) = gv.as_mut() {
                            let gvj = &mut gv[(b * tk + j) * d + off..][..dh];
                            gvj.iter_mut().zip(go).for_each(|(a, x)| *a += p[j] * x);
                        }
                    }
                    if dead_rows[row_id] || (gq.is_none() && gk.is_none()) {
                        continue;
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..tk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if let Some(gq) = gq.as_mut() {
                            let kj = &kv[(b * tk + j) * d + off..][..dh];
                            let gqi = &mut gq[(b * tq + i) * d + off..][..dh];
                            gqi.iter_mut().zip(kj).for_each(|(a, x)| *a += ds * x);
                        }
                        if let Some(gk) = gk.as_mut() {
                            let qi = &qv[(b * tq + i) * d + off..][..dh];
                            let gkj = &mut gk[(b * tk + j) * d + off..][..dh];
                            gkj.iter_mut().zip(qi).for_each(|(a, x)| *a += ds * x);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let acc = accumulate(&mut grads[var.0], local.len());
                acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Var,
        dims: &ConvDims,
        cols: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (patch, hw) = (dims.patch(), dims.spatial_out());
        let c_out = dims.c_out;
        let wv = self.nodes[w.0].value.data();
        if self.nodes[b.0].requires_grad {
            let gb = accumulate(&mut grads[b.0], c_out);
            for bi in 0..dims.batch {
                for co in 0..c_out {
                    gb[co] += g[(bi * c_out + co) * hw..][..hw].iter().sum::<f64>();
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let gw = accumulate(&mut grads[w.0], c_out * patch);
            for bi in 0..dims.batch {
                gemm(
                    MatRef::new(&g[bi * c_out * hw..][..c_out * hw], c_out, hw),
                    MatRef::new(&cols[bi * patch * hw..][..patch * hw], patch, hw).t(),
                    1.0,
                    gw,
                );
            }
        }
        if self.nodes[x.0].requires_grad {
            let image = dims.c_in * dims.h * dims.w;
            let gx = accumulate(&mut grads[x.0], dims.batch * image);
            let mut dcols = vec![0.0; patch * hw];
            for bi in 0..dims.batch {
                gemm(
                    MatRef::new(wv, c_out, patch).t(),
                    MatRef::new(&g[bi * c_out * hw..][..c_out * hw], c_out, hw),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, dims, &mut gx[bi * image..][..image]);
            }
        }
    }

    /// Add this graph's parameter gradients into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParameterSet) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                let p = params
                    .get_mut(name)
                    .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
                if p.grad.len() != g.len() {
                    return Err(shape_err("accumulate_param_grads", format!("{name}: {} vs {}", p.grad.len(), g.len())));
                }
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let hw = d.spatial_out();
    for ci in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        dst[oy * d.w_out + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            x[(ci * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let hw = d.spatial_out();
    for ci in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            gx[(ci * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
