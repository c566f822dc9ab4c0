//! Transformer and convolutional building blocks over a [`Graph`], reading
//! weights by name from a [`ParameterSet`].

use crate::tensor::{Graph, ParameterSet, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// `x · W + b` with `W [in, out]` at `{name}.w` and `b [out]` at `{name}.b`.
pub(crate) fn linear(g: &mut Graph, ps: &ParameterSet, x: Var, name: &str) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_tiled(y, b)
}

fn norm(g: &mut Graph, ps: &ParameterSet, x: Var, name: &str) -> Result<Var> {
    let gain = g.param(ps, &format!("{name}.g"))?;
    let bias = g.param(ps, &format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head(
    g: &mut Graph,
    ps: &ParameterSet,
    name: &str,
    xq: Var,
    xkv: Var,
    batch: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(g, ps, xq, &format!("{name}.q"))?;
    let k = linear(g, ps, xkv, &format!("{name}.k"))?;
    let v = linear(g, ps, xkv, &format!("{name}.v"))?;
    let a = g.attention(q, k, v, batch, heads, key_mask)?;
    linear(g, ps, a, &format!("{name}.o"))
}

fn feed_forward(g: &mut Graph, ps: &ParameterSet, x: Var, name: &str) -> Result<Var> {
    let h = linear(g, ps, x, &format!("{name}.ff1"))?;
    let h = g.gelu(h)?;
    linear(g, ps, h, &format!("{name}.ff2"))
}

/// Post-norm encoder layer: self-attention, then feed-forward.
pub(crate) fn encoder_layer(
    g: &mut Graph,
    ps: &ParameterSet,
    name: &str,
    x: Var,
    batch: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let a = multi_head(g, ps, &format!("{name}.attn"), x, x, batch, heads, key_mask)?;
    let s = g.add(x, a)?;
    let h = norm(g, ps, s, &format!("{name}.ln1"))?;
    let f = feed_forward(g, ps, h, name)?;
    let s = g.add(h, f)?;
    norm(g, ps, s, &format!("{name}.ln2"))
}

/// Post-norm decoder layer: self-attention over queries, cross-attention
/// into `memory`, then feed-forward.
pub(crate) fn decoder_layer(
    g: &mut Graph,
    ps: &ParameterSet,
    name: &str,
    x: Var,
    memory: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let a = multi_head(g, ps, &format!("{name}.self"), x, x, batch, heads, None)?;
    let s = g.add(x, a)?;
    let h = norm(g, ps, s, &format!("{name}.ln1"))?;
    let c = multi_head(g, ps, &format!("{name}.cross"), h, memory, batch, heads, None)?;
    let s = g.add(h, c)?;
    let h = norm(g, ps, s, &format!("{name}.ln2"))?;
    let f = feed_forward(g, ps, h, name)?;
    let s = g.add(h, f)?;
    norm(g, ps, s, &format!("{name}.ln3"))
}

/// Strided residual block: `gelu(conv3x3/2 → gelu → conv3x3 + conv1x1/2)`.
pub(crate) fn residual_block(g: &mut Graph, ps: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let conv = |g: &mut Graph, x: Var, part: &str, stride: usize, pad: usize| -> Result<Var> {
        let w = g.param(ps, &format!("{name}.{part}.w"))?;
        let b = g.param(ps, &format!("{name}.{part}.b"))?;
        g.conv2d(x, w, b, stride, pad)
    };
    let y = conv(g, x, "conv1", 2, 1)?;
    let y = g.gelu(y)?;
    let y = conv(g, y, "conv2", 1, 1)?;
    let s = conv(g, x, "skip", 2, 0)?;
    let y = g.add(y, s)?;
    g.gelu(y)
}

/// Broadcast a `[1, d]`/`[d]` parameter to `rows` rows.
pub(crate) fn tile_param(g: &mut Graph, ps: &ParameterSet, name: &str, rows: usize) -> Result<Var> {
    let p = g.param(ps, name)?;
    let width = *g.shape(p).last().unwrap_or(&0);
    let zeros = g.constant(Tensor::zeros(vec![rows, width]))?;
    g.add_tiled(zeros, p)
}

/// 2-D sinusoidal positional encoding for an `h × w` grid, `[h·w, d]`
/// row-major over the grid. The first `d/2` channels encode the row index,
/// the rest the column index; within each half, channel pairs `(2i, 2i+1)`
/// hold `sin` and `cos` at frequency `10000^(−2i/(d/2))`.
pub fn sine_pe_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..][..d];
            for (part, pos) in [(0usize, y as f64), (half, x as f64)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    row[part + 2 * i] = (pos * freq).sin();
                    row[part + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    out
}
