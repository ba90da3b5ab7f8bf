//! Raw numeric kernels over flat `f64` buffers. Shape checking lives in the
//! graph layer; these functions assume consistent arguments.

use matrixmultiply::dgemm;

/// Strided matrix view used to express transposes without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols as isize, 1)
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: isize, cs: isize) -> Self {
        debug_assert!(
            rows == 0
                || cols == 0
                || ((rows - 1) as isize * rs + (cols - 1) as isize * cs) < data.len() as isize
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta·c + a·b`, where `c` is `a.rows × b.cols` with row stride `rsc`.
pub(crate) fn gemm_into(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * rsc + n, "gemm output buffer too small");
    // SAFETY: the asserts above and the MatRef constructors bound every
    // index the kernel touches inside the provided slices.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let mut c = vec![0.0; a.rows * b.cols];
    gemm_into(a, b, 0.0, &mut c, b.cols);
    c
}

/// In-place numerically stable softmax over consecutive rows of length `n`.
pub(crate) fn softmax_rows(x: &mut [f64], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of a row softmax: `dx = p ⊙ (dp − Σ dp⊙p)`, written over `dp`.
pub(crate) fn softmax_rows_backward(p: &[f64], dp: &mut [f64], n: usize) {
    for (prow, grow) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
        let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
        for (g, &pv) in grow.iter_mut().zip(prow) {
            *g = pv * (*g - dot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences. `q`, `k`, `v` and the result are `[batch, len, dim]`; `probs`
/// is `[batch, heads, len, len]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let seq = len * dim;
    let mut out = vec![0.0; batch * seq];
    let mut probs = vec![0.0; batch * heads * len * len];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq + h * hd;
            let qh = MatRef::strided(&q[off..], len, hd, dim as isize, 1);
            let kh = MatRef::strided(&k[off..], len, hd, dim as isize, 1);
            let vh = MatRef::strided(&v[off..], len, hd, dim as isize, 1);
            let p = &mut probs[(b * heads + h) * len * len..][..len * len];
            gemm_into(qh, kh.t(), 0.0, p, len);
            for s in p.iter_mut() {
                *s *= scale;
            }
            softmax_rows(p, len);
            gemm_into(MatRef::rows(p, len, len), vh, 0.0, &mut out[off..], dim);
        }
    }
    (out, probs)
}

fn head_view(buf: &[f64], off: usize, len: usize, hd: usize, dim: usize) -> MatRef<'_> {
    MatRef::strided(&buf[off..], len, hd, dim as isize, 1)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let seq = len * dim;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; len * len];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq + h * hd;
            let p = &probs[(b * heads + h) * len * len..][..len * len];
            let pm = MatRef::rows(p, len, len);
            gemm_into(pm.t(), head_view(dout, off, len, hd, dim), 0.0, &mut dv[off..], dim);
            gemm_into(head_view(dout, off, len, hd, dim), head_view(v, off, len, hd, dim).t(), 0.0, &mut ds, len);
            softmax_rows_backward(p, &mut ds, len);
            for s in ds.iter_mut() {
                *s *= scale;
            }
            let dsm = MatRef::rows(&ds, len, len);
            gemm_into(dsm, head_view(k, off, len, hd, dim), 0.0, &mut dq[off..], dim);
            gemm_into(dsm.t(), head_view(q, off, len, hd, dim), 0.0, &mut dk[off..], dim);
        }
    }
    (dq, dk, dv)
}

/// Row statistics for layer norm: per row of length `c`, returns (mean, 1/std).
pub(crate) fn row_moments(x: &[f64], c: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks_exact(c)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// For tap `(dt, dh, dw)`, maps each output position to its input row,
    /// or `None` where the tap lands in padding.
    fn tap_rows(&self, tap: [usize; 3]) -> impl Iterator<Item = Option<usize>> + '_ {
        let [ot, oh, ow] = self.output;
        (0..ot * oh * ow).map(move |p| {
            let pos = [p / (oh * ow), (p / ow) % oh, p % ow];
            let mut idx = 0usize;
            for a in 0..3 {
                let i = (pos[a] * self.stride[a] + tap[a]) as isize - self.padding[a] as isize;
                if i < 0 || i >= self.input[a] as isize {
                    return None;
                }
                idx = idx * self.input[a] + i as usize;
            }
            Some(idx)
        })
    }

    fn tap_index(&self, t: usize) -> [usize; 3] {
        let [_, kh, kw] = self.kernel;
        [t / (kh * kw), (t / kw) % kh, t % kw]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

fn gather_tap(x: &[f64], g: &ConvGeom, tap: [usize; 3], col: &mut [f64]) {
    let c = g.cin;
    for (p, src) in g.tap_rows(tap).enumerate() {
        let dst = &mut col[p * c..(p + 1) * c];
        match src {
            Some(i) => dst.copy_from_slice(&x[i * c..(i + 1) * c]),
            None => dst.fill(0.0),
        }
    }
}

/// Channels-last convolution. `x` is `[T, H, W, cin]`, `kernel` is
/// `[kt, kh, kw, cin, cout]`.
pub(crate) fn conv3d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let np = g.out_positions();
    let mut out = vec![0.0; np * g.cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b);
        }
    }
    let kslice = g.cin * g.cout;
    if g.is_pointwise() {
        gemm_into(
            MatRef::rows(x, np, g.cin),
            MatRef::rows(kernel, g.cin, g.cout),
            1.0,
            &mut out,
            g.cout,
        );
        return out;
    }
    let mut col = vec![0.0; np * g.cin];
    for t in 0..g.taps() {
        gather_tap(x, g, g.tap_index(t), &mut col);
        gemm_into(
            MatRef::rows(&col, np, g.cin),
            MatRef::rows(&kernel[t * kslice..(t + 1) * kslice], g.cin, g.cout),
            1.0,
            &mut out,
            g.cout,
        );
    }
    out
}

/// Returns `(dx, dkernel, dbias)`.
pub(crate) fn conv3d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let np = g.out_positions();
    let kslice = g.cin * g.cout;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.cout];
    for row in dout.chunks_exact(g.cout) {
        for (d, r) in db.iter_mut().zip(row) {
            *d += r;
        }
    }
    let dy = MatRef::rows(dout, np, g.cout);
    if g.is_pointwise() {
        gemm_into(dy, MatRef::rows(kernel, g.cin, g.cout).t(), 0.0, &mut dx, g.cin);
        gemm_into(MatRef::rows(x, np, g.cin).t(), dy, 0.0, &mut dk, g.cout);
        return (dx, dk, db);
    }
    let mut col = vec![0.0; np * g.cin];
    let mut dcol = vec![0.0; np * g.cin];
    for t in 0..g.taps() {
        let tap = g.tap_index(t);
        let ks = &kernel[t * kslice..(t + 1) * kslice];
        gather_tap(x, g, tap, &mut col);
        gemm_into(
            MatRef::rows(&col, np, g.cin).t(),
            dy,
            0.0,
            &mut dk[t * kslice..(t + 1) * kslice],
            g.cout,
        );
        gemm_into(dy, MatRef::rows(ks, g.cin, g.cout).t(), 0.0, &mut dcol, g.cin);
        for (p, dst) in g.tap_rows(tap).enumerate() {
            if let Some(i) = dst {
                for (a, b) in dx[i * g.cin..(i + 1) * g.cin]
                    .iter_mut()
                    .zip(&dcol[p * g.cin..(p + 1) * g.cin])
                {
                    *a += b;
                }
            }
        }
    }
    (dx, dk, db)
}

const CUBIC_A: f64 = -0.75;

fn cubic_near(x: f64) -> f64 {
    ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
}

fn cubic_far(x: f64) -> f64 {
    ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
}

/// Four clamped source taps and weights for one output coordinate,
/// half-pixel aligned (`align_corners = false`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct CubicTaps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

pub(crate) fn cubic_taps(input: usize, output: usize) -> Vec<CubicTaps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let clamp = |i: isize| i.clamp(0, input as isize - 1) as usize;
            CubicTaps {
                idx: [clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)],
                w: [cubic_far(t + 1.0), cubic_near(t), cubic_near(1.0 - t), cubic_far(2.0 - t)],
            }
        })
        .collect()
}

/// Interpolates relative to the nearest tap so constant inputs stay exact.
pub(crate) fn cubic_combine(taps: &CubicTaps, get: impl Fn(usize) -> f64) -> f64 {
    let anchor = get(taps.idx[1]);
    anchor
        + taps
            .idx
            .iter()
            .zip(&taps.w)
            .map(|(&i, &w)| w * (get(i) - anchor))
            .sum::<f64>()
}
