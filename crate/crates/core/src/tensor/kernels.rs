//! Slice-level numeric kernels. No shape validation happens here; callers in
//! the op layer check shapes before dispatching.

use crate::error::{Error, Result};

/// Zero padding applied around the two spatial axes of a convolution input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn same(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates the geometry and derives the output size. The padded
    /// extent minus the kernel must be an exact multiple of the stride.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        c_in: usize,
        height: usize,
        width: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let ph = height + pad.top + pad.bottom;
        let pw = width + pad.left + pad.right;
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "non-integral convolution output: padded {ph}x{pw}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - left` is in range.
    fn valid_range(out: usize, k_off: usize, pad: usize, stride: usize, extent: usize) -> (usize, usize) {
        // need 0 <= o*s + k - pad < extent
        let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
        if k_off >= extent + pad {
            return (0, 0);
        }
        let limit = extent + pad - k_off; // o*s < limit
        let hi = limit.div_ceil(stride).min(out);
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(n * g.c_out + co) * plane_out..(n * g.c_out + co + 1) * plane_out];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.c_in {
                let xin = &x[(n * g.c_in + ci) * plane_in..(n * g.c_in + ci + 1) * plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeometry::valid_range(g.out_h, ky, g.pad.top, g.stride, g.height);
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = ConvGeometry::valid_range(g.out_w, kx, g.pad.left, g.stride, g.width);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad.top;
                            let xrow = &xin[iy * g.width..(iy + 1) * g.width];
                            let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad.left;
                                let n_x = ox1 - ox0;
                                for (ov, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + n_x]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad.left;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for the upstream gradient `gout`. Skipped outputs
/// are returned empty.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if need_dw { vec![0.0; w.len()] } else { Vec::new() };
    let mut db = if need_db { vec![0.0; g.c_out] } else { Vec::new() };
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let go = &gout[(n * g.c_out + co) * plane_out..(n * g.c_out + co + 1) * plane_out];
            if need_db {
                db[co] += go.iter().sum::<f64>();
            }
            if !need_dx && !need_dw {
                continue;
            }
            for ci in 0..g.c_in {
                let base_in = (n * g.c_in + ci) * plane_in;
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeometry::valid_range(g.out_h, ky, g.pad.top, g.stride, g.height);
                    for kx in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = ConvGeometry::valid_range(g.out_w, kx, g.pad.left, g.stride, g.width);
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad.top;
                            let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                            let row_base = base_in + iy * g.width;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad.left;
                                let gv = grow[ox];
                                if need_dw {
                                    wacc += gv * x[row_base + ix];
                                }
                                if need_dx {
                                    dx[row_base + ix] += gv * wv;
                                }
                            }
                        }
                        if need_dw {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Transposes `data` (viewed with `shape`) so that output axis `i` is input
/// axis `axes[i]`.
pub fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_step = step[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_step]);
        }
        // advance the outer multi-index (all axes but the last)
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source index along one axis under reflect padding (edge not repeated).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}
