//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{self, ConvGeometry, Padding};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `b_shape` broadcast against it. `b_shape` must have the same rank with
/// every dim equal to the output dim or 1.
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let b_strides = kernels::strides(b_shape);
    let eff: Vec<usize> = b_shape
        .iter()
        .zip(&b_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let numel: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tape {
    fn binary(&mut self, op: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let same = sa == sb;
        if !same && (sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != x && y != 1)) {
            return Err(dim_err(op, &sa, &sb));
        }
        let map = if same { None } else { Some(broadcast_map(&sa, &sb)) };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bidx(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let b_len = bv.len();
        let value = Tensor::from_parts(sa, data);
        self.push(op, &[a, b], value, move |ctx| {
            let g = ctx.grad;
            let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            let da = ctx.needs[0].then(|| match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => {
                    let b = ctx.inputs[1].data();
                    g.iter().enumerate().map(|(i, &gv)| gv * b[bidx(i)]).collect()
                }
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![0.0; b_len];
                let a = ctx.inputs[0].data();
                for (i, &gv) in g.iter().enumerate() {
                    db[bidx(i)] += match kind {
                        Binary::Add => gv,
                        Binary::Sub => -gv,
                        Binary::Mul => gv * a[i],
                    };
                }
                db
            });
            vec![da, db]
        })
    }

    /// Elementwise `a + b`; `b` may broadcast along size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    /// Elementwise `a * b`; `b` may broadcast along size-1 dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", &[x], value, move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", &[x], value, |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", &[x], value, |ctx| {
            let n = ctx.inputs[0].len();
            vec![Some(vec![ctx.grad[0] / n as f64; n])]
        })
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", &[a, b], value, move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let da = ctx.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                kernels::matmul_nt(g, bv, m, n, k, &mut d);
                d
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                kernels::matmul_tn(av, g, k, m, n, &mut d);
                d
            });
            vec![da, db]
        })
    }

    /// Affine map over the last axis: `x[..×k] · w[k×n] + bias[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return Err(dim_err("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(dim_err("linear", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / k;
        let mut out = match bias {
            Some(b) => self.value(b).data().repeat(rows),
            None => vec![0.0; rows * n],
        };
        kernels::matmul_nn(self.value(x).data(), self.value(w).data(), rows, k, n, &mut out);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("linear", &inputs, value, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let dx = ctx.needs[0].then(|| {
                let mut d = vec![0.0; rows * k];
                kernels::matmul_nt(g, wv, rows, n, k, &mut d);
                d
            });
            let dw = ctx.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                kernels::matmul_tn(xv, g, k, rows, n, &mut d);
                d
            });
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    d
                }));
            }
            res
        })
    }

    /// Batched product `alpha · a[B×m×k] · b[B×k×n]`, or `· b[B×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let (ab, bb) = (&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n]);
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(ab, bb, m, k, n, ob);
            } else {
                kernels::matmul_nn(ab, bb, m, k, n, ob);
            }
        }
        if alpha != 1.0 {
            out.iter_mut().for_each(|v| *v *= alpha);
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        self.push("bmm", &[a, b], value, move |ctx| {
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g: Vec<f64> = ctx.grad.iter().map(|v| v * alpha).collect();
            let mut da = ctx.needs[0].then(|| vec![0.0; batch * m * k]);
            let mut db = ctx.needs[1].then(|| vec![0.0; batch * k * n]);
            for i in 0..batch {
                let gb = &g[i * m * n..(i + 1) * m * n];
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                if let Some(d) = da.as_mut() {
                    let d = &mut d[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // b is n×k: dA = G·B
                        kernels::matmul_nn(gb, bb, m, n, k, d);
                    } else {
                        kernels::matmul_nt(gb, bb, m, n, k, d);
                    }
                }
                if let Some(d) = db.as_mut() {
                    let d = &mut d[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // dB[n×k] = Gᵀ·A
                        kernels::matmul_tn(gb, ab, n, m, k, d);
                    } else {
                        kernels::matmul_tn(ab, gb, k, m, n, d);
                    }
                }
            }
            vec![da, db]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let value = Tensor::from_parts(shape, kernels::softmax_rows(self.value(x).data(), n));
        self.push("softmax", &[x], value, move |ctx| {
            let y = ctx.output.data();
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .chunks_exact(n)
                .zip(ctx.grad.chunks_exact(n))
                .zip(d.chunks_exact_mut(n))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err("layer_norm", &sx, self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let (mu, inv) = row_stats(row, eps);
            for j in 0..c {
                orow[j] = (row[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        let value = Tensor::from_parts(sx, out);
        self.push("layer_norm", &[x, gamma, beta], value, move |ctx| {
            let (xv, gam, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut dx = ctx.needs[0].then(|| vec![0.0; xv.len()]);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for (r, (row, grow)) in xv.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                let (mu, inv) = row_stats(row, eps);
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    xhat[j] = (row[j] - mu) * inv;
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                    dxhat[j] = grow[j] * gam[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                if let Some(dx) = dx.as_mut() {
                    let drow = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        drow[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
            }
            vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        self.push("gelu", &[x], value, |ctx| {
            let xv = ctx.inputs[0].data();
            vec![Some(
                xv.iter()
                    .zip(ctx.grad)
                    .map(|(&v, &g)| g * kernels::gelu_grad(v))
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", &[x], value, |ctx| {
            let y = ctx.output.data();
            vec![Some(y.iter().zip(ctx.grad).map(|(&s, &g)| g * s * (1.0 - s)).collect())]
        })
    }

    /// 2-D cross-correlation (no kernel flip). `x` is `[N×C_in×H×W]` or
    /// `[C_in×H×W]`; `w` is `[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let batched = sx.len() == 4;
        if !(sx.len() == 3 || batched) || sw.len() != 4 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (n, c, h, wd) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        if sw[1] != c {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(dim_err("conv2d", &sw, self.shape(b)));
            }
        }
        let geo = ConvGeometry::new(n, c, h, wd, sw[0], sw[2], sw[3], stride, pad)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geo,
        );
        let shape = if batched {
            vec![n, geo.c_out, geo.out_h, geo.out_w]
        } else {
            vec![geo.c_out, geo.out_h, geo.out_w]
        };
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", &inputs, value, move |ctx| {
            let has_bias = ctx.inputs.len() == 3;
            let need_db = has_bias && ctx.needs[2];
            let (dx, dw, db) = kernels::conv2d_backward(
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.grad,
                &geo,
                ctx.needs[0],
                ctx.needs[1],
                need_db,
            );
            let mut res = vec![ctx.needs[0].then_some(dx), ctx.needs[1].then_some(dw)];
            if has_bias {
                res.push(need_db.then_some(db));
            }
            res
        })
    }

    /// Sub-pixel rearrangement `[N×C·r²×H×W] → [N×C×rH×rW]` (also accepts
    /// unbatched 3-D input).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let batched = sx.len() == 4;
        if !(sx.len() == 3 || batched) || r == 0 {
            return Err(Error::Shape {
                shape: sx,
                reason: "pixel_shuffle expects a 3-D or 4-D tensor and r > 0".into(),
            });
        }
        let (n, c, h, w) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        if c % (r * r) != 0 {
            return Err(Error::Shape {
                shape: sx,
                reason: format!("channels not divisible by r^2 = {}", r * r),
            });
        }
        let co = c / (r * r);
        // view [n, co, r, r, h, w] -> [n, co, h, r, w, r]
        let view = [n, co, r, r, h, w];
        let axes = [0, 1, 4, 2, 5, 3];
        let out_shape = if batched {
            vec![n, co, h * r, w * r]
        } else {
            vec![co, h * r, w * r]
        };
        self.permute_view_named("pixel_shuffle", x, &view, &axes, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", &[x], value, |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// Reinterprets `x` as `view`, permutes axes, and returns the result with
    /// shape `out_shape` (same element count).
    pub fn permute_view(&mut self, x: Var, view: &[usize], axes: &[usize], out_shape: &[usize]) -> Result<Var> {
        self.permute_view_named("permute", x, view, axes, out_shape)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<usize> = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(0)).collect();
        self.permute_view(x, &shape, axes, &out)
    }

    fn permute_view_named(
        &mut self,
        op: &'static str,
        x: Var,
        view: &[usize],
        axes: &[usize],
        out_shape: &[usize],
    ) -> Result<Var> {
        let numel = self.value(x).len();
        let mut seen = vec![false; view.len()];
        let valid_axes = axes.len() == view.len()
            && axes
                .iter()
                .all(|&a| a < view.len() && !std::mem::replace(&mut seen[a], true));
        if !valid_axes || view.iter().product::<usize>() != numel || out_shape.iter().product::<usize>() != numel {
            return Err(dim_err(op, self.shape(x), out_shape));
        }
        let data = kernels::permute(self.value(x).data(), view, axes);
        let value = Tensor::new(out_shape, data)?;
        let permuted_view: Vec<usize> = axes.iter().map(|&a| view[a]).collect();
        let inv = kernels::inverse_axes(axes);
        self.push(op, &[x], value, move |ctx| {
            vec![Some(kernels::permute(ctx.grad, &permuted_view, &inv))]
        })
    }

    /// Cyclic shift of the last two axes: output `[.., (i+dy) mod H, (j+dx) mod W]`
    /// takes input `[.., i, j]`.
    pub fn roll2d(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                shape: sx,
                reason: "roll2d needs at least two axes".into(),
            });
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let value = Tensor::from_parts(sx, roll_planes(self.value(x).data(), h, w, dy, dx));
        self.push("roll2d", &[x], value, move |ctx| {
            vec![Some(roll_planes(ctx.grad, h, w, -dy, -dx))]
        })
    }

    /// Reflect-pads the last two axes on the bottom and right. Pads longer
    /// than the axis keep reflecting back and forth.
    pub fn pad_reflect(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                shape: sx,
                reason: "pad_reflect needs at least two axes".into(),
            });
        }
        let nd = sx.len();
        let (h, w) = (sx[nd - 2], sx[nd - 1]);
        if bottom == 0 && right == 0 {
            return Ok(x);
        }
        let (ho, wo) = (h + bottom, w + right);
        let planes = self.value(x).len() / (h * w);
        let src: Vec<usize> = (0..ho)
            .flat_map(|i| (0..wo).map(move |j| kernels::reflect_index(i, h) * w + kernels::reflect_index(j, w)))
            .collect();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            out.extend(src.iter().map(|&s| plane[s]));
        }
        let mut shape = sx;
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        let value = Tensor::from_parts(shape, out);
        self.push("pad_reflect", &[x], value, move |ctx| {
            let mut d = vec![0.0; planes * h * w];
            for p in 0..planes {
                let g = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                let dp = &mut d[p * h * w..(p + 1) * h * w];
                for (&s, &gv) in src.iter().zip(g) {
                    dp[s] += gv;
                }
            }
            vec![Some(d)]
        })
    }

    /// Keeps the top-left `h×w` region of the last two axes.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let nd = sx.len();
        if nd < 2 || h == 0 || w == 0 || h > sx[nd - 2] || w > sx[nd - 1] {
            return Err(dim_err("crop", &sx, &[h, w]));
        }
        let (hi, wi) = (sx[nd - 2], sx[nd - 1]);
        if (hi, wi) == (h, w) {
            return Ok(x);
        }
        let planes = self.value(x).len() / (hi * wi);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for i in 0..h {
                let off = p * hi * wi + i * wi;
                out.extend_from_slice(&xv[off..off + w]);
            }
        }
        let mut shape = sx;
        shape[nd - 2] = h;
        shape[nd - 1] = w;
        let value = Tensor::from_parts(shape, out);
        self.push("crop", &[x], value, move |ctx| {
            let mut d = vec![0.0; planes * hi * wi];
            for p in 0..planes {
                for i in 0..h {
                    let src = &ctx.grad[(p * h + i) * w..(p * h + i + 1) * w];
                    let off = p * hi * wi + i * wi;
                    d[off..off + w].copy_from_slice(src);
                }
            }
            vec![Some(d)]
        })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", xs, value, move |ctx| {
            let mut res: Vec<Option<Vec<f64>>> = sizes
                .iter()
                .zip(&ctx.needs)
                .map(|(&sz, &need)| need.then(|| Vec::with_capacity(outer * sz * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (r, &sz) in res.iter_mut().zip(&sizes) {
                    let n = sz * inner;
                    if let Some(r) = r {
                        r.extend_from_slice(&ctx.grad[off..off + n]);
                    }
                    off += n;
                }
            }
            res
        })
    }

    /// Gathers slices along axis 0 (indices may repeat).
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= sx[0]) {
            return Err(Error::Shape {
                shape: sx,
                reason: format!("invalid axis-0 selection {indices:?}"),
            });
        }
        let inner: usize = sx[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
        }
        let mut shape = sx.clone();
        shape[0] = indices.len();
        let value = Tensor::from_parts(shape, out);
        let idx = indices.to_vec();
        let n_in = sx[0];
        self.push("select", &[x], value, move |ctx| {
            let mut d = vec![0.0; n_in * inner];
            for (k, &i) in idx.iter().enumerate() {
                let g = &ctx.grad[k * inner..(k + 1) * inner];
                d[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(d)]
        })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx.len() < 2 {
            return Err(dim_err("mean_axis", &sx, &[axis]));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push("mean_axis", &[x], value, move |ctx| {
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let g = &ctx.grad[o * inner..(o + 1) * inner];
                for a in 0..len {
                    d[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(dv, gv)| *dv = gv * inv);
                }
            }
            vec![Some(d)]
        })
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn roll_planes(x: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let mut out = vec![0.0; x.len()];
    for (plane, oplane) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for i in 0..h {
            let oi = (i + sy) % h;
            let src = &plane[i * w..(i + 1) * w];
            let dst = &mut oplane[oi * w..(oi + 1) * w];
            dst[sx..].copy_from_slice(&src[..w - sx]);
            dst[..sx].copy_from_slice(&src[w - sx..]);
        }
    }
    out
}
