//! Raw loops behind the graph ops. Spatial tensors are `[H, W, C]`,
//! channel-last, so a pixel's channels are one contiguous slice.

/// Geometry of a 2D convolution mapping `[h, w, cin]` to `[ho, wo, cout]`
/// with weights laid out `[kh, kw, cin / groups, cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin / self.groups, self.cout]
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad as isize;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let opix = oy * self.wo + ox;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(opix, iy as usize * self.w + ix as usize, ky * self.kw + kx);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let cin_g = cin / g.groups;
    let cout_g = cout / g.groups;
    let mut out = vec![0.0; g.ho * g.wo * cout];
    g.for_each_tap(|opix, ipix, tap| {
        let xv = &x[ipix * cin..(ipix + 1) * cin];
        let wk = &wt[tap * cin_g * cout..(tap + 1) * cin_g * cout];
        let o = &mut out[opix * cout..(opix + 1) * cout];
        for gi in 0..g.groups {
            let orow = &mut o[gi * cout_g..(gi + 1) * cout_g];
            for ci in 0..cin_g {
                let a = xv[gi * cin_g + ci];
                let wrow = &wk[ci * cout + gi * cout_g..ci * cout + (gi + 1) * cout_g];
                for (ov, wv) in orow.iter_mut().zip(wrow) {
                    *ov += a * wv;
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`] in its input argument.
pub fn conv2d_backward_input(gy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let cin_g = cin / g.groups;
    let cout_g = cout / g.groups;
    let mut gx = vec![0.0; g.h * g.w * cin];
    g.for_each_tap(|opix, ipix, tap| {
        let gyv = &gy[opix * cout..(opix + 1) * cout];
        let wk = &wt[tap * cin_g * cout..(tap + 1) * cin_g * cout];
        let gxv = &mut gx[ipix * cin..(ipix + 1) * cin];
        for gi in 0..g.groups {
            let grow = &gyv[gi * cout_g..(gi + 1) * cout_g];
            for ci in 0..cin_g {
                let wrow = &wk[ci * cout + gi * cout_g..ci * cout + (gi + 1) * cout_g];
                let s: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                gxv[gi * cin_g + ci] += s;
            }
        }
    });
    gx
}

/// Gradient of [`conv2d_forward`] in its weight argument.
pub fn conv2d_backward_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let cin_g = cin / g.groups;
    let cout_g = cout / g.groups;
    let mut gw = vec![0.0; g.kh * g.kw * cin_g * cout];
    g.for_each_tap(|opix, ipix, tap| {
        let xv = &x[ipix * cin..(ipix + 1) * cin];
        let gyv = &gy[opix * cout..(opix + 1) * cout];
        let gk = &mut gw[tap * cin_g * cout..(tap + 1) * cin_g * cout];
        for gi in 0..g.groups {
            let grow = &gyv[gi * cout_g..(gi + 1) * cout_g];
            for ci in 0..cin_g {
                let a = xv[gi * cin_g + ci];
                let wrow = &mut gk[ci * cout + gi * cout_g..ci * cout + (gi + 1) * cout_g];
                for (wv, gv) in wrow.iter_mut().zip(grow) {
                    *wv += a * gv;
                }
            }
        }
    });
    gw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let pad = self.pad as isize;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(oy * self.wo + ox, iy as usize * self.w + ix as usize);
                    }
                }
            }
        }
    }
}

/// Average pooling; padded taps count toward the divisor.
pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let c = g.c;
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = vec![0.0; g.ho * g.wo * c];
    g.for_each_tap(|opix, ipix| {
        let (o, i) = (&mut out[opix * c..(opix + 1) * c], &x[ipix * c..(ipix + 1) * c]);
        for (ov, iv) in o.iter_mut().zip(i) {
            *ov += iv * norm;
        }
    });
    out
}

pub fn avg_pool_backward(gy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let c = g.c;
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut gx = vec![0.0; g.h * g.w * c];
    g.for_each_tap(|opix, ipix| {
        let (o, i) = (&gy[opix * c..(opix + 1) * c], &mut gx[ipix * c..(ipix + 1) * c]);
        for (iv, ov) in i.iter_mut().zip(o) {
            *iv += ov * norm;
        }
    });
    gx
}

/// `[H, W, C]` to `[nW, b*b, C]`, windows in row-major order.
pub fn window_partition(x: &[f64], h: usize, w: usize, c: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let nwx = w / b;
    for y in 0..h {
        for xx in 0..w {
            let win = (y / b) * nwx + xx / b;
            let tok = (y % b) * b + xx % b;
            let dst = (win * b * b + tok) * c;
            let src = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Inverse of [`window_partition`].
pub fn window_merge(x: &[f64], h: usize, w: usize, c: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let nwx = w / b;
    for y in 0..h {
        for xx in 0..w {
            let win = (y / b) * nwx + xx / b;
            let tok = (y % b) * b + xx % b;
            let src = (win * b * b + tok) * c;
            let dst = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `i` takes input element at the permuted multi-index.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], gy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let dot: f64 = (0..len).map(|k| y[at(k)] * gy[at(k)]).sum();
            for k in 0..len {
                gx[at(k)] = y[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
    gx
}

/// Batched `[batch, m, k] x [batch?, k, n]`; `b_batched = false` reuses one
/// right-hand matrix for every batch entry.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, b_batched: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if b_batched { bi * k * n } else { 0 };
        for i in 0..m {
            let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let av = a[a_off + i * k + kk];
                let brow = &b[b_off + kk * n..b_off + (kk + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// `gA = gC * B^T`.
pub fn matmul_grad_a(gc: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, b_batched: bool) -> Vec<f64> {
    let mut ga = vec![0.0; batch * m * k];
    for bi in 0..batch {
        let b_off = if b_batched { bi * k * n } else { 0 };
        for i in 0..m {
            let grow = &gc[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let brow = &b[b_off + kk * n..b_off + (kk + 1) * n];
                ga[(bi * m + i) * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    }
    ga
}

/// `gB = A^T * gC`, summed over the batch when B is shared.
pub fn matmul_grad_b(gc: &[f64], a: &[f64], batch: usize, m: usize, k: usize, n: usize, b_batched: bool) -> Vec<f64> {
    let mut gb = vec![0.0; if b_batched { batch * k * n } else { k * n }];
    for bi in 0..batch {
        let b_off = if b_batched { bi * k * n } else { 0 };
        for i in 0..m {
            let grow = &gc[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let av = a[(bi * m + i) * k + kk];
                let brow = &mut gb[b_off + kk * n..b_off + (kk + 1) * n];
                for (bv, gv) in brow.iter_mut().zip(grow) {
                    *bv += av * gv;
                }
            }
        }
    }
    gb
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}
