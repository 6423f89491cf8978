//! Raw forward/backward kernels over row-major slices. No shape checking
//! happens here; the graph layer validates before calling in.

use crate::tensor::{strides, Scalar};

/// `c = a · b` with `a: [m, k]`, `b: [k, n]`, accumulated into `c: [m, n]`.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        // Four rank-1 updates per pass over the output row.
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
            p += 1;
        }
    }
}

/// `c += a · b` choosing the loop order by shape: row updates when `n` is
/// wide, dot products against `bᵀ` when `n` is narrow.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if n >= 32 || k < 16 {
        gemm_acc(a, b, c, m, k, n);
    } else {
        gemm_abt_acc(a, &transpose(b, k, n), c, m, k, n);
    }
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// Batched product. `a: [batch, m, k]`; `b: [batch, k, n]`, or
/// `[batch, n, k]` when `b_transposed`.
pub fn bmm<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a_i = &a[bi * m * k..(bi + 1) * m * k];
        let b_i = &b[bi * k * n..(bi + 1) * k * n];
        let c_i = &mut c[bi * m * n..(bi + 1) * m * n];
        if b_transposed {
            if n >= 32 || k < 16 {
                gemm_acc(a_i, &transpose(b_i, n, k), c_i, m, k, n);
            } else {
                gemm_abt_acc(a_i, b_i, c_i, m, k, n);
            }
        } else {
            matmul_acc(a_i, b_i, c_i, m, k, n);
        }
    }
    c
}

/// Geometry of a grouped 3D cross-correlation. 2D convolutions use a unit
/// depth axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Multiply-adds performed by the convolution (bias excluded).
    pub fn macs(&self) -> u64 {
        let out: usize = self.output.iter().product();
        let k: usize = self.kernel.iter().product();
        (self.n * self.cout * out * (self.cin / self.groups) * k) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }
}

/// Output positions `o` with `0 <= o*s + k - p < len`.
fn valid_range(k: usize, p: usize, s: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if len + p > k {
        ((len - 1 + p - k) / s + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct Ranges {
    d: Vec<(usize, usize)>,
    h: Vec<(usize, usize)>,
    w: Vec<(usize, usize)>,
}

fn ranges(g: &ConvGeom) -> Ranges {
    let r = |axis: usize| -> Vec<(usize, usize)> {
        (0..g.kernel[axis])
            .map(|k| valid_range(k, g.pad[axis], g.stride[axis], g.input[axis], g.output[axis]))
            .collect()
    };
    Ranges {
        d: r(0),
        h: r(1),
        w: r(2),
    }
}

fn conv_forward_direct<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let rg = ranges(g);
    let mut out = vec![T::zero(); g.n * g.cout * out_sp];
    for n in 0..g.n {
        for o in 0..g.cout {
            let grp = o / cout_g;
            let out_o = &mut out[(n * g.cout + o) * out_sp..(n * g.cout + o + 1) * out_sp];
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let x_c = &x[(n * g.cin + c) * in_sp..(n * g.cin + c + 1) * in_sp];
                let w_oc = &w[(o * cin_g + ci) * kd * kh * kw..(o * cin_g + ci + 1) * kd * kh * kw];
                for a in 0..kd {
                    let (d0, d1) = rg.d[a];
                    for b in 0..kh {
                        let (h0, h1) = rg.h[b];
                        for e in 0..kw {
                            let (w0, w1) = rg.w[e];
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = w_oc[(a * kh + b) * kw + e];
                            for od in d0..d1 {
                                let idd = od * sd + a - pd;
                                for ohh in h0..h1 {
                                    let ihh = ohh * sh + b - ph;
                                    let orow = &mut out_o[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                    let xrow = &x_c[(idd * ih + ihh) * iw..(idd * ih + ihh + 1) * iw];
                                    if sw == 1 {
                                        let xs = &xrow[w0 + e - pw..w1 + e - pw];
                                        for (ov, &xv) in orow[w0..w1].iter_mut().zip(xs) {
                                            *ov += wv * xv;
                                        }
                                    } else {
                                        for (owi, ov) in orow.iter_mut().enumerate().take(w1).skip(w0) {
                                            *ov += wv * xrow[owi * sw + e - pw];
                                        }
                                    }
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

fn conv_backward_input_direct<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let rg = ranges(g);
    let mut gx = vec![T::zero(); g.n * g.cin * in_sp];
    for n in 0..g.n {
        for c in 0..g.cin {
            let grp = c / cin_g;
            let ci = c % cin_g;
            let gx_c = &mut gx[(n * g.cin + c) * in_sp..(n * g.cin + c + 1) * in_sp];
            for o in grp * cout_g..(grp + 1) * cout_g {
                let go = &gout[(n * g.cout + o) * out_sp..(n * g.cout + o + 1) * out_sp];
                let w_oc = &w[(o * cin_g + ci) * kd * kh * kw..(o * cin_g + ci + 1) * kd * kh * kw];
                for a in 0..kd {
                    let (d0, d1) = rg.d[a];
                    for b in 0..kh {
                        let (h0, h1) = rg.h[b];
                        for e in 0..kw {
                            let (w0, w1) = rg.w[e];
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = w_oc[(a * kh + b) * kw + e];
                            for od in d0..d1 {
                                let idd = od * sd + a - pd;
                                for ohh in h0..h1 {
                                    let ihh = ohh * sh + b - ph;
                                    let grow = &go[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                    let xrow = &mut gx_c[(idd * ih + ihh) * iw..(idd * ih + ihh + 1) * iw];
                                    if sw == 1 {
                                        let xs = &mut xrow[w0 + e - pw..w1 + e - pw];
                                        for (xv, &gv) in xs.iter_mut().zip(&grow[w0..w1]) {
                                            *xv += wv * gv;
                                        }
                                    } else {
                                        for (owi, &gv) in grow.iter().enumerate().take(w1).skip(w0) {
                                            xrow[owi * sw + e - pw] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_backward_weight_direct<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let rg = ranges(g);
    let mut gw = vec![T::zero(); g.cout * cin_g * kd * kh * kw];
    for o in 0..g.cout {
        let grp = o / cout_g;
        for ci in 0..cin_g {
            let c = grp * cin_g + ci;
            for a in 0..kd {
                let (d0, d1) = rg.d[a];
                for b in 0..kh {
                    let (h0, h1) = rg.h[b];
                    for e in 0..kw {
                        let (w0, w1) = rg.w[e];
                        let mut acc = T::zero();
                        if w0 < w1 {
                            for n in 0..g.n {
                                let go = &gout[(n * g.cout + o) * out_sp..(n * g.cout + o + 1) * out_sp];
                                let x_c = &x[(n * g.cin + c) * in_sp..(n * g.cin + c + 1) * in_sp];
                                for od in d0..d1 {
                                    let idd = od * sd + a - pd;
                                    for ohh in h0..h1 {
                                        let ihh = ohh * sh + b - ph;
                                        let grow = &go[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                                        let xrow = &x_c[(idd * ih + ihh) * iw..(idd * ih + ihh + 1) * iw];
                                        if sw == 1 {
                                            let xs = &xrow[w0 + e - pw..w1 + e - pw];
                                            for (&gv, &xv) in grow[w0..w1].iter().zip(xs) {
                                                acc += gv * xv;
                                            }
                                        } else {
                                            for (owi, &gv) in grow.iter().enumerate().take(w1).skip(w0) {
                                                acc += gv * xrow[owi * sw + e - pw];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        gw[((o * cin_g + ci) * kd + a) * kh * kw + b * kw + e] = acc;
                    }
                }
            }
        }
    }
    gw
}

pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if g.groups != 1 {
        return conv_forward_direct(x, w, g);
    }
    let (kk, s) = (g.cin * g.kernel.iter().product::<usize>(), g.out_spatial());
    let in_sp = g.in_spatial();
    let mut out = vec![T::zero(); g.n * g.cout * s];
    for n in 0..g.n {
        let x_n = &x[n * g.cin * in_sp..(n + 1) * g.cin * in_sp];
        let out_n = &mut out[n * g.cout * s..(n + 1) * g.cout * s];
        if g.is_pointwise() {
            gemm_acc(w, x_n, out_n, g.cout, kk, s);
        } else {
            gemm_acc(w, &im2col(x_n, g), out_n, g.cout, kk, s);
        }
    }
    out
}

pub fn conv_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if g.groups != 1 {
        return conv_backward_input_direct(gout, w, g);
    }
    let (kk, s) = (g.cin * g.kernel.iter().product::<usize>(), g.out_spatial());
    let in_sp = g.in_spatial();
    let wt = transpose(w, g.cout, kk);
    let mut gx = vec![T::zero(); g.n * g.cin * in_sp];
    for n in 0..g.n {
        let go = &gout[n * g.cout * s..(n + 1) * g.cout * s];
        let gx_n = &mut gx[n * g.cin * in_sp..(n + 1) * g.cin * in_sp];
        if g.is_pointwise() {
            gemm_acc(&wt, go, gx_n, kk, g.cout, s);
        } else {
            let mut col = vec![T::zero(); kk * s];
            gemm_acc(&wt, go, &mut col, kk, g.cout, s);
            col2im_acc(&col, gx_n, g);
        }
    }
    gx
}

pub fn conv_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.groups != 1 {
        return conv_backward_weight_direct(gout, x, g);
    }
    let (kk, s) = (g.cin * g.kernel.iter().product::<usize>(), g.out_spatial());
    let in_sp = g.in_spatial();
    let mut gw = vec![T::zero(); g.cout * kk];
    for n in 0..g.n {
        let go = &gout[n * g.cout * s..(n + 1) * g.cout * s];
        let x_n = &x[n * g.cin * in_sp..(n + 1) * g.cin * in_sp];
        if g.is_pointwise() {
            gemm_abt_acc(go, x_n, &mut gw, g.cout, s, kk);
        } else {
            gemm_abt_acc(go, &im2col(x_n, g), &mut gw, g.cout, s, kk);
        }
    }
    gw
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`; each entry is
/// a dot product over the long `k` axis.
pub fn gemm_abt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent partial sums.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Unfolds one batch item `[C, D, H, W]` into `[C * kvol, out_spatial]`
/// (zeros where the kernel overlaps padding).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let (in_sp, s) = (g.in_spatial(), g.out_spatial());
    let rg = ranges(g);
    let mut col = vec![T::zero(); g.cin * kd * kh * kw * s];
    for c in 0..g.cin {
        let x_c = &x[c * in_sp..(c + 1) * in_sp];
        for a in 0..kd {
            let (d0, d1) = rg.d[a];
            for b in 0..kh {
                let (h0, h1) = rg.h[b];
                for e in 0..kw {
                    let (w0, w1) = rg.w[e];
                    let r = ((c * kd + a) * kh + b) * kw + e;
                    let row = &mut col[r * s..(r + 1) * s];
                    if w0 >= w1 {
                        continue;
                    }
                    for od in d0..d1 {
                        let idd = od * sd + a - pd;
                        for ohh in h0..h1 {
                            let ihh = ohh * sh + b - ph;
                            let xrow = &x_c[(idd * ih + ihh) * iw..(idd * ih + ihh + 1) * iw];
                            let orow = &mut row[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                            for (owi, ov) in orow.iter_mut().enumerate().take(w1).skip(w0) {
                                *ov = xrow[owi * sw + e - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `gx: [C, D, H, W]`.
fn col2im_acc<T: Scalar>(col: &[T], gx: &mut [T], g: &ConvGeom) {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let (in_sp, s) = (g.in_spatial(), g.out_spatial());
    let rg = ranges(g);
    for c in 0..g.cin {
        let gx_c = &mut gx[c * in_sp..(c + 1) * in_sp];
        for a in 0..kd {
            let (d0, d1) = rg.d[a];
            for b in 0..kh {
                let (h0, h1) = rg.h[b];
                for e in 0..kw {
                    let (w0, w1) = rg.w[e];
                    if w0 >= w1 {
                        continue;
                    }
                    let r = ((c * kd + a) * kh + b) * kw + e;
                    let row = &col[r * s..(r + 1) * s];
                    for od in d0..d1 {
                        let idd = od * sd + a - pd;
                        for ohh in h0..h1 {
                            let ihh = ohh * sh + b - ph;
                            let xrow = &mut gx_c[(idd * ih + ihh) * iw..(idd * ih + ihh + 1) * iw];
                            let grow = &row[(od * oh + ohh) * ow..(od * oh + ohh + 1) * ow];
                            for (owi, &gv) in grow.iter().enumerate().take(w1).skip(w0) {
                                xrow[owi * sw + e - pw] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = x[base];
            for j in 1..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[base + j * inner] * g[base + j * inner];
            }
            for j in 0..len {
                let k = base + j * inner;
                gx[k] = y[k] * (g[k] - dot);
            }
        }
    }
    gx
}

/// Layer norm over `axis`. Returns (output, mean, rstd) with one mean/rstd
/// per normalized vector, indexed `o * inner + i`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut mean = vec![T::zero(); outer * inner];
    let mut rstd = vec![T::zero(); outer * inner];
    let mut out = vec![T::zero(); x.len()];
    let inv_len = T::one() / T::lit(len as f64);
    for o in 0..outer {
        let block = &x[o * len * inner..(o + 1) * len * inner];
        let m = &mut mean[o * inner..(o + 1) * inner];
        for j in 0..len {
            for (mi, &v) in m.iter_mut().zip(&block[j * inner..(j + 1) * inner]) {
                *mi += v;
            }
        }
        for mi in m.iter_mut() {
            *mi *= inv_len;
        }
        let r = &mut rstd[o * inner..(o + 1) * inner];
        for j in 0..len {
            for ((ri, &v), &mi) in r.iter_mut().zip(&block[j * inner..(j + 1) * inner]).zip(m.iter()) {
                let d = v - mi;
                *ri += d * d;
            }
        }
        for ri in r.iter_mut() {
            *ri = T::one() / (*ri * inv_len + eps).sqrt();
        }
        let ob = &mut out[o * len * inner..(o + 1) * len * inner];
        for j in 0..len {
            let (gj, bj) = (gamma[j], beta[j]);
            let orow = &mut ob[j * inner..(j + 1) * inner];
            let xrow = &block[j * inner..(j + 1) * inner];
            for i in 0..inner {
                orow[i] = (xrow[i] - m[i]) * r[i] * gj + bj;
            }
        }
    }
    (out, mean, rstd)
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    shape: &[usize],
    axis: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); len];
    let mut dbeta = vec![T::zero(); len];
    let inv_len = T::one() / T::lit(len as f64);
    let mut s1 = vec![T::zero(); inner];
    let mut s2 = vec![T::zero(); inner];
    for o in 0..outer {
        let xb = &x[o * len * inner..(o + 1) * len * inner];
        let gb = &g[o * len * inner..(o + 1) * len * inner];
        let m = &mean[o * inner..(o + 1) * inner];
        let r = &rstd[o * inner..(o + 1) * inner];
        s1.iter_mut().for_each(|v| *v = T::zero());
        s2.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..len {
            let gj = gamma[j];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for i in 0..inner {
                let xhat = (xb[j * inner + i] - m[i]) * r[i];
                let gv = gb[j * inner + i];
                dg += gv * xhat;
                db += gv;
                let gh = gv * gj;
                s1[i] += gh;
                s2[i] += gh * xhat;
            }
            dgamma[j] += dg;
            dbeta[j] += db;
        }
        let dxb = &mut dx[o * len * inner..(o + 1) * len * inner];
        for j in 0..len {
            let gj = gamma[j];
            for i in 0..inner {
                let xhat = (xb[j * inner + i] - m[i]) * r[i];
                let gh = gb[j * inner + i] * gj;
                dxb[j * inner + i] = r[i] * (gh - s1[i] * inv_len - xhat * s2[i] * inv_len);
            }
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return x.to_vec();
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src[last]);
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner_len]);
        } else {
            for j in 0..inner_len {
                out.push(x[base + j * inner_stride]);
            }
        }
        // odometer over the outer axes
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src[ax] * out_shape[ax];
            idx[ax] = 0;
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

/// Cyclic roll along `axis`: `out[(i + shift) mod len] = x[i]`.
pub fn roll<T: Scalar>(x: &[T], shape: &[usize], axis: usize, shift: isize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let s = shift.rem_euclid(len as isize) as usize;
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..len {
            let j = (i + s) % len;
            let src = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
            out[(o * len + j) * inner..(o * len + j + 1) * inner].copy_from_slice(src);
        }
    }
    out
}

/// Zero-pads `axis` with `before` leading and `after` trailing entries.
pub fn pad_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, before: usize, after: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let new_len = len + before + after;
    let mut out = vec![T::zero(); outer * new_len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[(o * new_len + before) * inner..(o * new_len + before + len) * inner];
        dst.copy_from_slice(src);
    }
    out
}

pub fn narrow_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
    }
    out
}

/// Interpolation taps for one output index: (source index, weight) pairs.
pub type Taps = [(usize, f64); 2];

/// Sampling convention: align-corners = false. Linear maps output `j` to
/// source coordinate `(j + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
/// Nearest picks `floor((j + 0.5) * in / out)`, clamped to `in - 1`.
pub fn interp_taps(in_len: usize, out_len: usize, linear: bool) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| {
            if in_len == out_len {
                return [(j, 1.0), (j, 0.0)];
            }
            if linear {
                let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                let f = src - i0 as f64;
                [(i0, 1.0 - f), (i1, f)]
            } else {
                let i = (((j as f64 + 0.5) * scale).floor() as usize).min(in_len - 1);
                [(i, 1.0), (i, 0.0)]
            }
        })
        .collect()
}

pub fn resample_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, taps: &[Taps]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        for (j, t) in taps.iter().enumerate() {
            let (w0, w1) = (T::lit(t[0].1), T::lit(t[1].1));
            let s0 = &x[(o * len + t[0].0) * inner..(o * len + t[0].0 + 1) * inner];
            let s1 = &x[(o * len + t[1].0) * inner..(o * len + t[1].0 + 1) * inner];
            let d = &mut out[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
            for i in 0..inner {
                d[i] = w0 * s0[i] + w1 * s1[i];
            }
        }
    }
    out
}

pub fn resample_axis_backward<T: Scalar>(
    g: &[T],
    in_shape: &[usize],
    axis: usize,
    taps: &[Taps],
) -> Vec<T> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let out_len = taps.len();
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for (j, t) in taps.iter().enumerate() {
            let gs = &g[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
            for &(src, w) in t.iter() {
                if w == 0.0 {
                    continue;
                }
                let w = T::lit(w);
                let d = &mut gx[(o * len + src) * inner..(o * len + src + 1) * inner];
                for i in 0..inner {
                    d[i] += w * gs[i];
                }
            }
        }
    }
    gx
}
