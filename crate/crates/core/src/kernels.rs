//! Raw numeric kernels behind the tape ops. All buffers are row-major.

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of every operand were checked against the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample `(C, H, W)` into a `(C·KH·KW, OH·OW)` column matrix.
fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = oh * ow;
    for c in 0..d.in_ch {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for r in 0..oh {
                    let src = &xc[(r + ki) * d.w + kj..(r + ki) * d.w + kj + ow];
                    dst[r * ow..(r + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `(C, H, W)` sample.
fn col2im(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = oh * ow;
    for c in 0..d.in_ch {
        let xc = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for r in 0..oh {
                    let dst = &mut xc[(r + ki) * d.w + kj..(r + ki) * d.w + kj + ow];
                    for (o, s) in dst.iter_mut().zip(&src[r * ow..(r + 1) * ow]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

/// Valid-padding, stride-1 cross-correlation.
/// `x: (B, C, H, W)`, `kernel: (O, C, KH, KW)` -> `(B, O, OH, OW)`.
pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let (k, plane) = (d.patch(), d.out_plane());
    let in_sample = d.in_ch * d.h * d.w;
    let out_sample = d.out_ch * plane;
    let mut out = vec![0.0; d.batch * out_sample];
    let mut cols = vec![0.0; k * plane];
    for b in 0..d.batch {
        im2col(&x[b * in_sample..(b + 1) * in_sample], d, &mut cols);
        gemm(
            d.out_ch,
            k,
            plane,
            1.0,
            kernel,
            (k, 1),
            &cols,
            (plane, 1),
            0.0,
            &mut out[b * out_sample..(b + 1) * out_sample],
        );
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. its input and kernel; either may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, plane) = (d.patch(), d.out_plane());
    let in_sample = d.in_ch * d.h * d.w;
    let out_sample = d.out_ch * plane;
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; k * plane];
    for b in 0..d.batch {
        let go = &grad_out[b * out_sample..(b + 1) * out_sample];
        if let Some(gk) = gk.as_mut() {
            im2col(&x[b * in_sample..(b + 1) * in_sample], d, &mut cols);
            // gk (O×K) += go (O×P) · colsᵀ (P×K)
            gemm(d.out_ch, plane, k, 1.0, go, (plane, 1), &cols, (1, plane), 1.0, gk);
        }
        if let Some(gx) = gx.as_mut() {
            // dcols (K×P) = kernelᵀ (K×O) · go (O×P)
            gemm(k, d.out_ch, plane, 1.0, kernel, (1, k), go, (plane, 1), 0.0, &mut cols);
            col2im(&cols, d, &mut gx[b * in_sample..(b + 1) * in_sample]);
        }
    }
    (gx, gk)
}

/// 2×2 stride-2 mean pooling over `(B·C)` planes of size `h × w`; odd edges are dropped.
pub(crate) fn mean_pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                op[i * ow + j] = 0.25 * (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]);
            }
        }
    }
    out
}

pub(crate) fn mean_pool2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * go[i * ow + j];
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                gp[r0] += g;
                gp[r0 + 1] += g;
                gp[r1] += g;
                gp[r1 + 1] += g;
            }
        }
    }
    gx
}

/// Zero-pads every `h × w` plane by `pad` on all four sides.
pub(crate) fn zero_pad_forward(x: &[f64], planes: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for i in 0..h {
            let src = &x[p * h * w + i * w..p * h * w + (i + 1) * w];
            let start = p * ph * pw + (i + pad) * pw + pad;
            out[start..start + w].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn zero_pad_backward(g: &[f64], planes: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            let start = p * ph * pw + (i + pad) * pw + pad;
            out[p * h * w + i * w..p * h * w + (i + 1) * w].copy_from_slice(&g[start..start + w]);
        }
    }
    out
}
