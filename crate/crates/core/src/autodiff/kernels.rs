//! Dense numeric kernels behind the tape ops. All `gemm*` variants
//! accumulate into `out`.

/// Strided `out += a · b` with `a` `[m,k]` and `b` `[k,n]`; strides are
/// `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
fn dgemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    out: &mut [f64],
) {
    dgemm_beta(m, k, n, a, sa, b, sb, 1.0, out);
}

/// `out = a · b + beta · out`; with `beta == 0` the old contents are ignored.
#[allow(clippy::too_many_arguments)]
fn dgemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    beta: f64,
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= m * n);
    let last = |(r, c): (isize, isize), rows: usize, cols: usize| {
        (rows.saturating_sub(1) as isize * r + cols.saturating_sub(1) as isize * c) as usize
    };
    if k > 0 {
        assert!(a.len() > last(sa, m, k) && b.len() > last(sb, k, n));
    }
    // SAFETY: bounds of every strided access were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    dgemm_acc(m, n, k, g, (n as isize, 1), b, (1, n as isize), out);
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(k, m, n, a, (1, k as isize), g, (n as isize, 1), out);
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`, overwriting `out`.
fn gemm_tn_set(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_beta(k, m, n, a, (1, k as isize), g, (n as isize, 1), 0.0, out);
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn new(input_shape: &[usize], c_out: usize) -> Self {
        ConvGeom {
            n: input_shape[0],
            c_in: input_shape[1],
            c_out,
            h: input_shape[2],
            w: input_shape[3],
        }
    }

    fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[C, H, W]` sample into `[C·9, H·W]` patch columns with zero padding 1.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (h, w, area) = (g.h, g.w, g.area());
    if area == 0 {
        return;
    }
    for ci in 0..g.c_in {
        let plane = &x[ci * area..(ci + 1) * area];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * area;
                let dst = &mut col[row..row + area];
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto a `[C, H, W]` sample.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (h, w, area) = (g.h as isize, g.w as isize, g.area());
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * area..(ci + 1) * area];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ci * 9 + (ky * 3 + kx) as usize) * area;
                let src = &col[row..row + area];
                for y in 0..h {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + kx - 1;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += src[(y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let area = g.area();
    let k = g.c_in * 9;
    let mut out = vec![0.0; g.n * g.c_out * area];
    let mut col = vec![0.0; k * area];
    for i in 0..g.n {
        im2col(g, &x[i * g.c_in * area..(i + 1) * g.c_in * area], &mut col);
        let dst = &mut out[i * g.c_out * area..(i + 1) * g.c_out * area];
        for (co, plane) in dst.chunks_mut(area).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(weight, &col, dst, g.c_out, k, area);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv3x3_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let area = g.area();
    let k = g.c_in * 9;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.c_out];
    let mut col = vec![0.0; k * area];
    let mut dcol = vec![0.0; k * area];
    for i in 0..g.n {
        let gi = &grad_out[i * g.c_out * area..(i + 1) * g.c_out * area];
        for (co, plane) in gi.chunks(area).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        im2col(g, &x[i * g.c_in * area..(i + 1) * g.c_in * area], &mut col);
        gemm_nt(gi, &col, &mut dw, g.c_out, area, k);
        gemm_tn_set(weight, gi, &mut dcol, g.c_out, k, area);
        col2im(
            g,
            &dcol,
            &mut dx[i * g.c_in * area..(i + 1) * g.c_in * area],
        );
    }
    (dx, dw, db)
}

/// 2×2/stride-2 max pooling. Ties go to the first element in row-major order.
pub(crate) fn max_pool2x2(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool2x2(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
            }
        }
    }
    out
}

pub(crate) fn avg_pool2x2_backward(grad_out: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = 0.25 * grad_out[(plane * oh + oy) * ow + ox];
                let i = base + 2 * oy * w + 2 * ox;
                for j in [i, i + 1, i + w, i + w + 1] {
                    dx[j] += gv;
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance of `[N, C, spatial]` data.
pub(crate) fn channel_moments(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (i * c + ch) * spatial;
            *m += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let base = (i * c + ch) * spatial;
            *v += x[base..base + spatial]
                .iter()
                .map(|p| (p - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut out = vec![0.0; 8];
        gemm(&a, &b, &mut out, 2, 3, 4);
        for (x, y) in out.iter().zip(naive_matmul(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, 3, 4);
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 4);
        for (x, y) in nt.iter().zip(naive_matmul(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, 2, 3);
        let mut tn = vec![0.0; 8];
        gemm_tn(&at, &b, &mut tn, 3, 2, 4);
        for (x, y) in tn.iter().zip(naive_matmul(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_tie_goes_to_first_element() {
        let (out, arg) = max_pool2x2(&[5.0, 5.0, 5.0, 5.0], &[1, 1, 2, 2]);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
        let (_, arg) = max_pool2x2(&[1.0, 2.0, 2.0, 0.0], &[1, 1, 2, 2]);
        assert_eq!(arg, vec![1]);
    }
}
