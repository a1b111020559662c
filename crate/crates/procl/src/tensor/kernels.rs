//! Hot numeric loops shared by the graph ops.
//!
//! Parallelism is over disjoint output slices only and every inner
//! accumulation runs in a fixed order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let work = |(row, out_row): (usize, &mut [f64])| {
        out_row.fill(0.0);
        let a_row = &a[row * k..(row + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m >= 16 && m * k * n >= 1 << 14 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let work = |(row, out_row): (usize, &mut [f64])| {
        let a_row = &a[row * k..(row + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if m >= 16 && m * k * n >= 1 << 14 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    let work = |(p, out_row): (usize, &mut [f64])| {
        out_row.fill(0.0);
        for row in 0..m {
            let av = a[row * k + p];
            let b_row = &b[row * n..(row + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if k >= 16 && m * k * n >= 1 << 14 {
        out.par_chunks_mut(n).enumerate().for_each(work);
    } else {
        out.chunks_mut(n).enumerate().for_each(work);
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn new(
        batch: usize,
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Option<Self> {
        if kernel > in_h || kernel > in_w || stride == 0 {
            return None;
        }
        Some(ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        })
    }
}

/// Valid-padding strided convolution.
/// x: [N, C, H, W], w: [F, C, k, k], b: [F], out: [N, F, H', W'].
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, out: &mut [f64]) {
    let per_item = d.out_ch * d.out_h * d.out_w;
    let x_item = d.in_ch * d.in_h * d.in_w;
    let work = |(n, out_n): (usize, &mut [f64])| {
        let xn = &x[n * x_item..(n + 1) * x_item];
        for f in 0..d.out_ch {
            let wf = &w[f * d.in_ch * d.kernel * d.kernel..(f + 1) * d.in_ch * d.kernel * d.kernel];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut s = b[f];
                    for c in 0..d.in_ch {
                        let xc = &xn[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
                        let wc = &wf[c * d.kernel * d.kernel..(c + 1) * d.kernel * d.kernel];
                        for ky in 0..d.kernel {
                            let x_row =
                                &xc[(oy * d.stride + ky) * d.in_w + ox * d.stride..][..d.kernel];
                            let w_row = &wc[ky * d.kernel..(ky + 1) * d.kernel];
                            for (&xv, &wv) in x_row.iter().zip(w_row) {
                                s += xv * wv;
                            }
                        }
                    }
                    out_n[f * d.out_h * d.out_w + oy * d.out_w + ox] = s;
                }
            }
        }
    };
    if d.batch >= 4 {
        out.par_chunks_mut(per_item).enumerate().for_each(work);
    } else {
        out.chunks_mut(per_item).enumerate().for_each(work);
    }
}

/// Gradient with respect to the convolution input. `gx` must be zeroed.
pub fn conv2d_grad_x(g: &[f64], w: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let x_item = d.in_ch * d.in_h * d.in_w;
    let g_item = d.out_ch * d.out_h * d.out_w;
    let work = |(n, gx_n): (usize, &mut [f64])| {
        let gn = &g[n * g_item..(n + 1) * g_item];
        for f in 0..d.out_ch {
            let wf = &w[f * d.in_ch * d.kernel * d.kernel..(f + 1) * d.in_ch * d.kernel * d.kernel];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let gv = gn[f * d.out_h * d.out_w + oy * d.out_w + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        let gxc = &mut gx_n[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
                        let wc = &wf[c * d.kernel * d.kernel..(c + 1) * d.kernel * d.kernel];
                        for ky in 0..d.kernel {
                            let gx_row = &mut gxc
                                [(oy * d.stride + ky) * d.in_w + ox * d.stride..][..d.kernel];
                            let w_row = &wc[ky * d.kernel..(ky + 1) * d.kernel];
                            for (gxv, &wv) in gx_row.iter_mut().zip(w_row) {
                                *gxv += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.batch >= 4 {
        gx.par_chunks_mut(x_item).enumerate().for_each(work);
    } else {
        gx.chunks_mut(x_item).enumerate().for_each(work);
    }
}

/// Gradients with respect to kernel weights and bias. Buffers must be zeroed.
/// Parallel over output channels: each owns a disjoint slice of `gw`/`gb`.
pub fn conv2d_grad_w(x: &[f64], g: &[f64], d: &ConvDims, gw: &mut [f64], gb: &mut [f64]) {
    let x_item = d.in_ch * d.in_h * d.in_w;
    let g_item = d.out_ch * d.out_h * d.out_w;
    let w_f = d.in_ch * d.kernel * d.kernel;
    let work = |((f, gw_f), gb_f): ((usize, &mut [f64]), &mut f64)| {
        for n in 0..d.batch {
            let xn = &x[n * x_item..(n + 1) * x_item];
            let gf = &g[n * g_item + f * d.out_h * d.out_w..][..d.out_h * d.out_w];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let gv = gf[oy * d.out_w + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    *gb_f += gv;
                    for c in 0..d.in_ch {
                        let xc = &xn[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
                        let gwc = &mut gw_f[c * d.kernel * d.kernel..(c + 1) * d.kernel * d.kernel];
                        for ky in 0..d.kernel {
                            let x_row =
                                &xc[(oy * d.stride + ky) * d.in_w + ox * d.stride..][..d.kernel];
                            let gw_row = &mut gwc[ky * d.kernel..(ky + 1) * d.kernel];
                            for (gwv, &xv) in gw_row.iter_mut().zip(x_row) {
                                *gwv += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.out_ch >= 4 {
        gw.par_chunks_mut(w_f)
            .enumerate()
            .zip_eq(gb.par_iter_mut())
            .for_each(work);
    } else {
        gw.chunks_mut(w_f)
            .enumerate()
            .zip(gb.iter_mut())
            .for_each(work);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        let mut cbt = [0.0; 4];
        // B^T of [[5,7],[6,8]] is [[5,6],[7,8]]
        let bt = [5.0, 7.0, 6.0, 8.0];
        matmul_bt(&a, &bt, 2, 2, 2, &mut cbt);
        assert_eq!(cbt, c);

        let mut cat = [0.0; 4];
        // A^T of [[1,3],[2,4]] is [[1,2],[3,4]]
        let at = [1.0, 3.0, 2.0, 4.0];
        matmul_at(&at, &b, 2, 2, 2, &mut cat);
        assert_eq!(cat, c);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 and stride 1 reproduces the input.
        let d = ConvDims::new(1, 1, 3, 3, 1, 1, 1).unwrap();
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d(&x, &[1.0], &[0.0], &d, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_stride_two_hand_value() {
        // 4x4 input, 2x2 averaging-ish kernel, stride 2.
        let d = ConvDims::new(1, 1, 4, 4, 1, 2, 2).unwrap();
        assert_eq!((d.out_h, d.out_w), (2, 2));
        let x: Vec<f64> = (1..=16).map(|i| i as f64).collect();
        let w = [1.0, 1.0, 1.0, 1.0];
        let mut out = vec![0.0; 4];
        conv2d(&x, &w, &[0.5], &d, &mut out);
        // top-left window: 1+2+5+6 = 14, plus bias
        assert_eq!(out, [14.5, 22.5, 46.5, 54.5]);
    }
}
