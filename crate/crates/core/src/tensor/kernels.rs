//! Raw compute kernels on flat buffers. Shapes are validated by the tape.

/// `c = op(a)·op(b) + beta·c` where `op(a)` is `m×k` and `op(b)` is `k×n`,
/// all row-major. A transposed operand is stored in its transposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: strides and extents describe exactly the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds one `cin×h×w` image into `(cin·k·k)×(h·w)` patch columns for a
/// stride-1 convolution with `pad = k / 2`.
pub(crate) fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                // Output columns whose source column `xo + kx - pad` is inside.
                let (x_lo, x_hi) = valid_span(w, kx, pad);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    out[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - pad..x_hi + kx - pad]);
                }
            }
        }
    }
}

/// Range of output columns `xo` with `0 <= xo + kx - pad < w`.
fn valid_span(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_span(w, kx, pad);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    let dst = &mut dst[x_lo + kx - pad..x_hi + kx - pad];
                    let g = &src[y * w + x_lo..y * w + x_hi];
                    dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T·b
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·b^T
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    fn im2col_naive(x: &[f32], cin: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
        let pad = (k / 2) as isize;
        let mut out = Vec::new();
        for ci in 0..cin {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    for y in 0..h as isize {
                        for xo in 0..w as isize {
                            let (sy, sx) = (y + ky - pad, xo + kx - pad);
                            let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                            out.push(if inside {
                                x[ci * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for &(cin, h, w, k) in &[(1, 1, 1, 3), (2, 3, 4, 3), (3, 5, 2, 3), (2, 4, 4, 1), (1, 6, 7, 5)] {
            let x: Vec<f32> = (0..cin * h * w).map(|i| i as f32 + 1.0).collect();
            let mut cols = vec![f32::NAN; cin * k * k * h * w];
            im2col(&x, cin, h, w, k, &mut cols);
            assert_eq!(cols, im2col_naive(&x, cin, h, w, k), "{cin}x{h}x{w} k{k}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (cin, h, w, k) = (2, 3, 4, 3);
        let x: Vec<f32> = (0..cin * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let g: Vec<f32> = (0..cin * k * k * h * w).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; g.len()];
        im2col(&x, cin, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, cin, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
