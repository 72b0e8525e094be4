//! Dense loops behind the tape operations. All reductions run in a fixed
//! order so results are bit-reproducible.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Transposes a row-major `[rows×cols]` matrix.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x[N×C×H×W]` into `[C·kH·kW × N·H'·W']`.
pub fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let cols_n = g.batch * g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let base = n * g.out_pixels() + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
pub fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let cols_n = g.batch * g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane =
                        &mut dx[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = n * g.out_pixels() + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                plane[iy as usize * g.width + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
