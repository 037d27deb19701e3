//! Raw slice kernels shared by the forward and backward passes.
//!
//! Loops are ordered so the innermost one walks contiguous memory. No kernel
//! reorders a reduction between calls, so results are bitwise reproducible.

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a grouped, stride-1, SAME-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// For each kernel tap `(ky, kx)`, visits every output position `(y, x-range)`
    /// whose input tap `(y + ky - ph, x + kx - pw)` lies inside the image.
    /// The callback receives `(ky, kx, out_row, in_row, x_out_start, x_in_start, len)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                // x + kx - pw in [0, w)  =>  x in [pw - kx, w + pw - kx)
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (self.w + pw).saturating_sub(kx).min(self.w);
                if x_lo >= x_hi {
                    continue;
                }
                let len = x_hi - x_lo;
                let xi_lo = x_lo + kx - pw;
                for y in 0..self.h {
                    let iy = y + ky;
                    if iy < ph || iy - ph >= self.h {
                        continue;
                    }
                    f(ky, kx, y, iy - ph, x_lo, xi_lo, len);
                }
            }
        }
    }

    fn kidx(&self, oc: usize, icg: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_per_group() + icg) * self.kh + ky) * self.kw + kx
    }
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.c_out * plane];
    for oc in 0..g.c_out {
        out[oc * plane..(oc + 1) * plane].fill(bias[oc]);
    }
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    for oc in 0..g.c_out {
        let group = oc / opg;
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let src = &input[ic * plane..(ic + 1) * plane];
            let dst_base = oc * plane;
            g.for_each_tap(|ky, kx, y, iy, xo, xi, len| {
                let wv = kernel[g.kidx(oc, icg, ky, kx)];
                if wv == 0.0 {
                    return;
                }
                let d = &mut out[dst_base + y * g.w + xo..dst_base + y * g.w + xo + len];
                let s = &src[iy * g.w + xi..iy * g.w + xi + len];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += wv * sv;
                }
            });
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.h * g.w;
    let mut d_input = vec![0.0; input.len()];
    let mut d_kernel = vec![0.0; kernel.len()];
    let d_bias: Vec<f64> =
        (0..g.c_out).map(|oc| grad_out[oc * plane..(oc + 1) * plane].iter().sum()).collect();
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    for oc in 0..g.c_out {
        let group = oc / opg;
        let gout = &grad_out[oc * plane..(oc + 1) * plane];
        for icg in 0..ipg {
            let ic = group * ipg + icg;
            let base = ic * plane;
            g.for_each_tap(|ky, kx, y, iy, xo, xi, len| {
                let ki = g.kidx(oc, icg, ky, kx);
                let go = &gout[y * g.w + xo..y * g.w + xo + len];
                let src = &input[base + iy * g.w + xi..base + iy * g.w + xi + len];
                d_kernel[ki] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                let wv = kernel[ki];
                if wv != 0.0 {
                    let di = &mut d_input[base + iy * g.w + xi..base + iy * g.w + xi + len];
                    for (dv, gv) in di.iter_mut().zip(go) {
                        *dv += wv * gv;
                    }
                }
            });
        }
    }
    (d_input, d_kernel, d_bias)
}
