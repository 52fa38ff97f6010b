//! Raw loops shared by the graph's forward and backward passes.
//!
//! Each output element of `matmul` is accumulated over the inner index in
//! ascending order no matter how many rows are processed at once, so a batch
//! of one row and a batch of many rows agree bit for bit.

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Valid cross-correlation, no padding.
pub fn conv2d(input: &[f64], kernel: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let plane_out = d.h_out * d.w_out;
    let mut out = vec![0.0; d.batch * d.c_out * plane_out];
    for n in 0..d.batch {
        let img = &input[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        for o in 0..d.c_out {
            let base = (n * d.c_out + o) * plane_out;
            let b = bias.map_or(0.0, |b| b[o]);
            for i in 0..d.h_out {
                for j in 0..d.w_out {
                    let mut acc = 0.0;
                    for c in 0..d.c_in {
                        for p in 0..d.k {
                            let irow = (c * d.h + i * d.stride + p) * d.w + j * d.stride;
                            let krow = ((o * d.c_in + c) * d.k + p) * d.k;
                            for q in 0..d.k {
                                acc += img[irow + q] * kernel[krow + q];
                            }
                        }
                    }
                    out[base + i * d.w_out + j] = acc + b;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    let mut g_in = vec![0.0; input.len()];
    let mut g_k = vec![0.0; kernel.len()];
    let mut g_b = vec![0.0; d.c_out];
    for n in 0..d.batch {
        let img_off = n * d.c_in * plane_in;
        for o in 0..d.c_out {
            let gbase = (n * d.c_out + o) * plane_out;
            for i in 0..d.h_out {
                for j in 0..d.w_out {
                    let g = grad[gbase + i * d.w_out + j];
                    if g == 0.0 {
                        continue;
                    }
                    g_b[o] += g;
                    for c in 0..d.c_in {
                        for p in 0..d.k {
                            let irow =
                                img_off + (c * d.h + i * d.stride + p) * d.w + j * d.stride;
                            let krow = ((o * d.c_in + c) * d.k + p) * d.k;
                            for q in 0..d.k {
                                g_k[krow + q] += g * input[irow + q];
                                g_in[irow + q] += g * kernel[krow + q];
                            }
                        }
                    }
                }
            }
        }
    }
    (g_in, g_k, g_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_results_do_not_depend_on_batch_size() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let full = matmul(&a, &b, m, k, n);
        for i in 0..m {
            let single = matmul(&a[i * k..(i + 1) * k], &b, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &single[..]);
        }
    }
}
