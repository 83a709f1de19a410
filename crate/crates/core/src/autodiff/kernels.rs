//! Dense numeric kernels shared by the forward and backward rules.

/// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` / `b_t` select the transposed reading of a row-major buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid (unpadded, stride 1) multi-channel 2-D convolution.
/// One-dimensional convolution is the `height = kernel_h = 1` case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel_h + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel_w + 1
    }

    fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.in_channels {
            let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
            let w = &kernel[(o * g.in_channels + c) * g.kernel_len()..][..g.kernel_len()];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kernel_h {
                        let row = &src[(i + ki) * g.width + j..][..g.kernel_w];
                        let wr = &w[ki * g.kernel_w..][..g.kernel_w];
                        acc += row.iter().zip(wr).map(|(x, y)| x * y).sum::<f64>();
                    }
                    plane[i * ow + j] += acc;
                }
            }
        }
    }
    out
}

/// Returns `(d input, d kernel, d bias)` for upstream gradient `grad`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut d_in = vec![0.0; input.len()];
    let mut d_k = vec![0.0; kernel.len()];
    let mut d_b = vec![0.0; g.out_channels];
    for o in 0..g.out_channels {
        let go = &grad[o * oh * ow..(o + 1) * oh * ow];
        d_b[o] = go.iter().sum();
        for c in 0..g.in_channels {
            let base = c * g.height * g.width;
            let widx = (o * g.in_channels + c) * g.kernel_len();
            for i in 0..oh {
                for j in 0..ow {
                    let up = go[i * ow + j];
                    for ki in 0..g.kernel_h {
                        for kj in 0..g.kernel_w {
                            let x = base + (i + ki) * g.width + j + kj;
                            let w = widx + ki * g.kernel_w + kj;
                            d_in[x] += kernel[w] * up;
                            d_k[w] += input[x] * up;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k, d_b)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
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
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let transpose = |src: &[f64], r: usize, c: usize| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = src[i * c + j];
                }
            }
            t
        };
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, a_t, bb, b_t) in [
            (&a, false, &b, false),
            (&at, true, &b, false),
            (&a, false, &bt, true),
            (&at, true, &bt, true),
        ] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 0.0);
            for (x, y) in c.iter().zip(&naive) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
