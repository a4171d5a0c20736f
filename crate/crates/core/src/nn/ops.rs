//! Dense kernels shared by the layers. Activations in the convolutional
//! stack use the `[channel, batch, height, width]` layout so that a whole
//! chunk of examples goes through one matrix product per layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A shaped block of finite reals, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor data",
                expected: format!("{n} values for shape {shape:?}"),
                got: data.len().to_string(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("tensor values must be finite".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `c[m×n] = a·b` (or `+=` when `accumulate`). `ta` / `tb` mean the operand
/// is stored transposed, i.e. as `[k×m]` / `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold m·k, k·n and m·n elements and the strides
    // describe those row-major (or transposed) layouts exactly.
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

/// `[cin, b, h, w]` → `[cin·9, b·h·w]` patches for a 3×3 zero-padded
/// convolution.
pub(crate) fn im2col(x: &[f64], cin: usize, b: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = b * h * w;
    let mut cols = vec![0.0; cin * 9 * plane];
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s_row = &src[(bi * h + sy as usize) * w..][..w];
                        let d_row = &mut row[(bi * h + y) * w..][..w];
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                d_row[xx] = s_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], cin: usize, b: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = b * h * w;
    let mut x = vec![0.0; cin * plane];
    for ci in 0..cin {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s_row = &row[(bi * h + y) * w..][..w];
                        let d_row = &mut dst[(bi * h + sy as usize) * w..][..w];
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                d_row[sx as usize] += s_row[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2×2 max pooling with stride 2 (trailing odd rows/columns dropped).
/// Returns the pooled planes and, per output, the flat input index of the
/// first maximum.
pub(crate) fn maxpool(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0usize;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (p * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x[i] > best {
                        best = x[i];
                        at = i;
                    }
                }
                let o = (p * oh + y) * ow + xx;
                out[o] = best;
                arg[o] = at as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries whose forward output was not positive.
pub(crate) fn relu_backward(grad: &mut [f64], out: &[f64]) {
    grad.iter_mut().zip(out).for_each(|(g, o)| {
        if *o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `y[b, out] = x[b, inp] · Wᵀ + bias` with `W` stored `[out, inp]`.
pub(crate) fn dense_forward(x: &[f64], b: usize, inp: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out = bias.len();
    let mut y = vec![0.0; b * out];
    gemm(b, inp, out, x, false, weight, true, &mut y, false);
    for row in y.chunks_mut(out) {
        row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    dy: &[f64],
    x: &[f64],
    b: usize,
    inp: usize,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let out = dbias.len();
    gemm(out, b, inp, dy, true, x, false, dweight, true);
    for row in dy.chunks(out) {
        dbias.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; b * inp];
    gemm(b, out, inp, dy, false, weight, false, &mut dx, false);
    dx
}
