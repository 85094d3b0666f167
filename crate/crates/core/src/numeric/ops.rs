//! Differentiable primitives: 3×3 same-padding convolution and the
//! element-wise maps used by the residual functions and penalties.
//!
//! Each forward function has a matching `*_backward` that maps the gradient
//! of a scalar loss with respect to the output onto the inputs.

use std::sync::atomic::{AtomicBool, Ordering};

use super::{NumericError, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Process-wide switch that makes [`conv2d_backward`] return a wrong kernel
/// gradient, for exercising the gradient checker.
#[doc(hidden)]
pub fn set_conv_backward_fault(on: bool) {
    CONV_BACKWARD_FAULT.store(on, Ordering::Relaxed);
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor) -> Result<ConvDims, NumericError> {
    let &[c_in, h, w] = input.shape() else {
        return Err(NumericError::InvalidShape {
            op: "conv2d",
            what: "input must be [C_in, H, W]",
            found: input.shape().to_vec(),
        });
    };
    let &[c_out, kc, kh, kw] = kernel.shape() else {
        return Err(NumericError::InvalidShape {
            op: "conv2d",
            what: "kernel must be [C_out, C_in, 3, 3]",
            found: kernel.shape().to_vec(),
        });
    };
    if kc != c_in || kh != KERNEL || kw != KERNEL {
        return Err(NumericError::ShapeMismatch {
            op: "conv2d",
            expected: vec![c_out, c_in, KERNEL, KERNEL],
            found: kernel.shape().to_vec(),
        });
    }
    if h == 0 || w == 0 {
        return Err(NumericError::InvalidShape {
            op: "conv2d",
            what: "spatial extents must be at least 1",
            found: input.shape().to_vec(),
        });
    }
    Ok(ConvDims { c_in, c_out, h, w })
}

/// Output rows/columns `[lo, hi)` whose shifted source `p + d` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Offsets (dy, dx) of one kernel tap relative to the output cell.
#[inline]
fn tap_offset(tap: usize) -> (isize, isize) {
    ((tap / KERNEL) as isize - 1, (tap % KERNEL) as isize - 1)
}

/// Copies `src` shifted by the tap offset into `dst` (both `[C, H*W]`),
/// zero outside the image. Returns false when no cell is in range.
fn gather_shifted(src: &[f64], dst: &mut [f64], d: &ConvDims, tap: usize) -> bool {
    let (dy, dx) = tap_offset(tap);
    let (y0, y1) = valid_range(d.h, dy);
    let (x0, x1) = valid_range(d.w, dx);
    if y0 >= y1 || x0 >= x1 {
        return false;
    }
    let hw = d.h * d.w;
    dst.fill(0.0);
    for c in 0..d.c_in {
        let s = &src[c * hw..(c + 1) * hw];
        let o = &mut dst[c * hw..(c + 1) * hw];
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let sx = (x0 as isize + dx) as usize;
            o[y * d.w + x0..y * d.w + x1].copy_from_slice(&s[sy * d.w + sx..sy * d.w + sx + (x1 - x0)]);
        }
    }
    true
}

/// Adds `src` (`[C, H*W]`, indexed by output cell) back onto the source
/// cells of the tap; the adjoint of [`gather_shifted`].
fn scatter_shifted(src: &[f64], dst: &mut [f64], d: &ConvDims, tap: usize) {
    let (dy, dx) = tap_offset(tap);
    let (y0, y1) = valid_range(d.h, dy);
    let (x0, x1) = valid_range(d.w, dx);
    let hw = d.h * d.w;
    for c in 0..d.c_in {
        let s = &src[c * hw..(c + 1) * hw];
        let o = &mut dst[c * hw..(c + 1) * hw];
        for y in y0..y1 {
            let ty = (y as isize + dy) as usize;
            let tx = (x0 as isize + dx) as usize;
            for (a, b) in o[ty * d.w + tx..ty * d.w + tx + (x1 - x0)]
                .iter_mut()
                .zip(&s[y * d.w + x0..y * d.w + x1])
            {
                *a += b;
            }
        }
    }
}

/// Strided matrix view for [`gemm`]: element (r, c) lives at
/// `offset + r * row_stride + c * col_stride`.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    row_stride: usize,
    col_stride: usize,
}

impl View {
    fn dense(cols: usize) -> Self {
        Self { offset: 0, row_stride: cols, col_stride: 1 }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > cv.last_index(m, n));
    if k > 0 {
        assert!(a.len() > av.last_index(m, k));
        assert!(b.len() > bv.last_index(k, n));
    }
    // SAFETY: the asserts above bound every element the kernel reads or
    // writes; `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Same-size 2-D convolution with a 3×3 kernel and zero padding of 1.
///
/// `output[o,y,x] = bias[o] + Σ input[c,y+dy−1,x+dx−1]·kernel[o,c,dy,dx]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor, NumericError> {
    let d = conv_dims(input, kernel)?;
    bias.expect_shape("conv2d bias", &[d.c_out])?;
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.c_out * hw];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    let mut shifted = vec![0.0; d.c_in * hw];
    for tap in 0..TAPS {
        let src: &[f64] = if tap == TAPS / 2 {
            input.data()
        } else if gather_shifted(input.data(), &mut shifted, &d, tap) {
            &shifted
        } else {
            continue;
        };
        let kv = View { offset: tap, row_stride: d.c_in * TAPS, col_stride: TAPS };
        gemm((d.c_out, d.c_in, hw), kernel.data(), kv, src, View::dense(hw), 1.0, &mut out, View::dense(hw));
    }
    Tensor::new(&[d.c_out, d.h, d.w], out)
}

/// Reverse-mode gradient of [`conv2d`] given the upstream gradient.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<Conv2dGrads, NumericError> {
    let d = conv_dims(input, kernel)?;
    grad_out.expect_shape("conv2d_backward grad", &[d.c_out, d.h, d.w])?;
    let hw = d.h * d.w;
    let g = grad_out.data();

    let bias: Vec<f64> = g.chunks_exact(hw).map(|row| row.iter().sum()).collect();
    let mut gk = vec![0.0; kernel.len()];
    let mut gi = vec![0.0; input.len()];
    let mut shifted = vec![0.0; d.c_in * hw];
    let mut back = vec![0.0; d.c_in * hw];

    for tap in 0..TAPS {
        let center = tap == TAPS / 2;
        let src: &[f64] = if center {
            input.data()
        } else if gather_shifted(input.data(), &mut shifted, &d, tap) {
            &shifted
        } else {
            continue;
        };
        // dK_tap[o, c] += Σ_hw g[o, hw] · src[c, hw]
        let gk_view = View { offset: tap, row_stride: d.c_in * TAPS, col_stride: TAPS };
        let src_t = View { offset: 0, row_stride: 1, col_stride: hw };
        gemm((d.c_out, hw, d.c_in), g, View::dense(hw), src, src_t, 1.0, &mut gk, gk_view);

        // dX[c, shifted hw] += Σ_o K[o, c, tap] · g[o, hw]
        let k_t = View { offset: tap, row_stride: TAPS, col_stride: d.c_in * TAPS };
        if center {
            gemm((d.c_in, d.c_out, hw), kernel.data(), k_t, g, View::dense(hw), 1.0, &mut gi, View::dense(hw));
        } else {
            gemm((d.c_in, d.c_out, hw), kernel.data(), k_t, g, View::dense(hw), 0.0, &mut back, View::dense(hw));
            scatter_shifted(&back, &mut gi, &d, tap);
        }
    }

    if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
        gk.iter_mut().for_each(|v| *v *= 1.1);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), gi)?,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[d.c_out], bias)?,
    })
}

/// Point-wise maps with a known derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unary {
    Relu,
    Sigmoid,
    Abs,
    /// Distance of a value from the interval [0, 1].
    Clamp01Violation,
}

impl Unary {
    pub const ALL: [Unary; 4] = [Unary::Relu, Unary::Sigmoid, Unary::Abs, Unary::Clamp01Violation];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Abs => x.abs(),
            Unary::Clamp01Violation => (x - 1.0).max(0.0) + (-x).max(0.0),
        }
    }

    /// Derivative, with the subgradient 0 at every kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (1.0 - s)
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp01Violation => {
                if x > 1.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Points where the map is not differentiable.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Unary::Relu | Unary::Abs => &[0.0],
            Unary::Sigmoid => &[],
            Unary::Clamp01Violation => &[0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::Clamp01Violation => "clamp01_violation",
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn unary(kind: Unary, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn unary_backward(kind: Unary, input: &Tensor, grad_out: &Tensor) -> Result<Tensor, NumericError> {
    grad_out.expect_shape(kind.name(), input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * kind.derivative(x))
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    unary(Unary::Relu, x)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(Unary::Sigmoid, x)
}

pub fn abs(x: &Tensor) -> Tensor {
    unary(Unary::Abs, x)
}

pub fn clamp01_violation(x: &Tensor) -> Tensor {
    unary(Unary::Clamp01Violation, x)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericError> {
    b.expect_shape(op, a.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct sliding-window evaluation of the convolution sum.
    fn conv_reference(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let c_out = kernel.shape()[0];
        let mut out = Tensor::zeros(&[c_out, h, w]);
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data()[o];
                    for c in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += input.data()[(c * h + sy as usize) * w + sx as usize]
                                    * kernel.data()[((o * c_in + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let input = Tensor::zeros(&[2, 3, 4]);
        let kernel = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64);
        let bias = t(&[3], &[0.5, -1.0, 2.0]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        for o in 0..3 {
            assert!(out.data()[o * 12..(o + 1) * 12].iter().all(|&v| v == bias.data()[o]));
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let input = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.5 - 2.0);
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        for o in 0..2 {
            kernel.data_mut()[((o * 2 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_on_two_by_two() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_matches_sliding_window_reference() {
        for &(c_in, c_out, h, w) in &[(3, 2, 5, 4), (4, 6, 1, 1), (5, 3, 2, 2), (1, 1, 1, 3)] {
            let input = Tensor::new(&[c_in, h, w], pseudo_random(c_in * h * w, 1)).unwrap();
            let kernel = Tensor::new(&[c_out, c_in, 3, 3], pseudo_random(c_out * c_in * 9, 2)).unwrap();
            let bias = Tensor::new(&[c_out], pseudo_random(c_out, 3)).unwrap();
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv_reference(&input, &kernel, &bias);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{c_in} {c_out} {h} {w}");
        }
    }

    #[test]
    fn conv_rejects_mismatched_kernel() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let kernel = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&input, &kernel, &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
        assert!(conv2d(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, dX> + <K, dK> + <b, db> for a bilinear map.
        let input = Tensor::new(&[3, 4, 5], pseudo_random(60, 7)).unwrap();
        let kernel = Tensor::new(&[2, 3, 3, 3], pseudo_random(54, 8)).unwrap();
        let bias = Tensor::new(&[2], pseudo_random(2, 9)).unwrap();
        let g = Tensor::new(&[2, 4, 5], pseudo_random(40, 10)).unwrap();
        let out = conv2d(&input, &kernel, &bias).unwrap();
        let lhs: f64 = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(&input, &kernel, &g).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let rhs = dot(&kernel, &grads.kernel) + dot(&bias, &grads.bias);
        let rhs_x = dot(&input, &grads.input);
        // Linear in (K, b) for fixed x, and linear in x for fixed K.
        assert!((lhs - rhs).abs() < 1e-10);
        let bias_part = dot(&bias, &grads.bias);
        assert!((lhs - bias_part - rhs_x).abs() < 1e-10);
    }

    #[test]
    fn relu_sign_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
        assert!((sigmoid_scalar(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
    }

    #[test]
    fn clamp01_violation_piecewise() {
        let out = clamp01_violation(&t(&[3], &[-0.5, 0.3, 1.2]));
        let expect = [0.5, 0.0, 0.2];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let g = unary_backward(Unary::Relu, &t(&[3], &[-1.0, 0.0, 2.0]), &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn binary_ops_check_shapes() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[0.5, 0.5]);
        assert_eq!(add(&a, &b).unwrap().data(), &[1.5, 2.5]);
        assert_eq!(sub(&a, &b).unwrap().data(), &[0.5, 1.5]);
        assert_eq!(scale(&a, -2.0).data(), &[-2.0, -4.0]);
        assert!(add(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
