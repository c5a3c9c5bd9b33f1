//! 2D convolution (cross-correlation) and stride-`s` transposed convolution,
//! lowered to GEMM through im2col.
//!
//! Each image of a batch is computed with its own GEMM call, so a result is
//! bit-identical regardless of what else shares its batch.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; preserves spatial extents.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<Geometry> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    let (pad_h, pad_w, ho, wo) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("same padding needs odd kernel extents, got {kh}x{kw}"),
                ));
            }
            (kh / 2, kw / 2, h, w)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        pad_h,
        pad_w,
        ho,
        wo,
    })
}

fn im2col<T: Real>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy + ky;
                    if iy < g.pad_h || iy - g.pad_h >= g.h {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &img[(c * g.h + iy - g.pad_h) * g.w..][..g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox + kx;
                        *o = if ix < g.pad_w || ix - g.pad_w >= g.w {
                            T::ZERO
                        } else {
                            src[ix - g.pad_w]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad_h || iy - g.pad_h >= g.h {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy - g.pad_h) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix >= g.pad_w && ix - g.pad_w < g.w {
                            dst[ix - g.pad_w] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!("bias shape {:?}, expected [{channels}]", bias.shape()),
        ));
    }
    Ok(())
}

/// Cross-correlation of `input [N,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, padding)?;
    check_bias(bias, g.cout, "conv2d")?;
    let plane = g.ho * g.wo;
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * plane;
    let mut out = vec![T::ZERO; g.n * out_size];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; g.patch() * plane]
    };
    for n in 0..g.n {
        let img = &input.data()[n * in_size..(n + 1) * in_size];
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        let b_mat: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            g.patch(),
            plane,
            kernel.data(),
            false,
            b_mat,
            false,
            T::ZERO,
            dst,
        );
        for (co, row) in dst.chunks_exact_mut(plane).enumerate() {
            let b = bias[co];
            for v in row {
                *v += b;
            }
        }
    }
    let out = Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Reverse-mode gradients of [`conv2d`] given the upstream gradient.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let plane = g.ho * g.wo;
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * plane;
    let mut d_input = vec![T::ZERO; input.len()];
    let mut d_kernel = vec![T::ZERO; kernel.len()];
    let mut d_bias = vec![T::ZERO; g.cout];
    let mut cols = vec![T::ZERO; g.patch() * plane];
    let mut d_cols = vec![T::ZERO; g.patch() * plane];
    for n in 0..g.n {
        let img = &input.data()[n * in_size..(n + 1) * in_size];
        let go = &grad_out.data()[n * out_size..(n + 1) * out_size];
        for (co, row) in go.chunks_exact(plane).enumerate() {
            d_bias[co] += row.iter().copied().sum::<T>();
        }
        let dimg = &mut d_input[n * in_size..(n + 1) * in_size];
        if g.is_pointwise() {
            T::gemm(
                g.cout,
                plane,
                g.patch(),
                go,
                false,
                img,
                true,
                T::ONE,
                &mut d_kernel,
            );
            T::gemm(
                g.patch(),
                g.cout,
                plane,
                kernel.data(),
                true,
                go,
                false,
                T::ZERO,
                dimg,
            );
        } else {
            im2col(img, &g, &mut cols);
            T::gemm(
                g.cout,
                plane,
                g.patch(),
                go,
                false,
                &cols,
                true,
                T::ONE,
                &mut d_kernel,
            );
            T::gemm(
                g.patch(),
                g.cout,
                plane,
                kernel.data(),
                true,
                go,
                false,
                T::ZERO,
                &mut d_cols,
            );
            col2im(&d_cols, &g, dimg);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), d_input)?,
        kernel: Tensor::new(kernel.shape(), d_kernel)?,
        bias: Tensor::new(&[g.cout], d_bias)?,
    })
}

struct UpGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
}

fn up_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<UpGeometry> {
    let (n, cin, h, w) = input.dims4("conv_transpose2d")?;
    let (kcin, cout, kh, kw) = kernel.dims4("conv_transpose2d")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    if stride == 0 || kh != stride || kw != stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel {kh}x{kw} must equal stride {stride}"),
        ));
    }
    Ok(UpGeometry {
        n,
        cin,
        h,
        w,
        cout,
        s: stride,
    })
}

/// Transposed convolution with `kernel [Cin,Cout,s,s]` and stride `s`; each
/// input pixel scatters into its own disjoint `s x s` output block, so the
/// spatial extents grow exactly by a factor of `s`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = up_geometry(input, kernel, stride)?;
    check_bias(bias, g.cout, "conv_transpose2d")?;
    let (s, hw) = (g.s, g.h * g.w);
    let (ho, wo) = (g.h * s, g.w * s);
    let rows = g.cout * s * s;
    let in_size = g.cin * hw;
    let out_size = g.cout * ho * wo;
    let mut out = vec![T::ZERO; g.n * out_size];
    let mut tmp = vec![T::ZERO; rows * hw];
    for n in 0..g.n {
        let img = &input.data()[n * in_size..(n + 1) * in_size];
        T::gemm(
            rows,
            g.cin,
            hw,
            kernel.data(),
            true,
            img,
            false,
            T::ZERO,
            &mut tmp,
        );
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        for co in 0..g.cout {
            let b = bias[co];
            for a in 0..s {
                for bb in 0..s {
                    let src = &tmp[((co * s + a) * s + bb) * hw..][..hw];
                    for y in 0..g.h {
                        let orow = &mut dst[(co * ho + y * s + a) * wo..][..wo];
                        for x in 0..g.w {
                            orow[x * s + bb] = src[y * g.w + x] + b;
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[g.n, g.cout, ho, wo], out)?;
    out.check_finite("conv_transpose2d")?;
    Ok(out)
}

/// Reverse-mode gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = up_geometry(input, kernel, stride)?;
    let (s, hw) = (g.s, g.h * g.w);
    let (ho, wo) = (g.h * s, g.w * s);
    if grad_out.shape() != [g.n, g.cout, ho, wo] {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let rows = g.cout * s * s;
    let in_size = g.cin * hw;
    let out_size = g.cout * ho * wo;
    let mut d_input = vec![T::ZERO; input.len()];
    let mut d_kernel = vec![T::ZERO; kernel.len()];
    let mut d_bias = vec![T::ZERO; g.cout];
    let mut gathered = vec![T::ZERO; rows * hw];
    for n in 0..g.n {
        let go = &grad_out.data()[n * out_size..(n + 1) * out_size];
        for co in 0..g.cout {
            d_bias[co] += go[co * ho * wo..(co + 1) * ho * wo]
                .iter()
                .copied()
                .sum::<T>();
            for a in 0..s {
                for bb in 0..s {
                    let dst = &mut gathered[((co * s + a) * s + bb) * hw..][..hw];
                    for y in 0..g.h {
                        let grow = &go[(co * ho + y * s + a) * wo..][..wo];
                        for x in 0..g.w {
                            dst[y * g.w + x] = grow[x * s + bb];
                        }
                    }
                }
            }
        }
        let img = &input.data()[n * in_size..(n + 1) * in_size];
        let dimg = &mut d_input[n * in_size..(n + 1) * in_size];
        T::gemm(
            g.cin,
            rows,
            hw,
            kernel.data(),
            false,
            &gathered,
            false,
            T::ZERO,
            dimg,
        );
        T::gemm(
            g.cin,
            hw,
            rows,
            img,
            false,
            &gathered,
            true,
            T::ONE,
            &mut d_kernel,
        );
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), d_input)?,
        kernel: Tensor::new(kernel.shape(), d_kernel)?,
        bias: Tensor::new(&[g.cout], d_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Six nested loops, straight from the definition.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4("").unwrap();
        let (cout, _, kh, kw) = k.dims4("").unwrap();
        let ho = h + 2 * pad - kh + 1;
        let wo = w + 2 * pad - kw + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x
                                            [((i * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((i * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, &t(&[1], &[0.0]), Padding::Same).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn valid_window_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, &t(&[1], &[0.0]), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        for (pad, mode) in [(1, Padding::Same), (0, Padding::Valid)] {
            let want = naive_conv(&x, &k, &b, pad);
            let got = conv2d(&x, &k, &b, mode).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn f32_matches_oracle_to_1e6_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let want = naive_conv(
            &x.cast::<f32>().cast(),
            &k.cast::<f32>().cast(),
            &b.cast::<f32>().cast(),
            1,
        );
        let got = conv2d(&x.cast::<f32>(), &k.cast(), &b.cast(), Padding::Same).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_same_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Same),
            Err(Error::Shape { .. })
        ));
        let k = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Same).is_err());
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Valid).is_ok());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], f32::MAX);
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 4.0);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Same),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn transpose_single_pixel_broadcast() {
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &k, &t(&[1], &[0.0]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);
    }

    #[test]
    fn transpose_corner_kernel_scatters() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let y = conv_transpose2d(&x, &k, &t(&[1], &[0.0]), 2).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.data(), &want);
    }

    /// Builds the Jacobian of a naive stride-2, 2x2 valid convolution and
    /// applies its transpose: the transposed convolution must equal it.
    #[test]
    fn transpose_equals_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cin_t, cout_t, h, w) = (2usize, 3usize, 4usize, 4usize);
        let x = Tensor::<f64>::randn(&[1, cin_t, h, w], 1.0, &mut rng);
        // transposed-conv kernel [Cin_t, Cout_t, 2, 2]
        let k = Tensor::<f64>::randn(&[cin_t, cout_t, 2, 2], 1.0, &mut rng);
        let (ho, wo) = (2 * h, 2 * w);
        // forward strided conv maps [Cout_t, ho, wo] -> [Cin_t, h, w]
        let rows = cin_t * h * w;
        let cols = cout_t * ho * wo;
        let mut jac = vec![0.0; rows * cols];
        for ci in 0..cin_t {
            for y in 0..h {
                for xx in 0..w {
                    let r = (ci * h + y) * w + xx;
                    for co in 0..cout_t {
                        for a in 0..2 {
                            for b in 0..2 {
                                let c = (co * ho + 2 * y + a) * wo + 2 * xx + b;
                                jac[r * cols + c] = k[((ci * cout_t + co) * 2 + a) * 2 + b];
                            }
                        }
                    }
                }
            }
        }
        let mut want = vec![0.0; cols];
        for c in 0..cols {
            want[c] = (0..rows).map(|r| jac[r * cols + c] * x[r]).sum();
        }
        let got = conv_transpose2d(&x, &k, &Tensor::zeros(&[cout_t]), 2).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), y> = <x, conv_backward(y)> with zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 4, 5, 6], 1.0, &mut rng);
        let fx = conv2d(&x, &k, &Tensor::zeros(&[4]), Padding::Same).unwrap();
        let g = conv2d_backward(&x, &k, Padding::Same, &y).unwrap();
        let lhs = fx.dot(&y).unwrap();
        let rhs = x.dot(&g.input).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_rejects_mismatched_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(
            conv_transpose2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), &Tensor::zeros(&[1]), 2).is_err()
        );
        assert!(
            conv_transpose2d(&x, &Tensor::zeros(&[3, 1, 2, 2]), &Tensor::zeros(&[1]), 2).is_err()
        );
    }
}
