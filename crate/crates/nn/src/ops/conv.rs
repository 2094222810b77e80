//! 2D convolution (cross-correlation) and its transpose, via im2col + GEMM.
//!
//! Weights are `[out, in, k, k]` for convolutions. A transposed convolution
//! stores `[in, out, k, k]`, which is exactly the weight of the strided
//! convolution it is the adjoint of.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::exec;
use crate::gemm::{gemm, View};
use crate::tensor::Tensor;

/// Samples per work item in backward passes. Fixed so that the reduction
/// order of weight gradients never depends on the thread count.
const GRAD_GROUP: usize = 4;

/// Square-kernel geometry shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeometry {
    /// "Same" padding: output length `ceil(input / stride)`, the extra
    /// padding cell (if any) going to the bottom/right edge.
    pub fn same(kernel: usize, stride: usize, input: usize) -> Self {
        let out = input.div_ceil(stride.max(1));
        let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
        ConvGeometry {
            kernel,
            stride,
            pad_lo: total / 2,
            pad_hi: total - total / 2,
        }
    }

    pub fn valid(kernel: usize, stride: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad_lo: 0,
            pad_hi: 0,
        }
    }

    pub fn output_len(&self, input: usize) -> Result<usize> {
        let padded = input + self.pad_lo + self.pad_hi;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return Err(NnError::InvalidArgument(format!(
                "kernel {} stride {} does not fit padded input {padded}",
                self.kernel, self.stride
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_lo == 0 && self.pad_hi == 0
    }
}

/// Gradients of a (transposed) convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Spatial layout of the "image side" of an im2col transform.
#[derive(Clone, Copy, Debug)]
struct Patch {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.g.kernel * self.g.kernel
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output positions `o` along an axis of length `len` with `o*s + kpos - lo` in bounds.
    fn valid_range(&self, kpos: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.g.stride;
        let lo = self.g.pad_lo;
        let start = if lo > kpos { (lo - kpos).div_ceil(s) } else { 0 };
        let end = if len + lo > kpos {
            ((len + lo - kpos - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (start, end.max(start))
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let k = self.g.kernel;
        let s = self.g.stride;
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.ho);
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.wo);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if oy < oy0 || oy >= oy1 || ox0 >= ox1 {
                            line.fill(0.0);
                            continue;
                        }
                        let iy = oy * s + ky - self.g.pad_lo;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..ox0].fill(0.0);
                        line[ox1..].fill(0.0);
                        if s == 1 {
                            let ix0 = ox0 + kx - self.g.pad_lo;
                            line[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                line[ox] = src[ox * s + kx - self.g.pad_lo];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back onto the image (the adjoint of `im2col`).
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let k = self.g.kernel;
        let s = self.g.stride;
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.h, self.ho);
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let srcrow = &cols[row * p..(row + 1) * p];
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.g.pad_lo;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &srcrow[oy * self.wo..(oy + 1) * self.wo];
                        if s == 1 {
                            let ix0 = ox0 + kx - self.g.pad_lo;
                            for (d, v) in dst[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&line[ox0..ox1]) {
                                *d += v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox * s + kx - self.g.pad_lo] += line[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(NnError::shape(op, format!("bias [{channels}]"), format!("{:?}", b.shape())));
        }
    }
    Ok(())
}

fn conv_patch(op: &'static str, x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<([usize; 4], usize, Patch)> {
    let [n, c, h, wd] = x.dims4()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != g.kernel || ws[3] != g.kernel {
        return Err(NnError::shape(
            op,
            format!("weight [O, {c}, {k}, {k}] for input {:?}", x.shape(), k = g.kernel),
            format!("{ws:?}"),
        ));
    }
    let patch = Patch {
        c,
        h,
        w: wd,
        ho: g.output_len(h)?,
        wo: g.output_len(wd)?,
        g,
    };
    Ok(([n, c, h, wd], ws[0], patch))
}

/// Convolution forward: `[N,C,H,W] * [O,C,k,k] -> [N,O,Ho,Wo]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let ([n, _, _, _], o, patch) = conv_patch("conv2d_forward", x, w, g)?;
    check_bias("conv2d_forward", bias, o)?;
    let (rows, p) = (patch.rows(), patch.cols());
    let in_len = patch.c * patch.h * patch.w;
    let mut out = Tensor::zeros(&[n, o, patch.ho, patch.wo]);
    let xd = x.data();
    let wd = w.data();
    exec::for_each_chunk_mut(out.data_mut(), o * p, |i, dst| {
        let xs = &xd[i * in_len..(i + 1) * in_len];
        let scratch;
        let cols: &[f32] = if patch.g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![0.0f32; rows * p];
            patch.im2col(xs, &mut buf);
            scratch = buf;
            &scratch
        };
        gemm(1.0, View::row_major(wd, o, rows), View::row_major(cols, rows, p), 0.0, dst);
        if let Some(b) = bias {
            for (oc, plane) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(out)
}

/// Sums per-group partial gradients in group order.
fn reduce_groups(parts: Vec<(Vec<f32>, Vec<f64>)>, wlen: usize, blen: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gw = vec![0.0f32; wlen];
    let mut gb = vec![0.0f64; blen];
    for (pw, pb) in parts {
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (gw, gb.into_iter().map(|v| v as f32).collect())
}

/// Convolution backward. `gy` is the gradient w.r.t. the forward output.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, g: ConvGeometry, input_grad: bool) -> Result<ConvGrads> {
    let ([n, c, h, wd], o, patch) = conv_patch("conv2d_backward", x, w, g)?;
    if gy.shape() != [n, o, patch.ho, patch.wo] {
        return Err(NnError::shape(
            "conv2d_backward",
            format!("{:?}", [n, o, patch.ho, patch.wo]),
            format!("{:?}", gy.shape()),
        ));
    }
    let (rows, p) = (patch.rows(), patch.cols());
    let in_len = c * h * wd;
    let (xd, wdat, gyd) = (x.data(), w.data(), gy.data());
    let groups = n.div_ceil(GRAD_GROUP);
    let mut gx = if input_grad {
        Some(Tensor::zeros(&[n, c, h, wd]))
    } else {
        None
    };
    let mut parts: Vec<(Vec<f32>, Vec<f64>)> = Vec::with_capacity(groups);
    {
        let work = |gi: usize, gx_chunk: Option<&mut [f32]>| -> (Vec<f32>, Vec<f64>) {
            let mut pw = vec![0.0f32; o * rows];
            let mut pb = vec![0.0f64; o];
            let mut cols = vec![0.0f32; rows * p];
            let mut gcols = if input_grad { vec![0.0f32; rows * p] } else { Vec::new() };
            let mut gx_chunk = gx_chunk;
            for (j, s) in (gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(n)).enumerate() {
                let xs = &xd[s * in_len..(s + 1) * in_len];
                let gys = &gyd[s * o * p..(s + 1) * o * p];
                let colv: &[f32] = if patch.g.is_pointwise() {
                    xs
                } else {
                    patch.im2col(xs, &mut cols);
                    &cols
                };
                gemm(1.0, View::row_major(gys, o, p), View::transposed(colv, p, rows), 1.0, &mut pw);
                for (oc, plane) in gys.chunks(p).enumerate() {
                    pb[oc] += plane.iter().map(|&v| v as f64).sum::<f64>();
                }
                if let Some(dst) = gx_chunk.as_deref_mut() {
                    let dst = &mut dst[j * in_len..(j + 1) * in_len];
                    if patch.g.is_pointwise() {
                        gemm(1.0, View::transposed(wdat, rows, o), View::row_major(gys, o, p), 0.0, dst);
                    } else {
                        gemm(1.0, View::transposed(wdat, rows, o), View::row_major(gys, o, p), 0.0, &mut gcols);
                        patch.col2im(&gcols, dst);
                    }
                }
            }
            (pw, pb)
        };
        match gx.as_mut() {
            Some(t) => {
                let mut slots: Vec<Option<(Vec<f32>, Vec<f64>)>> = vec![None; groups];
                exec::for_each_chunk_pair_mut(t.data_mut(), GRAD_GROUP * in_len, &mut slots, 1, |gi, chunk, slot| {
                    slot[0] = Some(work(gi, Some(chunk)));
                });
                parts.extend(slots.into_iter().flatten());
            }
            None => parts.extend(exec::map_indexed(groups, |gi| work(gi, None))),
        }
    }
    let (gw, gb) = reduce_groups(parts, o * rows, o);
    Ok(ConvGrads {
        input: gx,
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

fn tconv_patch(op: &'static str, x: &Tensor, w: &Tensor, g: ConvGeometry, out_hw: (usize, usize)) -> Result<([usize; 4], usize, Patch)> {
    let [n, cin, h, wd] = x.dims4()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != cin || ws[2] != g.kernel || ws[3] != g.kernel {
        return Err(NnError::shape(
            op,
            format!("weight [{cin}, O, {k}, {k}] for input {:?}", x.shape(), k = g.kernel),
            format!("{ws:?}"),
        ));
    }
    let cout = ws[1];
    let patch = Patch {
        c: cout,
        h: out_hw.0,
        w: out_hw.1,
        ho: g.output_len(out_hw.0)?,
        wo: g.output_len(out_hw.1)?,
        g,
    };
    if patch.ho != h || patch.wo != wd {
        return Err(NnError::shape(
            op,
            format!("input spatial {}x{} for output {}x{}", patch.ho, patch.wo, out_hw.0, out_hw.1),
            format!("{h}x{wd}"),
        ));
    }
    Ok(([n, cin, h, wd], cout, patch))
}

/// Transposed convolution forward: the adjoint of `conv2d_forward` with
/// geometry `g` mapping an `out_hw` image down to the input's size.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    let ([n, cin, _, _], cout, patch) = tconv_patch("conv_transpose2d_forward", x, w, g, out_hw)?;
    check_bias("conv_transpose2d_forward", bias, cout)?;
    let (rows, p) = (patch.rows(), patch.cols());
    let out_len = cout * patch.h * patch.w;
    let mut out = Tensor::zeros(&[n, cout, patch.h, patch.w]);
    let (xd, wd) = (x.data(), w.data());
    exec::for_each_chunk_mut(out.data_mut(), out_len, |i, dst| {
        let xs = &xd[i * cin * p..(i + 1) * cin * p];
        if patch.g.is_pointwise() {
            gemm(1.0, View::transposed(wd, rows, cin), View::row_major(xs, cin, p), 0.0, dst);
        } else {
            let mut cols = vec![0.0f32; rows * p];
            gemm(1.0, View::transposed(wd, rows, cin), View::row_major(xs, cin, p), 0.0, &mut cols);
            patch.col2im(&cols, dst);
        }
        if let Some(b) = bias {
            let plane = patch.h * patch.w;
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(out)
}

/// Transposed convolution backward.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    g: ConvGeometry,
    input_grad: bool,
) -> Result<ConvGrads> {
    let gys = gy.dims4()?;
    let ([n, cin, h, wd], cout, patch) = tconv_patch("conv_transpose2d_backward", x, w, g, (gys[2], gys[3]))?;
    if gys != [n, cout, patch.h, patch.w] {
        return Err(NnError::shape(
            "conv_transpose2d_backward",
            format!("{:?}", [n, cout, patch.h, patch.w]),
            format!("{:?}", gy.shape()),
        ));
    }
    let (rows, p) = (patch.rows(), patch.cols());
    let out_len = cout * patch.h * patch.w;
    let in_len = cin * h * wd;
    let (xd, wdat, gyd) = (x.data(), w.data(), gy.data());
    let groups = n.div_ceil(GRAD_GROUP);
    let work = |gi: usize, gx_chunk: Option<&mut [f32]>| -> (Vec<f32>, Vec<f64>) {
        let mut pw = vec![0.0f32; cin * rows];
        let mut pb = vec![0.0f64; cout];
        let mut cols = vec![0.0f32; rows * p];
        let mut gx_chunk = gx_chunk;
        for (j, s) in (gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(n)).enumerate() {
            let gys = &gyd[s * out_len..(s + 1) * out_len];
            let xs = &xd[s * in_len..(s + 1) * in_len];
            let colv: &[f32] = if patch.g.is_pointwise() {
                gys
            } else {
                patch.im2col(gys, &mut cols);
                &cols
            };
            gemm(1.0, View::row_major(xs, cin, p), View::transposed(colv, p, rows), 1.0, &mut pw);
            for (oc, plane) in gys.chunks(patch.h * patch.w).enumerate() {
                pb[oc] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
            if let Some(dst) = gx_chunk.as_deref_mut() {
                let dst = &mut dst[j * in_len..(j + 1) * in_len];
                gemm(1.0, View::row_major(wdat, cin, rows), View::row_major(colv, rows, p), 0.0, dst);
            }
        }
        (pw, pb)
    };
    let mut gx = if input_grad {
        Some(Tensor::zeros(&[n, cin, h, wd]))
    } else {
        None
    };
    let parts: Vec<(Vec<f32>, Vec<f64>)> = match gx.as_mut() {
        Some(t) => {
            let mut slots: Vec<Option<(Vec<f32>, Vec<f64>)>> = vec![None; groups];
            exec::for_each_chunk_pair_mut(t.data_mut(), GRAD_GROUP * in_len, &mut slots, 1, |gi, chunk, slot| {
                slot[0] = Some(work(gi, Some(chunk)));
            });
            slots.into_iter().flatten().collect()
        }
        None => exec::map_indexed(groups, |gi| work(gi, None)),
    };
    let (gw, gb) = reduce_groups(parts, cin * rows, cout);
    Ok(ConvGrads {
        input: gx,
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_matches_keras_convention() {
        assert_eq!(ConvGeometry::same(3, 1, 32), ConvGeometry { kernel: 3, stride: 1, pad_lo: 1, pad_hi: 1 });
        assert_eq!(ConvGeometry::same(2, 1, 32).pad_hi, 1);
        assert_eq!(ConvGeometry::same(4, 2, 32), ConvGeometry { kernel: 4, stride: 2, pad_lo: 1, pad_hi: 1 });
        assert_eq!(ConvGeometry::same(3, 2, 32).output_len(32).unwrap(), 16);
        assert_eq!(ConvGeometry::same(6, 2, 64).output_len(64).unwrap(), 32);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, Some(&Tensor::zeros(&[3])), ConvGeometry::valid(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mismatched_weight_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 5, 5]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn transposed_doubles_spatial_dims() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 3, 2, 2], 1.0);
        let g = ConvGeometry::same(2, 2, 4);
        let y = conv_transpose2d_forward(&x, &w, None, g, (4, 4)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }
}
