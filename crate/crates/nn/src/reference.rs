//! Direct nested-loop `f64` implementations of the layer primitives.
//!
//! These share no code with the im2col/GEMM kernels in [`crate::ops`] and are
//! used as oracles by the test suites (convolution equivalence, finite
//! differences, adjoint identities).

use crate::tensor::Tensor;

/// An `N x C x H x W` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Array4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "reference arrays are rank 4");
        Array4 {
            dims: [s[0], s[1], s[2], s[3]],
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.to_vec(), self.data.iter().map(|&v| v as f32).collect()).expect("consistent dims")
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn dot(&self, other: &Array4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Direct cross-correlation. `w` is `[O, C, k, k]`.
pub fn conv2d(x: &Array4, w: &Array4, bias: Option<&[f64]>, stride: usize, pad_lo: usize, pad_hi: usize) -> Array4 {
    let [n, c, h, wd] = x.dims;
    let [o, wc, k, k2] = w.dims;
    assert_eq!(wc, c);
    assert_eq!(k, k2);
    let ho = (h + pad_lo + pad_hi - k) / stride + 1;
    let wo = (wd + pad_lo + pad_hi - k) / stride + 1;
    let mut out = Array4::zeros([n, o, ho, wo]);
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad_lo as isize;
                                let ix = (ox * stride + kx) as isize - pad_lo as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(s, ic, iy as usize, ix as usize) * w.get(oc, ic, ky, kx);
                            }
                        }
                    }
                    let i = out.idx(s, oc, oy, ox);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Direct transposed convolution by scattering each input cell through the
/// kernel. `w` is `[C_in, C_out, k, k]`; `out_hw` is the output size.
pub fn conv_transpose2d(
    x: &Array4,
    w: &Array4,
    bias: Option<&[f64]>,
    stride: usize,
    pad_lo: usize,
    out_hw: (usize, usize),
) -> Array4 {
    let [n, cin, h, wd] = x.dims;
    let [wc, cout, k, _] = w.dims;
    assert_eq!(wc, cin);
    let (oh, ow) = out_hw;
    let mut out = Array4::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = out.idx(s, oc, oy, ox);
                    out.data[i] = bias.map_or(0.0, |b| b[oc]);
                }
            }
        }
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.get(s, ic, iy, ix);
                    for oc in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - pad_lo as isize;
                                let ox = (ix * stride + kx) as isize - pad_lo as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let i = out.idx(s, oc, oy as usize, ox as usize);
                                out.data[i] += v * w.get(ic, oc, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn maxpool2(x: &Array4) -> Array4 {
    let [n, c, h, w] = x.dims;
    let mut out = Array4::zeros([n, c, h / 2, w / 2]);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.get(s, ch, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let i = out.idx(s, ch, y, xx);
                    out.data[i] = m;
                }
            }
        }
    }
    out
}

pub fn upsample2(x: &Array4) -> Array4 {
    let [n, c, h, w] = x.dims;
    let mut out = Array4::zeros([n, c, 2 * h, 2 * w]);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let i = out.idx(s, ch, y, xx);
                    out.data[i] = x.get(s, ch, y / 2, xx / 2);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Array4) -> Array4 {
    Array4 {
        dims: x.dims,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

pub fn sigmoid(x: &Array4) -> Array4 {
    Array4 {
        dims: x.dims,
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

pub fn concat(parts: &[&Array4]) -> Array4 {
    let [n, _, h, w] = parts[0].dims;
    let c: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut out = Array4::zeros([n, c, h, w]);
    for s in 0..n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.dims[1] {
                for y in 0..h {
                    for x in 0..w {
                        let i = out.idx(s, base + ch, y, x);
                        out.data[i] = p.get(s, ch, y, x);
                    }
                }
            }
            base += p.dims[1];
        }
    }
    out
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - target[i]).abs();
    }
    s / pred.len() as f64
}

/// Central finite differences of a scalar function of `x`, one coordinate at a time.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max-norm relative error `max|a-b| / max(max|b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(floor);
    num / den
}
