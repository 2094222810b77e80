//! Randomised checks of the fast kernels against [`crate::reference`]:
//! analytic gradients versus central finite differences, and im2col
//! convolutions versus direct loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::{self, Activation, ConvGeometry};
use crate::reference::{self as refr, finite_difference, relative_error, Array4};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub layer: &'static str,
    pub case: usize,
    pub shape: Vec<usize>,
    pub error: f64,
}

fn rand_array(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f64) -> Array4 {
    let n = dims.iter().product();
    Array4 {
        dims,
        data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    }
}

fn tensor(a: &Array4) -> Tensor {
    a.to_tensor()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn with_data(a: &Array4, data: &[f64]) -> Array4 {
    Array4 {
        dims: a.dims,
        data: data.to_vec(),
    }
}

/// Values rounded to f32 so the f64 oracle sees exactly what the fast path sees.
fn quantize(a: &mut Array4) {
    a.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

struct Shape {
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn small_shape(rng: &mut ChaCha8Rng, stride: usize) -> Shape {
    let sizes = [4usize, 6, 8];
    let h = sizes[rng.gen_range(0..3)];
    let w = sizes[rng.gen_range(0..3)];
    let ks: &[usize] = if stride == 1 { &[1, 2, 3, 5] } else { &[2, 3, 4] };
    Shape {
        n: rng.gen_range(1..=3),
        c: rng.gen_range(1..=4),
        o: rng.gen_range(1..=4),
        h,
        w,
        k: ks[rng.gen_range(0..ks.len())],
    }
}

/// Gradient checks for every layer kind, `cases` random instances each.
pub fn layer_gradient_checks(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..cases {
        for stride in [1usize, 2] {
            out.extend(check_conv(&mut rng, case, stride)?);
        }
        out.extend(check_tconv(&mut rng, case)?);
        out.push(check_maxpool(&mut rng, case)?);
        out.push(check_upsample(&mut rng, case)?);
        out.push(check_activation(&mut rng, case, Activation::Relu)?);
        out.push(check_activation(&mut rng, case, Activation::Sigmoid)?);
        out.push(check_concat(&mut rng, case)?);
        out.push(check_mae(&mut rng, case)?);
    }
    Ok(out)
}

fn check_conv(rng: &mut ChaCha8Rng, case: usize, stride: usize) -> Result<Vec<CheckResult>> {
    let s = small_shape(rng, stride);
    let mut x = rand_array(rng, [s.n, s.c, s.h, s.w], 1.0);
    let mut wt = rand_array(rng, [s.o, s.c, s.k, s.k], 0.5);
    quantize(&mut x);
    quantize(&mut wt);
    let mut bias: Vec<f64> = (0..s.o).map(|_| rng.gen_range(-0.5..0.5)).collect();
    bias.iter_mut().for_each(|v| *v = *v as f32 as f64);
    // Even sizes give both axes the same padding.
    let g = ConvGeometry::same(s.k, stride, s.h);
    let y = refr::conv2d(&x, &wt, Some(&bias), stride, g.pad_lo, g.pad_hi);
    let mut r = rand_array(rng, y.dims, 1.0);
    quantize(&mut r);
    let grads = ops::conv2d_backward(&tensor(&x), &tensor(&wt), &tensor(&r), g, true)?;
    let loss = |x: &Array4, w: &Array4, b: &[f64]| refr::conv2d(x, w, Some(b), stride, g.pad_lo, g.pad_hi).dot(&r);
    let fx = finite_difference(&x.data, FD_STEP, |d| loss(&with_data(&x, d), &wt, &bias));
    let fw = finite_difference(&wt.data, FD_STEP, |d| loss(&x, &with_data(&wt, d), &bias));
    let fb = finite_difference(&bias, FD_STEP, |d| loss(&x, &wt, d));
    let names: [&'static str; 3] = if stride == 1 {
        ["conv2d.input", "conv2d.weight", "conv2d.bias"]
    } else {
        ["strided_conv2d.input", "strided_conv2d.weight", "strided_conv2d.bias"]
    };
    let shape = vec![s.n, s.c, s.h, s.w, s.o, s.k];
    Ok(vec![
        CheckResult {
            layer: names[0],
            case,
            shape: shape.clone(),
            error: relative_error(&f64s(grads.input.as_ref().expect("input grad")), &fx, 1e-6),
        },
        CheckResult {
            layer: names[1],
            case,
            shape: shape.clone(),
            error: relative_error(&f64s(&grads.weight), &fw, 1e-6),
        },
        CheckResult {
            layer: names[2],
            case,
            shape,
            error: relative_error(&f64s(&grads.bias), &fb, 1e-6),
        },
    ])
}

fn check_tconv(rng: &mut ChaCha8Rng, case: usize) -> Result<Vec<CheckResult>> {
    let s = small_shape(rng, 2);
    let (h, w) = (s.h / 2, s.w / 2);
    let mut x = rand_array(rng, [s.n, s.c, h, w], 1.0);
    let mut wt = rand_array(rng, [s.c, s.o, s.k, s.k], 0.5);
    quantize(&mut x);
    quantize(&mut wt);
    let bias: Vec<f64> = (0..s.o).map(|_| rng.gen_range(-0.5f32..0.5) as f64).collect();
    let g = ConvGeometry::same(s.k, 2, s.h);
    let y = refr::conv_transpose2d(&x, &wt, Some(&bias), 2, g.pad_lo, (s.h, s.w));
    let mut r = rand_array(rng, y.dims, 1.0);
    quantize(&mut r);
    let grads = ops::conv_transpose2d_backward(&tensor(&x), &tensor(&wt), &tensor(&r), g, true)?;
    let loss = |x: &Array4, wt: &Array4, b: &[f64]| refr::conv_transpose2d(x, wt, Some(b), 2, g.pad_lo, (s.h, s.w)).dot(&r);
    let fx = finite_difference(&x.data, FD_STEP, |d| loss(&with_data(&x, d), &wt, &bias));
    let fw = finite_difference(&wt.data, FD_STEP, |d| loss(&x, &with_data(&wt, d), &bias));
    let fb = finite_difference(&bias, FD_STEP, |d| loss(&x, &wt, d));
    let shape = vec![s.n, s.c, h, w, s.o, s.k];
    Ok(vec![
        CheckResult {
            layer: "transposed_conv2d.input",
            case,
            shape: shape.clone(),
            error: relative_error(&f64s(grads.input.as_ref().expect("input grad")), &fx, 1e-6),
        },
        CheckResult {
            layer: "transposed_conv2d.weight",
            case,
            shape: shape.clone(),
            error: relative_error(&f64s(&grads.weight), &fw, 1e-6),
        },
        CheckResult {
            layer: "transposed_conv2d.bias",
            case,
            shape,
            error: relative_error(&f64s(&grads.bias), &fb, 1e-6),
        },
    ])
}

fn check_maxpool(rng: &mut ChaCha8Rng, case: usize) -> Result<CheckResult> {
    let s = small_shape(rng, 2);
    let dims = [s.n, s.c, s.h, s.w];
    let n: usize = dims.iter().product();
    // Distinct values spaced well beyond the finite-difference step.
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let x = Array4 {
        dims,
        data: perm.iter().map(|&p| (p as f32 * 0.01 - 1.0) as f64).collect(),
    };
    let y = refr::maxpool2(&x);
    let r = rand_array(rng, y.dims, 1.0);
    let xt = tensor(&x);
    let (_, argmax) = ops::maxpool2d_forward(&xt)?;
    let gx = ops::maxpool2d_backward(xt.shape(), &argmax, &tensor(&r))?;
    let r32 = Array4 {
        dims: r.dims,
        data: r.data.iter().map(|&v| v as f32 as f64).collect(),
    };
    let fx = finite_difference(&x.data, FD_STEP, |d| refr::maxpool2(&with_data(&x, d)).dot(&r32));
    Ok(CheckResult {
        layer: "maxpool2d",
        case,
        shape: dims.to_vec(),
        error: relative_error(&f64s(&gx), &fx, 1e-6),
    })
}

fn check_upsample(rng: &mut ChaCha8Rng, case: usize) -> Result<CheckResult> {
    let s = small_shape(rng, 1);
    let mut x = rand_array(rng, [s.n, s.c, s.h / 2, s.w / 2], 1.0);
    quantize(&mut x);
    let mut r = rand_array(rng, [s.n, s.c, s.h, s.w], 1.0);
    quantize(&mut r);
    let gx = ops::upsample2x_backward(&tensor(&r))?;
    let fx = finite_difference(&x.data, FD_STEP, |d| refr::upsample2(&with_data(&x, d)).dot(&r));
    Ok(CheckResult {
        layer: "upsample2x",
        case,
        shape: x.dims.to_vec(),
        error: relative_error(&f64s(&gx), &fx, 1e-6),
    })
}

fn check_activation(rng: &mut ChaCha8Rng, case: usize, act: Activation) -> Result<CheckResult> {
    let s = small_shape(rng, 1);
    let dims = [s.n, s.c, s.h, s.w];
    let n: usize = dims.iter().product();
    // Keep ReLU inputs away from the kink.
    let x = Array4 {
        dims,
        data: (0..n)
            .map(|_| {
                let m = rng.gen_range(0.05f32..2.0);
                (if rng.gen_bool(0.5) { m } else { -m }) as f64
            })
            .collect(),
    };
    let mut r = rand_array(rng, dims, 1.0);
    quantize(&mut r);
    let mut y = tensor(&x);
    act.forward_inplace(&mut y);
    let mut g = tensor(&r);
    act.backward_inplace(&y, &mut g)?;
    let f = |a: &Array4| match act {
        Activation::Relu => refr::relu(a),
        Activation::Sigmoid => refr::sigmoid(a),
        Activation::Linear => a.clone(),
    };
    let fx = finite_difference(&x.data, FD_STEP, |d| f(&with_data(&x, d)).dot(&r));
    Ok(CheckResult {
        layer: match act {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        },
        case,
        shape: dims.to_vec(),
        error: relative_error(&f64s(&g), &fx, 1e-6),
    })
}

fn check_concat(rng: &mut ChaCha8Rng, case: usize) -> Result<CheckResult> {
    let s = small_shape(rng, 1);
    let mut a = rand_array(rng, [s.n, s.c, s.h, s.w], 1.0);
    let mut b = rand_array(rng, [s.n, s.o, s.h, s.w], 1.0);
    quantize(&mut a);
    quantize(&mut b);
    let mut r = rand_array(rng, [s.n, s.c + s.o, s.h, s.w], 1.0);
    quantize(&mut r);
    let parts = ops::concat_channels_backward(&tensor(&r), &[s.c, s.o])?;
    let fa = finite_difference(&a.data, FD_STEP, |d| refr::concat(&[&with_data(&a, d), &b]).dot(&r));
    let fb = finite_difference(&b.data, FD_STEP, |d| refr::concat(&[&a, &with_data(&b, d)]).dot(&r));
    let mut analytic = f64s(&parts[0]);
    analytic.extend(f64s(&parts[1]));
    let mut fd = fa;
    fd.extend(fb);
    Ok(CheckResult {
        layer: "concat",
        case,
        shape: vec![s.n, s.c, s.o, s.h, s.w],
        error: relative_error(&analytic, &fd, 1e-6),
    })
}

fn check_mae(rng: &mut ChaCha8Rng, case: usize) -> Result<CheckResult> {
    let s = small_shape(rng, 1);
    let dims = [s.n, 1, s.h, s.w];
    let mut t = rand_array(rng, dims, 1.0);
    quantize(&mut t);
    let n: usize = dims.iter().product();
    // Residuals bounded away from zero so the loss is differentiable.
    let p = Array4 {
        dims,
        data: (0..n)
            .map(|i| {
                let m = rng.gen_range(0.01f32..1.0) as f64;
                t.data[i] + if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect(),
    };
    let (_, g) = ops::mae_loss(&tensor(&p), &tensor(&t))?;
    let fx = finite_difference(&p.data, FD_STEP, |d| refr::mae(d, &t.data));
    Ok(CheckResult {
        layer: "mae_loss",
        case,
        shape: dims.to_vec(),
        error: relative_error(&f64s(&g), &fx, 1e-9),
    })
}

#[derive(Clone, Debug)]
pub struct EquivalenceResult {
    pub case: usize,
    pub transposed: bool,
    pub dims: [usize; 4],
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `max |fast - ref| / max(1, |ref|)`.
    pub error: f64,
}

/// Fast forward convolutions (plain, strided, transposed) against direct loops.
pub fn conv_equivalence(cases: usize, seed: u64) -> Result<Vec<EquivalenceResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let transposed = case % 4 == 3;
        let stride = if transposed || rng.gen_bool(0.3) { 2 } else { 1 };
        let n = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=6);
        let o = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=7);
        let h = 2 * rng.gen_range(2..=8);
        let w = 2 * rng.gen_range(2..=8);
        let fan = (c * k * k) as f64;
        let mut wt = if transposed {
            rand_array(&mut rng, [c, o, k, k], 1.0 / fan.sqrt())
        } else {
            rand_array(&mut rng, [o, c, k, k], 1.0 / fan.sqrt())
        };
        quantize(&mut wt);
        let bias: Vec<f64> = (0..o).map(|_| rng.gen_range(-0.5f32..0.5) as f64).collect();
        let bt = Tensor::new(vec![o], bias.iter().map(|&v| v as f32).collect())?;
        let (fast, reference, dims) = if transposed {
            let mut x = rand_array(&mut rng, [n, c, h / 2, w / 2], 1.0);
            quantize(&mut x);
            let g = ConvGeometry::same(k, 2, h);
            let fast = ops::conv_transpose2d_forward(&tensor(&x), &tensor(&wt), Some(&bt), g, (h, w))?;
            let r = refr::conv_transpose2d(&x, &wt, Some(&bias), 2, g.pad_lo, (h, w));
            (fast, r, x.dims)
        } else {
            let mut x = rand_array(&mut rng, [n, c, h, w], 1.0);
            quantize(&mut x);
            let g = ConvGeometry::same(k, stride, h);
            let fast = ops::conv2d_forward(&tensor(&x), &tensor(&wt), Some(&bt), g)?;
            let r = refr::conv2d(&x, &wt, Some(&bias), stride, g.pad_lo, g.pad_hi);
            (fast, r, x.dims)
        };
        let error = if fast.shape() != reference.dims {
            f64::INFINITY
        } else {
            fast.data()
                .iter()
                .zip(&reference.data)
                .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max)
        };
        out.push(EquivalenceResult {
            case,
            transposed,
            dims,
            out_channels: o,
            kernel: k,
            stride,
            error,
        });
    }
    Ok(out)
}

/// `|<conv_s2(x), y> - <x, tconv_s2(y)>| / max(1, |<conv_s2(x), y>|)` for a
/// random strided conv sharing one weight tensor with its transpose.
pub fn adjoint_gap(seed: u64, n: usize, c: usize, o: usize, size: usize, k: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[n, c, size, size], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[o, c, k, k], -0.5, 0.5, &mut rng);
    let g = ConvGeometry::same(k, 2, size);
    let y = Tensor::uniform(&[n, o, size / 2, size / 2], -1.0, 1.0, &mut rng);
    let cx = ops::conv2d_forward(&x, &w, None, g)?;
    // The strided conv's [O, C, k, k] weight is the transpose's [in, out, k, k].
    let ty = ops::conv_transpose2d_forward(&y, &w, None, g, (size, size))?;
    let lhs = cx.dot(&y)?;
    let rhs = x.dot(&ty)?;
    Ok((lhs - rhs).abs() / lhs.abs().max(1.0))
}
