use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2. Returns the output and, per output cell,
/// the flat input index of the selected maximum (first index wins ties).
pub fn maxpool2d_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::shape("maxpool2d", "even H and W", format!("{:?}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                od[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], gy: &Tensor) -> Result<Tensor> {
    if gy.len() != argmax.len() {
        return Err(NnError::shape("maxpool2d_backward", argmax.len(), gy.len()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        gd[i as usize] += g;
    }
    Ok(gx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                od[plane * 4 * h * w + y * 2 * w + xx] = xd[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward(gy: &Tensor) -> Result<Tensor> {
    let [n, c, h2, w2] = gy.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(NnError::shape("upsample2x_backward", "even H and W", format!("{:?}", gy.shape())));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gd = gy.data();
    let xd = gx.data_mut();
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                xd[plane * h * w + (y / 2) * w + xx / 2] += gd[plane * h2 * w2 + y * w2 + xx];
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn single_window_picks_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (_, arg) = maxpool2d_forward(&x).unwrap();
        let g = maxpool2d_backward(&[1, 1, 2, 2], &arg, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool2d_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }
}
