use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Stacks inputs along the channel axis, preserving input order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| NnError::InvalidArgument("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims4()?;
        if tn != n || th != h || tw != w {
            return Err(NnError::shape(
                "concat_channels",
                format!("[{n}, *, {h}, {w}]"),
                format!("{:?}", t.shape()),
            ));
        }
        total += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward(gy: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = gy.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(NnError::shape("concat_backward", format!("{c} channels"), format!("{channels:?}")));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * plane)).collect();
    let gd = gy.data();
    for s in 0..n {
        let mut off = s * c * plane;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&gd[off..off + ci * plane]);
            off += ci * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::new(vec![n, ci, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_preserves_order_and_counts() {
        let a = Tensor::full(&[2, 3, 2, 2], 1.0);
        let b = Tensor::full(&[2, 5, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 8, 2, 2]);
        assert!(y.data()[..12].iter().all(|&v| v == 1.0));
        assert!(y.data()[12..32].iter().all(|&v| v == 2.0));
        let parts = concat_channels_backward(&y, &[3, 5]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
