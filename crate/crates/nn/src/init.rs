//! Parameter initialisation.

use rand::Rng;

use crate::tensor::Tensor;

/// Kaiming-uniform (fan-in, ReLU gain): `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_uniform(&[16, 8, 3, 3], 72, &mut rng);
        let b = (6.0f32 / 72.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(t.max_abs() > 0.5 * b);
    }
}
