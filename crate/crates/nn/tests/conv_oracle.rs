use proptest::prelude::*;
use radiomap_nn::gradcheck::{adjoint_gap, conv_equivalence};
use radiomap_nn::ops::{conv2d_forward, ConvGeometry};
use radiomap_nn::{with_mode, ExecMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fast_conv_matches_direct_loops() {
    let results = conv_equivalence(100, 21).unwrap();
    assert_eq!(results.len(), 100);
    assert!(results.iter().any(|r| r.transposed));
    assert!(results.iter().any(|r| r.stride == 2 && !r.transposed));
    for r in &results {
        assert!(r.error < 1e-5, "{r:?}");
    }
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    for (seed, k) in [(1u64, 2usize), (2, 3), (3, 4), (4, 5)] {
        let gap = adjoint_gap(seed, 2, 3, 4, 8, k).unwrap();
        assert!(gap < 1e-4, "k={k}: {gap:e}");
    }
}

#[test]
fn mismatched_channels_are_rejected() {
    let x = Tensor::zeros(&[1, 3, 8, 8]);
    let w = Tensor::zeros(&[4, 2, 3, 3]);
    assert!(conv2d_forward(&x, &w, None, ConvGeometry::same(3, 1, 8)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_padding_preserves_spatial_dims(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..20, w in 1usize..20, c in 1usize..4) {
        let x = Tensor::full(&[1, c, h, w], 1.0);
        let wt = Tensor::full(&[2, c, k, k], 0.1);
        let gh = ConvGeometry::same(k, 1, h);
        prop_assert_eq!(gh, ConvGeometry::same(k, 1, w));
        let y = conv2d_forward(&x, &wt, None, gh).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, h, w]);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise(seed in any::<u64>(), n in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[n, 3, 12, 12], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3, k, k], -1.0, 1.0, &mut rng);
        let g = ConvGeometry::same(k, 1, 12);
        let a = with_mode(ExecMode::Sequential, || conv2d_forward(&x, &w, None, g).unwrap());
        let b = with_mode(ExecMode::Parallel, || conv2d_forward(&x, &w, None, g).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }
}
