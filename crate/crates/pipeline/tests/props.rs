use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcaptcha_pipeline::augment::{apply, geometric_augment, AugmentParams};
use vcaptcha_pipeline::split::split_dataset;

proptest! {
    #[test]
    fn split_is_a_disjoint_partition(n in 3usize..60, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("vol{i}")).collect();
        let s = split_dataset(&ids, seed).unwrap();
        let mut all: Vec<String> = s.all().cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(s.val.len(), ((n as f64 * 0.1).round() as usize).max(1));
        prop_assert_eq!(s.test.len(), ((n as f64 * 0.2).round() as usize).max(1));
        prop_assert_eq!(s, split_dataset(&ids, seed).unwrap());
    }

    #[test]
    fn empty_mask_stays_empty(seed in any::<u64>(), n in 4usize..24) {
        let img = Array2::from_shape_fn((n, n), |(r, c)| (r * 3 + c) as f32);
        let zero = Array2::<u8>::zeros((n, n));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out_img, out_mask) = geometric_augment(img.view(), zero.view(), &mut rng);
        prop_assert_eq!(out_img.dim(), (n, n));
        prop_assert!(out_mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn masks_stay_binary_and_images_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array2::from_shape_fn((16, 16), |(r, c)| ((r * 7 + c * 3) % 11) as f32);
        let mask = img.mapv(|v| u8::from(v > 5.0));
        let (a, m) = geometric_augment(img.view(), mask.view(), &mut rng);
        prop_assert!(m.iter().all(|&v| v <= 1));
        prop_assert!(a.iter().all(|&v| (0.0..=10.0).contains(&v)));
    }

    #[test]
    fn flips_are_involutions(h in any::<bool>(), v in any::<bool>()) {
        let img = Array2::from_shape_fn((9, 12), |(r, c)| (r * 12 + c) as f32);
        let mask = img.mapv(|x| u8::from(x as usize % 3 == 0));
        let p = AugmentParams { flip_h: h, flip_v: v, ..AugmentParams::identity() };
        let (a, b) = apply(&p, img.view(), mask.view());
        let (a2, b2) = apply(&p, a.view(), b.view());
        prop_assert_eq!(a2, img);
        prop_assert_eq!(b2, mask);
    }
}
