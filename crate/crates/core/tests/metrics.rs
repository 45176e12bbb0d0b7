use film_denoise_core::metrics::{gaussian_taps, psnr, ssim, ssim_reference, PSNR_CAP_DB};
use film_denoise_core::noise::stream_rng;
use film_denoise_core::Tensor64;
use proptest::prelude::*;
use rand::Rng;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor64 {
    let mut rng = stream_rng(seed, 0);
    Tensor64::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn psnr_of_constant_offset_is_closed_form() {
    let a = Tensor64::full(&[3, 16, 16], 0.5);
    for d in [0.1, 0.01, 1.0 / 255.0] {
        let b = a.map(|v| v + d);
        let expected = -20.0 * d.log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn psnr_identical_is_capped() {
    let a = random_image(3, 8, 8, 1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
}

#[test]
fn psnr_rejects_shape_mismatch() {
    assert!(psnr(&Tensor64::zeros(&[3, 4, 4]), &Tensor64::zeros(&[3, 4, 5]), 1.0).is_err());
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = random_image(3, 32, 32, 2);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_constant_images_is_closed_form() {
    // Flat planes: only the luminance term is left.
    let (x, y) = (0.2, 0.6);
    let a = Tensor64::full(&[1, 16, 16], x);
    let b = Tensor64::full(&[1, 16, 16], y);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * x * y + c1) / (x * x + y * y + c1);
    assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn ssim_rejects_images_smaller_than_the_window() {
    let a = Tensor64::zeros(&[3, 10, 32]);
    assert!(ssim(&a, &a).is_err());
}

#[test]
fn gaussian_window_is_normalised_and_symmetric() {
    let t = gaussian_taps();
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..t.len() {
        assert_eq!(t[i], t[t.len() - 1 - i]);
    }
}

#[test]
fn more_noise_lowers_both_metrics() {
    let clean = random_image(3, 32, 32, 3);
    let noise = random_image(3, 32, 32, 4).map(|v| v - 0.5);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for s in [0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = clean.zip_map(&noise, |c, n| c + s * n).unwrap();
        let now = (psnr(&noisy, &clean, 1.0).unwrap(), ssim(&noisy, &clean).unwrap());
        assert!(now.0 < last.0 && now.1 < last.1, "s {s}: {now:?} after {last:?}");
        last = now;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_ssim_matches_brute_force(
        c in 1usize..4, h in 11usize..=32, w in 11usize..=32, seed in any::<u64>(), s in 0.0f64..0.5,
    ) {
        let a = random_image(c, h, w, seed);
        let n = random_image(c, h, w, seed ^ 0x5555);
        let b = a.zip_map(&n, |x, y| x + s * (y - 0.5)).unwrap();
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b).unwrap();
        prop_assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = random_image(3, 16, 16, seed);
        let b = random_image(3, 16, 16, seed.wrapping_add(1));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded(seed in any::<u64>()) {
        let a = random_image(2, 12, 12, seed);
        let b = random_image(2, 12, 12, !seed);
        let v = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
    }
}
