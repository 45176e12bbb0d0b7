use film_denoise_core::noise::{
    corrupt, residual_noise_std, sample_params, stream_rng, variance_map, NoiseDistribution, NoiseKind, NoiseParams, Range,
};
use film_denoise_core::Tensor64;
use proptest::prelude::*;

fn sample_moments(x: f64, p: NoiseParams, n: usize, seed: u64) -> (f64, f64) {
    let clean = Tensor64::full(&[n], x);
    let noisy = corrupt(&clean, p, &mut stream_rng(seed, 0));
    let mean = noisy.data().iter().sum::<f64>() / n as f64;
    let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

#[test]
fn million_draws_match_mean_and_variance() {
    let p = NoiseParams::new(0.2, 0.1).unwrap();
    let n = 1_000_000;
    let (mean, var) = sample_moments(0.5, p, n, 1);
    assert!((var - 0.11).abs() / 0.11 < 0.01, "variance {var}");
    assert!((mean - 0.5).abs() < 3.0 * (0.11f64 / n as f64).sqrt(), "mean {mean}");
}

#[test]
fn variance_tracks_intensity() {
    let p = NoiseParams::new(0.2, 0.05).unwrap();
    for (i, &x) in [0.0, 0.1, 0.5, 0.9, 1.0].iter().enumerate() {
        let (_, var) = sample_moments(x, p, 200_000, 10 + i as u64);
        let expected = 0.2 * x + 0.0025;
        assert!((var - expected).abs() / expected < 0.02, "x {x}: {var} vs {expected}");
    }
}

#[test]
fn zero_noise_is_identity() {
    let x = Tensor64::from_fn(&[3, 4, 4], |i| i as f64 / 48.0);
    let y = corrupt(&x, NoiseParams::default(), &mut stream_rng(3, 0));
    assert_eq!(x, y);
}

#[test]
fn output_is_not_clipped() {
    let x = Tensor64::full(&[10_000], 0.0);
    let y = corrupt(&x, NoiseParams::gaussian(0.5), &mut stream_rng(4, 0));
    assert!(y.data().iter().any(|&v| v < 0.0));
    let x = Tensor64::full(&[10_000], 1.0);
    let y = corrupt(&x, NoiseParams::gaussian(0.5), &mut stream_rng(4, 0));
    assert!(y.data().iter().any(|&v| v > 1.0));
}

#[test]
fn negative_intensity_floors_signal_term() {
    let x = Tensor64::from_vec(&[2], vec![-0.5, 0.5]).unwrap();
    let p = NoiseParams::new(0.4, 0.1).unwrap();
    let v = variance_map(&x, p, false).unwrap();
    assert!((v.data()[0] - 0.01).abs() < 1e-15);
    assert!((v.data()[1] - 0.21).abs() < 1e-15);
    assert!(variance_map(&x, p, true).is_err());
}

#[test]
fn negative_parameters_rejected() {
    assert!(NoiseParams::new(-0.1, 0.1).is_err());
    assert!(NoiseParams::new(0.1, -0.1).is_err());
    assert!(Range::new(0.3, 0.1).is_err());
}

#[test]
fn sampled_parameters_are_uniform_over_the_range() {
    let dist = NoiseDistribution::new(Range::new(0.0, 0.2).unwrap(), Range::new(0.0, 1.0).unwrap()).unwrap();
    let mut rng = stream_rng(6, 0);
    let n = 100_000;
    let draws: Vec<NoiseParams> = (0..n).map(|_| sample_params(&dist, &mut rng)).collect();
    assert!(draws.iter().all(|p| (0.0..=0.2).contains(&p.a) && (0.0..=1.0).contains(&p.sigma)));
    let mean_a = draws.iter().map(|p| p.a).sum::<f64>() / n as f64;
    let mean_s = draws.iter().map(|p| p.sigma).sum::<f64>() / n as f64;
    assert!((mean_a - 0.1).abs() < 0.002, "{mean_a}");
    assert!((mean_s - 0.5).abs() < 0.01, "{mean_s}");
}

#[test]
fn fixed_distribution_always_yields_its_point() {
    let p = NoiseParams::new(0.05, 0.1).unwrap();
    let dist = NoiseDistribution::fixed(p);
    assert!(dist.is_degenerate());
    let mut rng = stream_rng(0, 0);
    assert!((0..100).all(|_| sample_params(&dist, &mut rng) == p));
}

#[test]
fn kinds_map_level_to_the_right_parameter() {
    assert_eq!(NoiseKind::Gaussian.params(0.3), NoiseParams::gaussian(0.3));
    assert_eq!(NoiseKind::Poisson.params(0.3), NoiseParams::poisson(0.3));
    assert_eq!("poisson".parse::<NoiseKind>().unwrap(), NoiseKind::Poisson);
    assert!("speckle".parse::<NoiseKind>().is_err());
}

#[test]
fn residual_std_ignores_bias() {
    let clean = Tensor64::from_fn(&[100], |i| i as f64 / 100.0);
    let shifted = clean.map(|v| v + 0.25);
    assert!(residual_noise_std(&shifted, &clean).unwrap() < 1e-12);
}

proptest! {
    #[test]
    fn same_seed_same_noise(seed in any::<u64>(), a in 0.0f64..0.5, s in 0.0f64..0.5) {
        let x = Tensor64::from_fn(&[3, 5, 5], |i| (i % 7) as f64 / 7.0);
        let p = NoiseParams::new(a, s).unwrap();
        let y1 = corrupt(&x, p, &mut stream_rng(seed, 2));
        let y2 = corrupt(&x, p, &mut stream_rng(seed, 2));
        prop_assert_eq!(y1, y2);
    }

    #[test]
    fn streams_are_independent(seed in any::<u64>()) {
        let x = Tensor64::zeros(&[16]);
        let p = NoiseParams::gaussian(0.1);
        let y1 = corrupt(&x, p, &mut stream_rng(seed, 1));
        let y2 = corrupt(&x, p, &mut stream_rng(seed, 2));
        prop_assert_ne!(y1, y2);
    }
}
