use film_denoise_core::gradcheck::grad_check;
use film_denoise_core::model::ModelConfig;
use film_denoise_core::noise::{stream_rng, NoiseParams};
use film_denoise_core::optim::{Adam, AdamConfig};
use film_denoise_core::param::{Group, GroupSet};
use film_denoise_core::{FilmUnet32, FilmUnet64, Tensor32, Tensor64};
use proptest::prelude::*;
use rand::Rng;

fn randomise_film(model: &mut FilmUnet64, seed: u64) {
    let mut rng = stream_rng(seed, 0);
    for p in model.params_mut().iter_mut().filter(|p| p.group() == Group::Film) {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor32 {
    let mut rng = stream_rng(seed, 0);
    Tensor32::from_fn(&[n, shape[0], shape[1], shape[2]], |_| rng.random_range(0.0..1.0))
}

#[test]
fn reference_parameter_counts_by_hand() {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let backbone = conv(3, 32, 3) + conv(32, 32, 3)
        + conv(32, 64, 3) + conv(64, 64, 3)
        + conv(64, 128, 3) + conv(128, 128, 3)
        + conv(128, 64, 3) + conv(128, 64, 3) + conv(64, 64, 3)
        + conv(64, 32, 3) + conv(64, 32, 3) + conv(32, 32, 3)
        + conv(32, 3, 1);
    let site_channels = [32, 32, 64, 64, 128, 128, 64, 64, 64, 32, 32, 32];
    let trunk = (2 * 128 + 128) + (128 * 128 + 128);
    let heads: usize = site_channels.iter().map(|c| 128 * 2 * c + 2 * c).sum();
    assert_eq!(backbone, 517_795);
    assert_eq!(trunk + heads, 206_784);

    let model = FilmUnet32::build(ModelConfig::reference()).unwrap();
    let counts = model.partition().counts;
    assert_eq!(counts.backbone, backbone);
    assert_eq!(counts.film, trunk + heads);
    assert_eq!(counts.total, model.parameter_count());
    assert_eq!(model.site_names().len(), 12);
}

#[test]
fn partition_is_disjoint_and_exhaustive() {
    let model = FilmUnet32::build(ModelConfig::smoke()).unwrap();
    let part = model.partition();
    assert_eq!(part.backbone.len() + part.film.len(), model.params().len());
    assert!(part.backbone.iter().all(|p| p.group() == Group::Backbone));
    assert!(part.film.iter().all(|p| p.group() == Group::Film));
    assert_eq!(part.counts.backbone + part.counts.film, part.counts.total);
}

#[test]
fn indivisible_input_is_rejected() {
    assert!(FilmUnet32::build(ModelConfig::new([3, 10, 10], 3, 4, vec![8], 0)).is_err());
    assert!(FilmUnet32::build(ModelConfig::new([3, 12, 12], 3, 4, vec![8], 0)).is_ok());
}

#[test]
fn unknown_film_site_is_rejected() {
    let mut cfg = ModelConfig::new([3, 8, 8], 2, 4, vec![8], 0);
    cfg.film_sites = vec!["enc9.conv1".into()];
    assert!(FilmUnet32::build(cfg).is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 1)).unwrap();
    let b = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 1)).unwrap();
    let c = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 2)).unwrap();
    for g in Group::ALL {
        assert_eq!(a.group_digest(g), b.group_digest(g));
    }
    assert_ne!(a.group_digest(Group::Backbone), c.group_digest(Group::Backbone));
}

#[test]
fn fresh_model_applies_identity_modulation_bit_exact() {
    let model = FilmUnet32::build(ModelConfig::new([3, 16, 16], 3, 6, vec![12, 12], 4)).unwrap();
    let x = batch(3, [3, 16, 16], 1);
    let bare = model.forward_backbone(&x).unwrap();
    for p in [NoiseParams::default(), NoiseParams::gaussian(0.3), NoiseParams::new(0.2, 0.05).unwrap()] {
        let out = model.denoise(&x, p).unwrap();
        assert_eq!(out.data(), bare.data());
        for (gamma, beta) in model.condition(&NoiseParams::batch::<f32>(&[p])).unwrap() {
            assert!(gamma.data().iter().all(|&g| g == 1.0));
            assert!(beta.data().iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn conditioner_changes_output_once_trained() {
    let mut model = FilmUnet64::build(ModelConfig::new([3, 8, 8], 2, 4, vec![8], 4)).unwrap();
    randomise_film(&mut model, 3);
    let x = Tensor64::from_fn(&[1, 3, 8, 8], |i| (i % 5) as f64 / 5.0);
    let lo = model.denoise(&x, NoiseParams::gaussian(0.05)).unwrap();
    let hi = model.denoise(&x, NoiseParams::gaussian(0.4)).unwrap();
    assert_ne!(lo, hi);
}

#[test]
fn gamma_derivative_matches_finite_difference() {
    let mut model = FilmUnet64::build(ModelConfig::new([3, 8, 8], 2, 4, vec![8, 8], 5)).unwrap();
    randomise_film(&mut model, 6);
    let mut rng = stream_rng(7, 0);
    let weights: Vec<Tensor64> = model
        .condition(&Tensor64::zeros(&[2, 2]))
        .unwrap()
        .iter()
        .map(|(g, _)| Tensor64::from_fn(g.shape(), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let p = Tensor64::from_vec(&[2, 2], vec![0.05, 0.13, 0.2, 0.31]).unwrap();
    // One check per site: d/dp of sum(gamma ⊙ w).
    for (site, w) in weights.iter().enumerate() {
        let worst = grad_check(
            |tape, pv| {
                let bound = model.bind(tape)?;
                let m = model.condition_on(tape, &bound, pv)?;
                let wv = tape.constant(w.clone())?;
                let prod = tape.mul(m[site].0, wv)?;
                tape.sum(prod)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-5, "site {site}: worst {worst:e}");
    }
}

fn train_steps(model: &mut FilmUnet32, groups: &GroupSet, steps: usize) {
    model.set_trainable(groups).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let clean = batch(4, [3, 16, 16], 8);
    let noisy = batch(4, [3, 16, 16], 9);
    let cond = NoiseParams::batch(&[NoiseParams::gaussian(0.1); 4]);
    for _ in 0..steps {
        model.loss_and_grads(&noisy, &cond, &clean).unwrap();
        adam.step(model.params_mut()).unwrap();
    }
}

#[test]
fn freezing_a_group_keeps_it_bit_identical() {
    let cfg = ModelConfig::new([3, 16, 16], 2, 4, vec![8], 10);
    for (trained, frozen) in [(Group::Film, Group::Backbone), (Group::Backbone, Group::Film)] {
        let mut model = FilmUnet32::build(cfg.clone()).unwrap();
        let before = (model.group_digest(trained), model.group_digest(frozen));
        train_steps(&mut model, &[trained].into(), 5);
        assert_eq!(model.trainable_groups(), [trained].into());
        assert_ne!(model.group_digest(trained), before.0, "{trained} did not move");
        assert_eq!(model.group_digest(frozen), before.1, "{frozen} moved");
        assert!(model.params().iter().filter(|p| p.group() == frozen).all(|p| p.grad.is_none()));
    }
}

#[test]
fn freeze_all_leaves_every_weight_alone() {
    let mut model = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 11)).unwrap();
    model.freeze_all();
    assert!(model.trainable_groups().is_empty());
    let digests: Vec<u64> = Group::ALL.iter().map(|&g| model.group_digest(g)).collect();
    let mut adam = Adam::new(AdamConfig::default());
    let cond = NoiseParams::batch(&[NoiseParams::gaussian(0.1); 2]);
    model.loss_and_grads(&batch(2, [3, 16, 16], 1), &cond, &batch(2, [3, 16, 16], 2)).unwrap();
    adam.step(model.params_mut()).unwrap();
    let after: Vec<u64> = Group::ALL.iter().map(|&g| model.group_digest(g)).collect();
    assert_eq!(digests, after);
    assert!(model.set_trainable(&GroupSet::new()).is_err());
}

#[test]
fn inference_is_pure() {
    let model = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 12)).unwrap();
    let x = batch(2, [3, 16, 16], 3);
    let digest = model.group_digest(Group::Backbone);
    let a = model.denoise(&x, NoiseParams::gaussian(0.2)).unwrap();
    let b = model.denoise(&x, NoiseParams::gaussian(0.2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(digest, model.group_digest(Group::Backbone));
}

#[test]
fn conditioning_batch_must_match() {
    let model = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], 12)).unwrap();
    let x = batch(2, [3, 16, 16], 3);
    assert!(model.forward(&x, &Tensor32::zeros(&[3, 2])).is_err());
    assert!(model.forward(&x, &Tensor32::zeros(&[2, 3])).is_err());
    assert!(model.forward(&batch(2, [3, 8, 8], 3), &Tensor32::zeros(&[2, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_equals_input_shape(
        depth in 1usize..4, base in 1usize..5, n in 1usize..3, hm in 1usize..4, wm in 1usize..4, seed in any::<u64>(),
    ) {
        let m = 1usize << (depth - 1);
        let shape = [3, hm * m * 2, wm * m * 2];
        let model = FilmUnet32::build(ModelConfig::new(shape, depth, base, vec![4], seed)).unwrap();
        let x = batch(n, shape, seed);
        let y = model.denoise(&x, NoiseParams::gaussian(0.1)).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.all_finite());
    }
}
