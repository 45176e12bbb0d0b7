use film_denoise_core::data::{Dataset, Source, Split};
use film_denoise_core::model::{load, ModelConfig};
use film_denoise_core::noise::{stream_rng, NoiseDistribution, NoiseKind, NoiseParams, Range};
use film_denoise_core::param::Group;
use film_denoise_core::synth::scene;
use film_denoise_core::train::{evaluate, noisy_baseline, train, two_phase_train, validate, TrainConfig, ValidationGrid};
use film_denoise_core::{Dataset32, FilmUnet32, Tensor32};

const SHAPE: [usize; 3] = [3, 16, 16];

fn dataset(n: usize, seed: u64, split: Split) -> Dataset32 {
    let mut rng = stream_rng(seed, 0);
    let images = (0..n)
        .map(|_| {
            let bytes = scene(&mut rng, SHAPE[1], SHAPE[2]);
            Tensor32::from_vec(&SHAPE, bytes.iter().map(|&b| b as f32 / 255.0).collect()).unwrap()
        })
        .collect();
    Dataset::new(images, Source::Cifar10Binary, split).unwrap()
}

fn model(seed: u64) -> FilmUnet32 {
    FilmUnet32::build(ModelConfig::new(SHAPE, 2, 8, vec![16, 16], seed)).unwrap()
}

fn conditional(epochs: usize, seed: u64) -> TrainConfig {
    let noise = NoiseDistribution::new(Range::point(0.0), Range::new(0.0, 0.3).unwrap()).unwrap();
    let mut cfg = TrainConfig::new(noise, epochs, seed);
    cfg.batch_size = 8;
    cfg.adam.lr = 3e-3;
    cfg
}

#[test]
fn training_is_deterministic() {
    let data = dataset(32, 1, Split::Train);
    let cfg = conditional(2, 5);
    let mut a = model(3);
    let mut b = model(3);
    let ra = train(&mut a, &data, None, &cfg).unwrap();
    let rb = train(&mut b, &data, None, &cfg).unwrap();
    assert_eq!(ra.losses(), rb.losses());
    assert_eq!(ra.config_hash, rb.config_hash);
    for g in Group::ALL {
        assert_eq!(a.group_digest(g), b.group_digest(g));
    }
    let mut c = model(3);
    let rc = train(&mut c, &data, None, &conditional(2, 6)).unwrap();
    assert_ne!(ra.losses(), rc.losses());
}

#[test]
fn loss_decreases() {
    let data = dataset(64, 2, Split::Train);
    let mut m = model(4);
    let losses = train(&mut m, &data, None, &conditional(5, 7)).unwrap().losses();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = dataset(4, 3, Split::Train);
    let mut m = model(1);
    let mut cfg = conditional(1, 1);
    cfg.batch_size = 0;
    cfg.epochs = 0;
    let err = train(&mut m, &data, None, &cfg).unwrap_err().to_string();
    assert!(err.contains("batch_size") && err.contains("epochs"), "{err}");

    let empty = Dataset::new(Vec::new(), Source::Cifar10Binary, Split::Train).unwrap();
    assert!(train(&mut m, &empty, None, &conditional(1, 1)).is_err());

    let mut wrong = FilmUnet32::build(ModelConfig::new([3, 8, 8], 2, 4, vec![4], 0)).unwrap();
    assert!(train(&mut wrong, &data, None, &conditional(1, 1)).is_err());
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(16, 4, Split::Train);
    let mut m = model(2);
    let mut cfg = conditional(3, 2);
    cfg.checkpoint_every = 2;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let report = train(&mut m, &data, None, &cfg).unwrap();
    assert!(dir.path().join("epoch0002.fuw").exists());
    assert!(!dir.path().join("epoch0003.fuw").exists());
    let ck = load::<f32>(report.final_checkpoint.unwrap()).unwrap();
    let meta = ck.meta.unwrap();
    assert_eq!((meta.epoch, meta.seed), (2, 2));
    assert!(ck.optimizer.is_some());
}

#[test]
fn per_epoch_validation_follows_the_grid() {
    let data = dataset(16, 5, Split::Train);
    let val = dataset(4, 6, Split::Val);
    let mut m = model(5);
    let mut cfg = conditional(2, 3);
    cfg.validation = Some(ValidationGrid {
        sigma_tr: vec![0.1, 0.2],
        sigma_val: vec![0.0, 0.1, 0.3],
        kind: NoiseKind::Gaussian,
        eval_seed: 9,
    });
    let report = train(&mut m, &data, Some(&val), &cfg).unwrap();
    for epoch in &report.epochs {
        assert_eq!(epoch.validation.len(), 6);
    }
}

#[test]
fn validation_records_are_ordered_and_reproducible() {
    let val = dataset(5, 7, Split::Val);
    let m = model(6);
    let tr = [0.05, 0.2];
    let sv = [0.0, 0.1, 0.3];
    let recs = validate(&m, &val, &tr, &sv, NoiseKind::Poisson, 11).unwrap();
    assert_eq!(recs.len(), 6);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.sigma_tr, NoiseParams::poisson(tr[i / 3]));
        assert_eq!(r.sigma_val, sv[i % 3]);
        assert_eq!(r.n_images, 5);
    }
    assert_eq!(recs, validate(&m, &val, &tr, &sv, NoiseKind::Poisson, 11).unwrap());
    let single = evaluate(&m, &val, NoiseKind::Poisson, 0.1, NoiseParams::poisson(0.2), 11).unwrap();
    assert_eq!(single, recs[4]);
    assert!(validate(&m, &val, &[], &sv, NoiseKind::Poisson, 11).is_err());
}

#[test]
fn noisy_baseline_degrades_with_level() {
    let val = dataset(5, 8, Split::Val);
    let recs = noisy_baseline(&val, &[0.0, 0.05, 0.2], NoiseKind::Gaussian, 3).unwrap();
    assert_eq!(recs[0].psnr_db, 100.0);
    assert!(recs[1].psnr_db > recs[2].psnr_db);
}

fn phases(seed: u64) -> (TrainConfig, TrainConfig) {
    let mut p1 = TrainConfig::new(NoiseDistribution::fixed(NoiseParams::gaussian(0.2)), 1, seed);
    p1.trainable_groups = [Group::Backbone].into();
    p1.batch_size = 8;
    let mut p2 = TrainConfig::new(
        NoiseDistribution::new(Range::point(0.0), Range::new(0.0, 0.3).unwrap()).unwrap(),
        1,
        seed + 1,
    );
    p2.trainable_groups = [Group::Film].into();
    p2.batch_size = 8;
    (p1, p2)
}

#[test]
fn two_phase_trains_disjoint_groups() {
    let data = dataset(16, 9, Split::Train);
    let mut m = model(7);
    let (p1, p2) = phases(1);
    let film0 = m.group_digest(Group::Film);
    let backbone0 = m.group_digest(Group::Backbone);
    let mut check = model(7);
    let mut pinned = p1.clone();
    pinned.pin_conditioning = Some(NoiseParams::default());
    train(&mut check, &data, None, &pinned).unwrap();

    two_phase_train(&mut m, &data, None, &p1, &p2).unwrap();
    assert_ne!(m.group_digest(Group::Backbone), backbone0);
    assert_ne!(m.group_digest(Group::Film), film0);
    // Phase 2 leaves the phase-1 backbone untouched.
    assert_eq!(m.group_digest(Group::Backbone), check.group_digest(Group::Backbone));
}

#[test]
fn two_phase_contract_violations() {
    let data = dataset(4, 10, Split::Train);
    let mut m = model(8);
    let (p1, p2) = phases(1);

    let mut ranged = p1.clone();
    ranged.noise = p2.noise;
    assert!(two_phase_train(&mut m, &data, None, &ranged, &p2).is_err());

    let mut fixed = p2.clone();
    fixed.noise = p1.noise;
    assert!(two_phase_train(&mut m, &data, None, &p1, &fixed).is_err());

    let mut overlap = p2.clone();
    overlap.trainable_groups = Group::ALL.into_iter().collect();
    assert!(two_phase_train(&mut m, &data, None, &p1, &overlap).is_err());

    let mut swapped1 = p1.clone();
    swapped1.trainable_groups = [Group::Film].into();
    let mut swapped2 = p2.clone();
    swapped2.trainable_groups = [Group::Backbone].into();
    assert!(two_phase_train(&mut m, &data, None, &swapped1, &swapped2).is_err());
}
