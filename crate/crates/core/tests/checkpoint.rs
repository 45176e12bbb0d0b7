use film_denoise_core::model::{load, load_into, save, ModelConfig, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use film_denoise_core::noise::{stream_rng, NoiseParams};
use film_denoise_core::optim::{Adam, AdamConfig};
use film_denoise_core::param::Group;
use film_denoise_core::{Error, FilmUnet32, Tensor32};
use rand::Rng;

fn trained_model(seed: u64) -> (FilmUnet32, Adam<f32>) {
    let mut model = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 4, vec![8], seed)).unwrap();
    let mut rng = stream_rng(seed, 0);
    let clean = Tensor32::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let noisy = clean.map(|v| v + 0.05);
    let cond = NoiseParams::batch(&[NoiseParams::gaussian(0.05); 2]);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..3 {
        model.loss_and_grads(&noisy, &cond, &clean).unwrap();
        adam.step(model.params_mut()).unwrap();
    }
    (model, adam)
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fuw");
    let (model, adam) = trained_model(1);
    let meta = TrainingMeta { epoch: 3, seed: 1, noise: None, config_hash: Some("abc".into()) };
    save(&model, &path, Some(&meta), Some(&adam)).unwrap();
    let ck = load::<f32>(&path).unwrap();
    assert_eq!(ck.version, CHECKPOINT_VERSION);
    assert_eq!(&ck.config, model.config());
    assert_eq!(ck.meta, Some(meta));
    for (a, b) in model.params().iter().zip(ck.model.params()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.group(), b.group());
        assert_eq!(a.value, b.value);
    }
    let restored = ck.optimizer.unwrap();
    assert_eq!(restored.steps(), adam.steps());
    assert_eq!(restored.moments().0, adam.moments().0);
    assert_eq!(restored.moments().1, adam.moments().1);

    let x = Tensor32::from_fn(&[1, 3, 16, 16], |i| (i % 9) as f32 / 9.0);
    let p = NoiseParams::gaussian(0.1);
    assert_eq!(model.denoise(&x, p).unwrap(), ck.model.denoise(&x, p).unwrap());
}

#[test]
fn save_then_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = trained_model(2);
    save(&model, dir.path().join("a.fuw"), None, None).unwrap();
    let ck = load::<f32>(dir.path().join("a.fuw")).unwrap();
    save(&ck.model, dir.path().join("b.fuw"), None, None).unwrap();
    let a = std::fs::read(dir.path().join("a.fuw")).unwrap();
    let b = std::fs::read(dir.path().join("b.fuw")).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..8], &CHECKPOINT_MAGIC);
    assert!(!dir.path().join("a.fuw.tmp").exists());
}

#[test]
fn load_into_matching_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fuw");
    let (model, _) = trained_model(3);
    save(&model, &path, None, None).unwrap();
    let mut other = FilmUnet32::build(model.config().clone()).unwrap();
    other.reset_conditioner_to_identity();
    load_into(&mut other, &path).unwrap();
    for g in Group::ALL {
        assert_eq!(model.group_digest(g), other.group_digest(g));
    }
}

#[test]
fn load_into_mismatched_model_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fuw");
    let (model, _) = trained_model(4);
    save(&model, &path, None, None).unwrap();
    let mut wider = FilmUnet32::build(ModelConfig::new([3, 16, 16], 2, 6, vec![8], 4)).unwrap();
    match load_into(&mut wider, &path) {
        Err(Error::RecordShape { name, .. }) => assert!(!name.is_empty()),
        other => panic!("expected RecordShape, got {:?}", other.err()),
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fuw");
    let (model, _) = trained_model(5);
    save(&model, &path, None, None).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load::<f32>(&path), Err(Error::Format(_))));

    let mut bad_version = good.clone();
    bad_version[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(load::<f32>(&path), Err(Error::Version { found: 99, .. })));

    for cut in [4, 20, good.len() / 2, good.len() - 1] {
        std::fs::write(&path, &good[..cut]).unwrap();
        assert!(load::<f32>(&path).is_err(), "truncated at {cut} loaded");
    }

    let mut trailing = good.clone();
    trailing.push(0);
    std::fs::write(&path, &trailing).unwrap();
    assert!(load::<f32>(&path).is_err());
}
