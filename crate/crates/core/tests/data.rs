use std::path::Path;

use film_denoise_core::data::{
    load_cifar10, load_cifar10_split, load_png_corpus, parse_cifar_records, read_png_rgb, unit_to_u8, write_cifar_records,
    write_png_rgb, Split, CIFAR_PIXELS, CIFAR_RECORD,
};
use film_denoise_core::noise::stream_rng;
use film_denoise_core::patches::extract_patches;
use film_denoise_core::{Error, Tensor32};
use proptest::prelude::*;
use rand::Rng;

fn write_rgb8(path: &Path, w: u32, h: u32, pixels: &[u8]) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().unwrap();
    writer.write_image_data(pixels).unwrap();
}

fn noise_png(path: &Path, w: usize, h: usize, seed: u64) {
    let mut rng = stream_rng(seed, 0);
    let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
    write_rgb8(path, w as u32, h as u32, &pixels);
}

#[test]
fn cifar_record_scaling_and_label_dropped() {
    let mut bytes = vec![7u8];
    bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
    let imgs = parse_cifar_records::<f32>(&bytes, Path::new("x.bin")).unwrap();
    assert_eq!(imgs.len(), 1);
    assert_eq!(imgs[0].shape(), &[3, 32, 32]);
    assert!(imgs[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn cifar_bad_length_is_a_dataset_error() {
    let bytes = vec![0u8; CIFAR_RECORD + 5];
    assert!(matches!(parse_cifar_records::<f32>(&bytes, Path::new("x.bin")), Err(Error::Dataset { .. })));
}

#[test]
fn cifar_round_trip_keeps_plane_order() {
    let a: Vec<u8> = (0..CIFAR_PIXELS).map(|i| (i / 1024 * 100) as u8).collect();
    let b: Vec<u8> = (0..CIFAR_PIXELS).map(|i| (i % 256) as u8).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    write_cifar_records(&path, &[a.clone(), b.clone()]).unwrap();
    let imgs = parse_cifar_records::<f32>(&std::fs::read(&path).unwrap(), &path).unwrap();
    for (img, src) in imgs.iter().zip([&a, &b]) {
        let back: Vec<u8> = img.data().iter().map(|&v| unit_to_u8(v)).collect();
        assert_eq!(&back, src);
    }
    // Red plane is 0, green 100/255, blue 200/255.
    assert_eq!(imgs[0].data()[1024], 100.0 / 255.0);
}

#[test]
fn cifar_directory_splits() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Vec<u8>> = (0..20).map(|i| vec![i as u8; CIFAR_PIXELS]).collect();
    write_cifar_records(&dir.path().join("data_batch_1.bin"), &imgs[..12]).unwrap();
    write_cifar_records(&dir.path().join("data_batch_2.bin"), &imgs[12..]).unwrap();
    let splits = load_cifar10::<f32>(dir.path()).unwrap();
    assert_eq!((splits.train.len(), splits.val.len()), (18, 2));
    assert_eq!(unit_to_u8(splits.val.images()[0].data()[0]), 18);
    let small = load_cifar10_split::<f32>(dir.path(), 5, 3).unwrap();
    assert_eq!((small.train.len(), small.val.len()), (5, 3));
    assert_eq!(unit_to_u8(small.val.images()[0].data()[0]), 5);
    assert!(load_cifar10_split::<f32>(dir.path(), 15, 10).is_err());
    assert!(load_cifar10::<f32>(&dir.path().join("missing")).is_err());
}

#[test]
fn png_values_scale_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.png");
    write_rgb8(&path, 1, 1, &[0, 128, 255]);
    let img = read_png_rgb::<f32>(&path).unwrap();
    assert_eq!(img.shape(), &[3, 1, 1]);
    assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
}

#[test]
fn png_write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.png");
    let img = Tensor32::from_fn(&[3, 5, 7], |i| (i % 256) as f32 / 255.0);
    write_png_rgb(&path, &img).unwrap();
    assert_eq!(read_png_rgb::<f32>(&path).unwrap(), img);
}

#[test]
fn non_rgb8_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let file = std::fs::File::create(&path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 2);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    enc.write_header().unwrap().write_image_data(&[0u8; 8]).unwrap();
    assert!(matches!(read_png_rgb::<f32>(&path), Err(Error::Dataset { .. })));
}

#[test]
fn png_corpus_tiles_and_skips_small_images() {
    let dir = tempfile::tempdir().unwrap();
    noise_png(&dir.path().join("big.png"), 256, 256, 1);
    noise_png(&dir.path().join("small.png"), 100, 100, 2);
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    let corpus = load_png_corpus::<f32>(dir.path(), 128, 128, Split::Train).unwrap();
    assert_eq!(corpus.dataset.len(), 4);
    assert_eq!(corpus.dataset.image_shape(), Some(&[3, 128, 128][..]));
    assert_eq!(corpus.skipped.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn patches_reassemble_exactly(
        size in prop::sample::select(vec![4usize, 8, 16]), extra_h in 0usize..40, extra_w in 0usize..40,
        stride_frac in 1usize..5, seed in any::<u64>(),
    ) {
        let stride = (size * stride_frac / 4).max(1);
        let (h, w) = (size + extra_h, size + extra_w);
        let mut rng = stream_rng(seed, 0);
        let img = Tensor32::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let grid = extract_patches(&img, size, stride).unwrap();
        prop_assert_eq!(grid.patches.len(), grid.rows * grid.cols);
        prop_assert!(grid.patches.iter().all(|p| p.shape() == [3, size, size]));
        prop_assert_eq!(grid.reassemble().unwrap(), img);
    }
}

#[test]
fn patch_errors() {
    let img = Tensor32::zeros(&[3, 8, 8]);
    assert!(extract_patches(&img, 16, 8).is_err());
    assert!(extract_patches(&img, 4, 0).is_err());
    assert!(extract_patches(&img, 4, 5).is_err());
}
