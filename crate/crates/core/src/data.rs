//! Dataset ingestion: CIFAR-10 binary batches and directories of PNGs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::extract_patches;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 record: one label byte and a 3×32×32 image.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_TRAIN: usize = 45_000;
pub const CIFAR_VAL: usize = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Cifar10Binary,
    PngDirectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Clean `[C, H, W]` images with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    images: Vec<Tensor<T>>,
    pub source: Source,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<Tensor<T>>, source: Source, split: Split) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
                return crate::error::shape_err("dataset", first.shape(), bad.shape());
            }
        }
        Ok(Dataset { images, source, split })
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of one image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// First `n` images.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self
    }
}

fn u8_to_unit<T: Scalar>(v: u8) -> T {
    T::from_f64_lossy(v as f64 / 255.0)
}

/// Quantises a unit-range value to 8 bits after clipping.
pub fn unit_to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses concatenated CIFAR-10 records; labels are discarded.
pub fn parse_cifar_records<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<Tensor<T>>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| Tensor::from_vec(&[3, 32, 32], rec[1..].iter().map(|&b| u8_to_unit(b)).collect()))
        .collect()
}

/// Writes CIFAR-10 records (label byte 0) for `[3, 32, 32]` byte images in R, G, B plane order.
pub fn write_cifar_records(path: &Path, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for img in images {
        if img.len() != CIFAR_PIXELS {
            return Err(Error::InvalidArgument(format!(
                "CIFAR image needs {CIFAR_PIXELS} bytes, got {}",
                img.len()
            )));
        }
        out.push(0);
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Batch files read from a CIFAR-10 directory, in order.
pub fn cifar_batch_files(dir: &Path) -> Vec<PathBuf> {
    (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.is_file())
        .collect()
}

/// Training and validation splits from `data_batch_{1..5}.bin`.
pub struct CifarSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

/// Loads the CIFAR-10 training batches: the first 45000 records train and the
/// next 5000 validate. Directories holding fewer than 50000 records are split
/// in the same 9:1 proportion.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<CifarSplits<T>> {
    let images = read_cifar_dir(dir)?;
    let total = images.len();
    let (train, val) = if total >= CIFAR_TRAIN + CIFAR_VAL {
        (CIFAR_TRAIN, CIFAR_VAL)
    } else {
        let train = total * 9 / 10;
        (train, total - train)
    };
    split_images(images, train, val)
}

/// Loads with explicit split sizes: `train` images followed by `val` images.
pub fn load_cifar10_split<T: Scalar>(dir: &Path, train: usize, val: usize) -> Result<CifarSplits<T>> {
    let images = read_cifar_dir(dir)?;
    if images.len() < train + val {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            reason: format!("requested {train}+{val} images but only {} records exist", images.len()),
        });
    }
    split_images(images, train, val)
}

fn read_cifar_dir<T: Scalar>(dir: &Path) -> Result<Vec<Tensor<T>>> {
    let files = cifar_batch_files(dir);
    if files.is_empty() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            reason: "no data_batch_N.bin files found".into(),
        });
    }
    let mut images = Vec::new();
    for f in files {
        let bytes = fs::read(&f)?;
        images.extend(parse_cifar_records(&bytes, &f)?);
    }
    Ok(images)
}

fn split_images<T: Scalar>(mut images: Vec<Tensor<T>>, train: usize, val: usize) -> Result<CifarSplits<T>> {
    images.truncate(train + val);
    let val_images = images.split_off(train);
    Ok(CifarSplits {
        train: Dataset::new(images, Source::Cifar10Binary, Split::Train)?,
        val: Dataset::new(val_images, Source::Cifar10Binary, Split::Val)?,
    })
}

/// Decodes an 8-bit RGB PNG into a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_png_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bad = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(format!("PNG decode: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("only 8-bit PNGs are supported, got {:?}", info.bit_depth)));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(bad(format!("only RGB PNGs are supported, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(format!("PNG decode: {e}")))?;
    let bytes = &buf[..frame.buffer_size()];
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = u8_to_unit(px[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `[3, H, W]` tensor as an 8-bit RGB PNG, clipping to `[0, 1]`.
pub fn write_png_rgb<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(unit_to_u8(img.data()[c * plane + i]));
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Result of ingesting a PNG directory.
pub struct PngCorpus<T> {
    pub dataset: Dataset<T>,
    /// Files that could not be used (unreadable, not 8-bit RGB, or smaller than a patch).
    pub skipped: Vec<PathBuf>,
}

/// Sorted list of `.png` files in `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every PNG in `dir` and cuts it into `patch × patch` tiles.
pub fn load_png_corpus<T: Scalar>(dir: &Path, patch: usize, stride: usize, split: Split) -> Result<PngCorpus<T>> {
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in png_files(dir)? {
        let img = match read_png_rgb::<T>(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(path);
                continue;
            }
        };
        if img.shape()[1] < patch || img.shape()[2] < patch {
            warn!(
                "skipping {}: {}x{} is smaller than the {patch}x{patch} patch",
                path.display(),
                img.shape()[1],
                img.shape()[2]
            );
            skipped.push(path);
            continue;
        }
        images.extend(extract_patches(&img, patch, stride)?.patches);
    }
    Ok(PngCorpus {
        dataset: Dataset::new(images, Source::PngDirectory, split)?,
        skipped,
    })
}
