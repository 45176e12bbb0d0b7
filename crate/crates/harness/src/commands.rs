//! The four experiment commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use film_denoise_core::data::{self, Dataset, Split};
use film_denoise_core::metrics::{mean_metrics, psnr, ssim, MetricRecord};
use film_denoise_core::model::{self, FilmUnet, TrainingMeta};
use film_denoise_core::noise::{corrupt, residual_noise_std, stream_rng, NoiseKind, NoiseParams};
use film_denoise_core::optim::AdamConfig;
use film_denoise_core::param::GroupSet;
use film_denoise_core::patches::extract_patches;
use film_denoise_core::train::{self, TrainConfig, TrainReport};
use film_denoise_core::{Tensor32, FilmUnet32};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Command, DataFormat, ExperimentConfig, TrainMode};
use crate::report::{loss_rows, write_atomic, write_csv, MetricRow};
use crate::svg::{Plot, Series};

/// Stream for compare-command corruption, apart from training and validation.
const STREAM_COMPARE: u64 = 3 << 32;

#[derive(Serialize)]
struct RunInfo<'a> {
    command: String,
    config_hash: &'a str,
    seed: u64,
    checkpoint: Option<&'a Path>,
}

/// Writes the resolved config and a run manifest into the output directory.
fn write_provenance(cfg: &ExperimentConfig, command: Command, checkpoint: Option<&Path>) -> Result<String> {
    let hash = cfg.hash();
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_atomic(&cfg.out_dir.join("resolved_config.toml"), cfg.to_toml().as_bytes())?;
    let info = RunInfo { command: command.to_string(), config_hash: &hash, seed: cfg.seed, checkpoint };
    let mut json = serde_json::to_vec_pretty(&info)?;
    json.push(b'\n');
    write_atomic(&cfg.out_dir.join("run.json"), &json)?;
    Ok(hash)
}

/// Training and validation sets named by the data section.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let d = cfg.data.as_ref().context("data section missing")?;
    let patch = cfg.model_config().map_err(anyhow::Error::msg)?.input_shape[1];
    let (train, val) = match d.format {
        DataFormat::Cifar10 => {
            let s = data::load_cifar10::<f32>(&d.dir)?;
            (s.train, s.val)
        }
        DataFormat::Png => {
            let stride = d.stride.unwrap_or(patch);
            let train = data::load_png_corpus::<f32>(&d.dir, patch, stride, Split::Train)?.dataset;
            let val = match &d.val_dir {
                Some(v) => data::load_png_corpus::<f32>(v, patch, stride, Split::Val)?.dataset,
                None => Dataset::new(Vec::new(), train.source, Split::Val)?,
            };
            (train, val)
        }
    };
    let train = match d.train_images {
        Some(n) => train.truncated(n),
        None => train,
    };
    let val = match d.val_images {
        Some(n) => val.truncated(n),
        None => val,
    };
    ensure!(!train.is_empty(), "data.dir `{}` yielded no training images", d.dir.display());
    Ok((train, val))
}

pub fn load_model(path: &Path) -> Result<FilmUnet32> {
    let ck = model::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model)
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub reports: Vec<TrainReport>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    cfg.validate(Command::Train)?;
    let hash = write_provenance(cfg, Command::Train, None)?;
    let t = cfg.train.as_ref().expect("validated");
    let (train_set, val_set) = load_data(cfg)?;
    info!("training on {} images ({} held out)", train_set.len(), val_set.len());
    let mut model = FilmUnet::<f32>::build(cfg.model_config().map_err(anyhow::Error::msg)?)?;

    let mut tc = TrainConfig::new(t.noise.distribution()?, t.epochs, cfg.seed);
    tc.batch_size = t.batch_size;
    tc.adam = AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps };
    tc.trainable_groups = t.trainable.iter().copied().collect::<GroupSet>();
    tc.checkpoint_every = t.checkpoint_every;
    tc.checkpoint_dir = (t.checkpoint_every > 0).then(|| cfg.out_dir.join("checkpoints"));

    let meta = |epoch, noise| TrainingMeta { epoch, seed: cfg.seed, noise: Some(noise), config_hash: Some(hash.clone()) };
    let checkpoint = cfg.out_dir.join("model.fuw");
    let reports = match t.mode {
        TrainMode::Conditional => {
            let r = train::train(&mut model, &train_set, None, &tc)?;
            model::save(&model, &checkpoint, Some(&meta(t.epochs, tc.noise)), None)?;
            vec![r]
        }
        TrainMode::TwoPhase => {
            let p2 = t.phase2.as_ref().expect("validated");
            let mut phase1 = tc.clone();
            phase1.trainable_groups = [film_denoise_core::param::Group::Backbone].into();
            let mut phase2 = tc.clone();
            phase2.noise = p2.noise.distribution()?;
            phase2.epochs = p2.epochs;
            phase2.trainable_groups = [film_denoise_core::param::Group::Film].into();
            phase2.seed = cfg.seed.wrapping_add(1);
            // Phase 1 alone, then reused as the start of phase 2.
            let mut p1_cfg = phase1.clone();
            p1_cfg.pin_conditioning = Some(NoiseParams::default());
            let r1 = train::train(&mut model, &train_set, None, &p1_cfg)?;
            model::save(&model, cfg.out_dir.join("phase1.fuw"), Some(&meta(t.epochs, phase1.noise)), None)?;
            let before = model.group_digest(film_denoise_core::param::Group::Backbone);
            let r2 = train::train(&mut model, &train_set, None, &phase2)?;
            ensure!(
                model.group_digest(film_denoise_core::param::Group::Backbone) == before,
                "backbone changed during phase 2"
            );
            model::save(&model, &checkpoint, Some(&meta(t.epochs + p2.epochs, phase2.noise)), None)?;
            vec![r1, r2]
        }
    };
    let rows: Vec<_> = reports
        .iter()
        .enumerate()
        .flat_map(|(i, r)| loss_rows(&hash, cfg.seed, i as u32 + 1, r))
        .collect();
    write_csv(&cfg.out_dir.join("train_loss.csv"), &rows)?;
    Ok(TrainOutputs { checkpoint, reports })
}

fn method_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<MetricRow>> {
    cfg.validate(Command::Sweep)?;
    let hash = write_provenance(cfg, Command::Sweep, Some(checkpoint))?;
    let s = cfg.sweep.as_ref().expect("validated");
    let model = load_model(checkpoint)?;
    let (_, val) = load_data(cfg)?;
    ensure!(!val.is_empty(), "sweep needs validation images (set data.val_dir for png corpora)");
    let shape = model.config().input_shape;
    if val.image_shape() != Some(&shape[..]) {
        bail!("model expects {:?} images but the validation set has {:?}", shape, val.image_shape().unwrap_or(&[]));
    }
    let method = method_name(checkpoint);
    let mut rows = Vec::new();
    let mut baseline = Vec::new();
    for &kind in &s.kinds {
        info!("sweep {}: {}x{} cells on {} images", kind.name(), s.sigma_tr.len(), s.sigma_val.len(), val.len());
        let recs = train::validate(&model, &val, &s.sigma_tr, &s.sigma_val, kind, s.eval_seed)?;
        let base = train::noisy_baseline(&val, &s.sigma_val, kind, s.eval_seed)?;
        baseline.extend(base.iter().map(|r| MetricRow::new(&hash, cfg.seed, "noisy", r)));
        for (metric, label) in [(0usize, "PSNR (dB)"), (1, "SSIM")] {
            let series = s
                .sigma_tr
                .iter()
                .map(|&tr| Series {
                    label: format!("sigma_tr={tr}"),
                    points: recs
                        .iter()
                        .filter(|r| r.sigma_tr == kind.params(tr))
                        .map(|r| (r.sigma_val, if metric == 0 { r.psnr_db } else { r.ssim }))
                        .collect(),
                })
                .collect();
            let plot = Plot {
                title: format!("{label} vs sigma_val, {} noise", kind.name()),
                x_label: "sigma_val".into(),
                y_label: label.into(),
                provenance: format!("config_hash={hash} seed={}", cfg.seed),
                series,
            };
            let name = if metric == 0 { "psnr" } else { "ssim" };
            write_atomic(&cfg.out_dir.join(format!("sweep_{name}_{}.svg", kind.name())), plot.render().as_bytes())?;
        }
        rows.extend(recs.iter().map(|r| MetricRow::new(&hash, cfg.seed, &method, r)));
    }
    write_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
    write_csv(&cfg.out_dir.join("sweep_baseline.csv"), &baseline)?;
    Ok(rows)
}

/// Denoises an image of any size at least one patch large: tiles it, runs
/// each batch of tiles conditioned at `p`, reassembles and clips to `[0, 1]`.
pub fn denoise_image(model: &FilmUnet32, img: &Tensor32, p: NoiseParams, stride: usize, batch: usize) -> Result<Tensor32> {
    let [c, size, _] = model.config().input_shape;
    ensure!(img.shape()[0] == c, "image has {} channels, model expects {c}", img.shape()[0]);
    ensure!(
        img.shape()[1] >= size && img.shape()[2] >= size,
        "image is {}x{}, smaller than the {size}x{size} model patch",
        img.shape()[1],
        img.shape()[2]
    );
    let grid = extract_patches(img, size, stride)?;
    let mut out = Vec::with_capacity(grid.patches.len());
    for chunk in grid.patches.chunks(batch.max(1)) {
        let refs: Vec<&Tensor32> = chunk.iter().collect();
        let den = model.denoise(&Tensor32::stack(&refs)?, p)?;
        for k in 0..chunk.len() {
            out.push(den.batch_item(k)?);
        }
    }
    Ok(grid.reassemble_with(&out)?.clamp(0.0, 1.0))
}

pub fn cmd_denoise(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate(Command::Denoise)?;
    write_provenance(cfg, Command::Denoise, Some(checkpoint))?;
    let d = cfg.denoise.as_ref().expect("validated");
    let model = load_model(checkpoint)?;
    let img = data::read_png_rgb::<f32>(&d.input)?;
    let stride = d.stride.unwrap_or(model.config().input_shape[1]);
    let out = denoise_image(&model, &img, NoiseParams::new(d.a, d.sigma)?, stride, d.batch)?;
    let path = if d.output.is_absolute() { d.output.clone() } else { cfg.out_dir.join(&d.output) };
    let tmp = path.with_extension("png.tmp");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    data::write_png_rgb(&tmp, &out)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Directory name holding one corruption level, e.g. `gaussian_0.1`.
pub fn level_dir(kind: NoiseKind, level: f64) -> String {
    format!("{}_{level}", kind.name())
}

fn quantize(img: &Tensor32) -> Tensor32 {
    img.map(|v| data::unit_to_u8(v) as f32 / 255.0)
}

fn digest(images: &[Tensor32]) -> String {
    let mut h = Sha256::new();
    for img in images {
        for &d in img.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn score(kind: NoiseKind, level: f64, cond: NoiseParams, outputs: &[Tensor32], clean: &[Tensor32]) -> Result<MetricRecord> {
    let recs = outputs
        .iter()
        .zip(clean)
        .map(|(y, x)| {
            ensure!(y.shape() == x.shape(), "output shape {:?} does not match clean image {:?}", y.shape(), x.shape());
            Ok(MetricRecord {
                sigma_tr: cond,
                sigma_val: level,
                noise_kind: kind,
                psnr_db: psnr(y, x, 1.0)?,
                ssim: ssim(y, x)?,
                residual_std: residual_noise_std(y, x)?,
                n_images: 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_metrics(&recs)?)
}

fn read_level_dir(dir: &Path, names: &[String], method: &str) -> Result<Vec<Tensor32>> {
    let files = data::png_files(dir).with_context(|| format!("{method}: reading {}", dir.display()))?;
    if files.len() != names.len() {
        bail!("{method}: {} holds {} images, expected {}", dir.display(), files.len(), names.len());
    }
    names
        .iter()
        .map(|n| {
            let p = dir.join(format!("{n}.png"));
            data::read_png_rgb::<f32>(&p).with_context(|| format!("{method}: reading {}", p.display()))
        })
        .collect()
}

pub struct CompareOutputs {
    pub rows: Vec<MetricRow>,
    pub baseline: Vec<MetricRow>,
    /// SHA-256 of the corrupted inputs, per level directory.
    pub input_digests: BTreeMap<String, String>,
}

/// Scores every checkpoint and external output directory on the same
/// corrupted inputs. The inputs are 8-bit quantised (as if read from PNG) and
/// written to `<out>/noisy/<kind>_<level>/` for external methods to consume.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareOutputs> {
    cfg.validate(Command::Compare)?;
    let c = cfg.compare.as_ref().expect("validated");
    let hash = write_provenance(cfg, Command::Compare, c.checkpoints.first().map(PathBuf::as_path))?;

    let (names, clean): (Vec<String>, Vec<Tensor32>) = match &c.images {
        Some(dir) => {
            let files = data::png_files(dir)?;
            ensure!(!files.is_empty(), "compare.images `{}` holds no png files", dir.display());
            let mut names = Vec::new();
            let mut imgs = Vec::new();
            for f in files {
                names.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
                imgs.push(data::read_png_rgb::<f32>(&f)?);
            }
            (names, imgs)
        }
        None => {
            let (_, val) = load_data(cfg)?;
            ensure!(!val.is_empty(), "compare needs evaluation images");
            ((0..val.len()).map(|i| format!("val_{i:05}")).collect(), val.images().iter().map(quantize).collect())
        }
    };

    let models = c.checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let mut method_names: Vec<String> = Vec::new();
    for p in &c.checkpoints {
        let mut name = method_name(p);
        if method_names.contains(&name) {
            name = format!("{name}_{}", method_names.len());
        }
        method_names.push(name);
    }

    let mut out = CompareOutputs { rows: Vec::new(), baseline: Vec::new(), input_digests: BTreeMap::new() };
    for &kind in &c.kinds {
        for &level in &c.levels {
            let sub = level_dir(kind, level);
            let noisy: Vec<Tensor32> = match &c.noisy_dir {
                Some(dir) => read_level_dir(&dir.join(&sub), &names, "noisy inputs")?,
                None => {
                    let mut rng = stream_rng(c.eval_seed, STREAM_COMPARE + kind as u64);
                    let noisy: Vec<Tensor32> = clean.iter().map(|x| quantize(&corrupt(x, kind.params(level), &mut rng))).collect();
                    for (n, img) in names.iter().zip(&noisy) {
                        let p = cfg.out_dir.join("noisy").join(&sub).join(format!("{n}.png"));
                        std::fs::create_dir_all(p.parent().expect("has parent"))?;
                        data::write_png_rgb(&p, img)?;
                    }
                    noisy
                }
            };
            let input_digest = digest(&noisy);
            out.input_digests.insert(sub.clone(), input_digest.clone());
            let base = score(kind, level, NoiseParams::default(), &noisy, &clean)?;
            out.baseline.push(MetricRow::new(&hash, cfg.seed, "noisy", &base));

            for (model, name) in models.iter().zip(&method_names) {
                ensure!(digest(&noisy) == input_digest, "{name}: corrupted inputs changed between methods");
                let stride = c.stride.unwrap_or(model.config().input_shape[1]);
                let cond = kind.params(level);
                let outputs = noisy
                    .iter()
                    .map(|y| denoise_image(model, y, cond, stride, 16))
                    .collect::<Result<Vec<_>>>()?;
                let rec = score(kind, level, cond, &outputs, &clean)?;
                out.rows.push(MetricRow::new(&hash, cfg.seed, name, &rec));
            }
            for ext in &c.external {
                ensure!(digest(&noisy) == input_digest, "{}: corrupted inputs changed between methods", ext.name);
                let outputs = read_level_dir(&ext.dir.join(&sub), &names, &ext.name)?;
                let rec = score(kind, level, kind.params(level), &outputs, &clean)?;
                out.rows.push(MetricRow::new(&hash, cfg.seed, &ext.name, &rec));
            }
        }
    }
    write_csv(&cfg.out_dir.join("compare.csv"), &out.rows)?;
    write_csv(&cfg.out_dir.join("compare_baseline.csv"), &out.baseline)?;
    let mut digests = serde_json::to_vec_pretty(&out.input_digests)?;
    digests.push(b'\n');
    write_atomic(&cfg.out_dir.join("compare_inputs.json"), &digests)?;
    Ok(out)
}
