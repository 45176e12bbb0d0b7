//! FiLM-conditioned U-Net.
//!
//! Every backbone conv block computes `relu(film(conv(x)))`, where the FiLM
//! step is `gamma ⊙ r + beta` with per-sample, per-channel `(gamma, beta)`
//! produced by the conditioner from the noise parameters `(a, σ)`. The
//! conditioner is a shared dense+ReLU trunk followed by one linear head per
//! site emitting `2·C` values `(δ, beta)` with `gamma = 1 + δ`. Heads start
//! at zero so a fresh model applies the identity modulation.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

pub use checkpoint::{load, load_into, save, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockSpec, ModelConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::noise::{stream_rng, NoiseParams};
use crate::ops::Padding;
use crate::param::{check_unique_names, digest, kaiming_uniform, Group, GroupSet, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv: Layer,
    site: Option<usize>,
}

#[derive(Clone, Debug)]
struct Site {
    name: String,
    channels: usize,
    head: Layer,
}

/// Parameter counts per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionCounts {
    pub backbone: usize,
    pub film: usize,
    pub total: usize,
}

/// Split of a model's parameters by group.
pub struct Partition<'a, T> {
    pub backbone: Vec<&'a Parameter<T>>,
    pub film: Vec<&'a Parameter<T>>,
    pub counts: PartitionCounts,
}

/// Tape variables for each model parameter, in parameter order.
pub struct Bound {
    vars: Vec<Var>,
}

/// Per-site modulation `(gamma, beta)`, each `[N, C_site]`.
pub type Modulation = Vec<(Var, Var)>;

#[derive(Clone, Debug)]
pub struct FilmUnet<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    blocks: Vec<Block>,
    head: Layer,
    trunk: Vec<Layer>,
    sites: Vec<Site>,
}

impl<T: Scalar> FilmUnet<T> {
    /// Builds and initialises a model. Conv and dense weights are
    /// Kaiming-uniform (fan-in) from the config seed; biases and conditioner
    /// heads are zero.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let mut params = Vec::new();
        let mut add = |name: String, group: Group, value: Tensor<T>| {
            params.push(Parameter::new(name, group, value));
            params.len() - 1
        };

        let site_index: BTreeMap<&str, usize> = config
            .film_sites
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let specs = config.blocks();
        let mut blocks = Vec::with_capacity(specs.len());
        let mut site_channels = vec![0; config.film_sites.len()];
        for spec in &specs {
            let fan_in = spec.in_channels * 9;
            let weight = add(
                format!("backbone.{}.weight", spec.name),
                Group::Backbone,
                kaiming_uniform(&[spec.out_channels, spec.in_channels, 3, 3], fan_in, &mut rng),
            );
            let bias = add(
                format!("backbone.{}.bias", spec.name),
                Group::Backbone,
                Tensor::zeros(&[spec.out_channels]),
            );
            let site = site_index.get(spec.name.as_str()).copied();
            if let Some(s) = site {
                site_channels[s] = spec.out_channels;
            }
            blocks.push(Block {
                conv: Layer { weight, bias },
                site,
            });
        }
        let (c0, c) = (config.level_channels(0), config.channels());
        let head = Layer {
            weight: add(
                "backbone.head.weight".into(),
                Group::Backbone,
                kaiming_uniform(&[c, c0, 1, 1], c0, &mut rng),
            ),
            bias: add("backbone.head.bias".into(), Group::Backbone, Tensor::zeros(&[c])),
        };

        let mut trunk = Vec::new();
        let mut width = 2;
        for (i, &hidden) in config.conditioner_hidden.iter().enumerate() {
            trunk.push(Layer {
                weight: add(
                    format!("film.trunk{i}.weight"),
                    Group::Film,
                    kaiming_uniform(&[hidden, width], width, &mut rng),
                ),
                bias: add(format!("film.trunk{i}.bias"), Group::Film, Tensor::zeros(&[hidden])),
            });
            width = hidden;
        }
        let mut sites = Vec::new();
        for (name, &channels) in config.film_sites.iter().zip(&site_channels) {
            let head = Layer {
                weight: add(format!("film.{name}.weight"), Group::Film, Tensor::zeros(&[2 * channels, width])),
                bias: add(format!("film.{name}.bias"), Group::Film, Tensor::zeros(&[2 * channels])),
            };
            sites.push(Site {
                name: name.clone(),
                channels,
                head,
            });
        }
        check_unique_names(&params)?;
        Ok(FilmUnet {
            config,
            params,
            blocks,
            head,
            trunk,
            sites,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn site_names(&self) -> Vec<&str> {
        self.sites.iter().map(|s| s.name.as_str()).collect()
    }

    /// Disjoint, exhaustive split by group.
    pub fn partition(&self) -> Partition<'_, T> {
        let (backbone, film): (Vec<_>, Vec<_>) = self.params.iter().partition(|p| p.group() == Group::Backbone);
        let count = |ps: &[&Parameter<T>]| ps.iter().map(|p| p.numel()).sum::<usize>();
        let counts = PartitionCounts {
            backbone: count(&backbone),
            film: count(&film),
            total: self.parameter_count(),
        };
        Partition { backbone, film, counts }
    }

    /// Only parameters in `groups` will receive gradients and optimizer updates.
    pub fn set_trainable(&mut self, groups: &GroupSet) -> Result<()> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("set_trainable needs at least one group".into()));
        }
        for p in &mut self.params {
            p.requires_grad = groups.contains(&p.group());
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
        }
    }

    pub fn trainable_groups(&self) -> GroupSet {
        self.params.iter().filter(|p| p.requires_grad).map(|p| p.group()).collect()
    }

    /// Digest of one group's names and values.
    pub fn group_digest(&self, group: Group) -> u64 {
        digest(self.params.iter().filter(|p| p.group() == group))
    }

    /// Zeroes every conditioner weight and bias, forcing identity modulation.
    pub fn reset_conditioner_to_identity(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.group() == Group::Film) {
            p.value.data_mut().fill(T::zero());
        }
    }

    /// Records every parameter on `tape`; trainable ones require gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.requires_grad))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Copies gradients from `tape` into the trainable parameters.
    pub fn collect_grads(&mut self, tape: &mut Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad = if p.requires_grad { tape.take_grad(v) } else { None };
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn check_conditioning(&self, shape: &[usize], batch: Option<usize>) -> Result<()> {
        let ok = shape.len() == 2 && shape[1] == 2 && batch.is_none_or(|n| shape[0] == n);
        if ok {
            Ok(())
        } else {
            shape_err("conditioning", shape, &[batch.unwrap_or(0), 2])
        }
    }

    /// Conditioner on the tape: `p` is `[N, 2]` with columns `(a, σ)`.
    pub fn condition_on(&self, tape: &mut Tape<T>, bound: &Bound, p: Var) -> Result<Modulation> {
        self.check_conditioning(tape.value(p).shape(), None)?;
        let mut h = p;
        for layer in &self.trunk {
            h = tape.dense(h, bound.vars[layer.weight], bound.vars[layer.bias])?;
            h = tape.relu(h)?;
        }
        let mut out = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            let raw = tape.dense(h, bound.vars[site.head.weight], bound.vars[site.head.bias])?;
            let delta = tape.slice_cols(raw, 0, site.channels)?;
            let gamma = tape.add_scalar(delta, T::one())?;
            let beta = tape.slice_cols(raw, site.channels, site.channels)?;
            out.push((gamma, beta));
        }
        Ok(out)
    }

    /// Backbone on the tape. With `modulation = None` FiLM is skipped.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, modulation: Option<&Modulation>) -> Result<Var> {
        let [c, h, w] = self.config.input_shape;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return shape_err("forward input", &shape, &[shape.first().copied().unwrap_or(0), c, h, w]);
        }
        if let Some(m) = modulation {
            if let Some((g, _)) = m.first() {
                let n = tape.value(*g).shape()[0];
                if n != shape[0] {
                    return shape_err("forward conditioning batch", &shape, &[n, 2]);
                }
            }
        }
        let depth = self.config.depth;
        let mut blocks = self.blocks.iter();
        let mut run = |tape: &mut Tape<T>, input: Var| -> Result<Var> {
            let block = blocks.next().expect("block layout matches config");
            let mut y = tape.conv2d(input, bound.vars[block.conv.weight], bound.vars[block.conv.bias], 1, Padding::Same)?;
            if let (Some(site), Some(m)) = (block.site, modulation) {
                let (gamma, beta) = m[site];
                y = tape.affine_modulate(y, gamma, beta)?;
            }
            tape.relu(y)
        };

        let mut hcur = x;
        let mut skips = Vec::with_capacity(depth);
        for level in 0..depth {
            hcur = run(tape, hcur)?;
            hcur = run(tape, hcur)?;
            if level + 1 < depth {
                skips.push(hcur);
                hcur = tape.maxpool2d(hcur, 2)?;
            }
        }
        for level in (0..depth - 1).rev() {
            let up = tape.upsample_nearest(hcur, 2)?;
            let up = run(tape, up)?;
            let merged = tape.concat_channels(up, skips[level])?;
            hcur = run(tape, merged)?;
            hcur = run(tape, hcur)?;
        }
        tape.conv2d(hcur, bound.vars[self.head.weight], bound.vars[self.head.bias], 1, Padding::Same)
    }

    /// Conditioner outputs for a `[N, 2]` batch of noise parameters.
    pub fn condition(&self, p: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let pv = tape.constant(p.clone())?;
        let m = self.condition_on(&mut tape, &bound, pv)?;
        Ok(m.into_iter()
            .map(|(g, b)| (tape.value(g).clone(), tape.value(b).clone()))
            .collect())
    }

    fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Inference: denoises an `[N, C, H, W]` batch conditioned on `p` (`[N, 2]`).
    /// Draws no random numbers and mutates nothing.
    pub fn forward(&self, noisy: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
        let n = noisy.shape().first().copied().unwrap_or(0);
        self.check_conditioning(p.shape(), Some(n))?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let x = tape.constant(noisy.clone())?;
        let pv = tape.constant(p.clone())?;
        let m = self.condition_on(&mut tape, &bound, pv)?;
        let y = self.forward_on(&mut tape, &bound, x, Some(&m))?;
        Ok(tape.value(y).clone())
    }

    /// Same batch conditioned on one parameter pair for every image.
    pub fn denoise(&self, noisy: &Tensor<T>, p: NoiseParams) -> Result<Tensor<T>> {
        let n = noisy.shape().first().copied().unwrap_or(0);
        self.forward(noisy, &NoiseParams::batch(&vec![p; n]))
    }

    /// Plain U-Net output with every FiLM step removed.
    pub fn forward_backbone(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let x = tape.constant(noisy.clone())?;
        let y = self.forward_on(&mut tape, &bound, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// One forward/backward pass of `mse(forward(noisy, p), clean)`; stores
    /// gradients on the trainable parameters and returns the loss.
    pub fn loss_and_grads(&mut self, noisy: &Tensor<T>, p: &Tensor<T>, clean: &Tensor<T>) -> Result<f64> {
        let n = noisy.shape().first().copied().unwrap_or(0);
        self.check_conditioning(p.shape(), Some(n))?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(noisy.clone())?;
        let pv = tape.constant(p.clone())?;
        let target = tape.constant(clean.clone())?;
        let m = self.condition_on(&mut tape, &bound, pv)?;
        let y = self.forward_on(&mut tape, &bound, x, Some(&m))?;
        let loss = tape.mse_loss(y, target)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss is {value}")));
        }
        if tape.requires_grad(loss) {
            tape.backward(loss)?;
        }
        self.collect_grads(&mut tape, &bound);
        // Trainable parameters unreachable from the loss still get zero grads.
        for p in &mut self.params {
            if p.requires_grad && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        Ok(value)
    }

    /// Copies parameter values from `other`, which must share the layout.
    pub fn copy_values_from(&mut self, other: &FilmUnet<T>) -> Result<()> {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name() != src.name() || dst.value.shape() != src.value.shape() {
                return Err(Error::RecordShape {
                    name: src.name().to_string(),
                    found: src.value.shape().to_vec(),
                    expected: dst.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new([3, 8, 8], 2, 4, vec![6], 3)
    }

    #[test]
    fn block_layout_for_depth_three() {
        let names: Vec<String> = ModelConfig::reference().blocks().into_iter().map(|b| b.name).collect();
        assert_eq!(
            names,
            [
                "enc0.conv1", "enc0.conv2", "enc1.conv1", "enc1.conv2", "enc2.conv1", "enc2.conv2", "dec1.up", "dec1.conv1",
                "dec1.conv2", "dec0.up", "dec0.conv1", "dec0.conv2"
            ]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny();
        cfg.input_shape = [3, 6, 8];
        cfg.depth = 3;
        assert!(FilmUnet::<f32>::build(cfg).is_err());
        let mut cfg = tiny();
        cfg.film_sites = vec!["nope".into()];
        assert!(FilmUnet::<f32>::build(cfg).is_err());
        let mut cfg = tiny();
        cfg.film_sites.clear();
        assert!(FilmUnet::<f32>::build(cfg).is_err());
    }

    #[test]
    fn set_trainable_rejects_empty_set() {
        let mut m = FilmUnet::<f32>::build(tiny()).unwrap();
        assert!(m.set_trainable(&GroupSet::new()).is_err());
        m.set_trainable(&[Group::Film].into()).unwrap();
        assert_eq!(m.trainable_groups(), [Group::Film].into());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = FilmUnet::<f32>::build(tiny()).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 4]);
        assert!(m.denoise(&x, NoiseParams::default()).is_err());
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        assert!(m.forward(&x, &Tensor::zeros(&[3, 2])).is_err());
    }
}
