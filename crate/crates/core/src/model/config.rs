use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a FiLM-conditioned U-Net.
///
/// `depth` counts resolution levels including the bottleneck, so a depth-3
/// network pools twice. Channels double per level starting at
/// `base_channels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
    pub depth: usize,
    pub base_channels: usize,
    /// Conv blocks that receive a FiLM modulation, by block name.
    pub film_sites: Vec<String>,
    /// Hidden widths of the conditioner's shared dense trunk.
    pub conditioner_hidden: Vec<usize>,
    pub seed: u64,
}

/// One 3×3 conv block of the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ModelConfig {
    /// FiLM at every conv block.
    pub fn new(input_shape: [usize; 3], depth: usize, base_channels: usize, conditioner_hidden: Vec<usize>, seed: u64) -> Self {
        let mut cfg = ModelConfig {
            input_shape,
            depth,
            base_channels,
            film_sites: Vec::new(),
            conditioner_hidden,
            seed,
        };
        cfg.film_sites = cfg.blocks().into_iter().map(|b| b.name).collect();
        cfg
    }

    /// Desk-scale reference network for 32×32 RGB images.
    pub fn reference() -> Self {
        Self::new([3, 32, 32], 3, 32, vec![128, 128], 0)
    }

    /// Tiny network for fast smoke runs.
    pub fn smoke() -> Self {
        Self::new([3, 32, 32], 2, 8, vec![16, 16], 0)
    }

    /// Large-image network on 128×128 patches; not trained at desk scale.
    pub fn large() -> Self {
        Self::new([3, 128, 128], 5, 32, vec![256, 256], 0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "smoke" => Some(Self::smoke()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn channels(&self) -> usize {
        self.input_shape[0]
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Conv blocks in evaluation order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, cin, cout| {
            out.push(BlockSpec {
                name,
                in_channels: cin,
                out_channels: cout,
            })
        };
        for level in 0..self.depth {
            let cin = if level == 0 { self.channels() } else { self.level_channels(level - 1) };
            let c = self.level_channels(level);
            push(format!("enc{level}.conv1"), cin, c);
            push(format!("enc{level}.conv2"), c, c);
        }
        for level in (0..self.depth.saturating_sub(1)).rev() {
            let c = self.level_channels(level);
            push(format!("dec{level}.up"), self.level_channels(level + 1), c);
            push(format!("dec{level}.conv1"), 2 * c, c);
            push(format!("dec{level}.conv2"), c, c);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            problems.push(format!("input_shape {:?} has a zero extent", self.input_shape));
        }
        if self.depth == 0 {
            problems.push("depth must be at least 1".to_string());
        } else {
            let m = 1usize << (self.depth - 1);
            if h % m != 0 || w % m != 0 {
                problems.push(format!("input extents {h}x{w} must be divisible by {m} for depth {}", self.depth));
            }
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if self.conditioner_hidden.contains(&0) {
            problems.push("conditioner_hidden widths must be positive".to_string());
        }
        if self.film_sites.is_empty() {
            problems.push("film_sites must name at least one conv block".to_string());
        }
        let blocks = self.blocks();
        for (i, site) in self.film_sites.iter().enumerate() {
            if !blocks.iter().any(|b| &b.name == site) {
                problems.push(format!("film site `{site}` is not a conv block"));
            }
            if self.film_sites[..i].contains(site) {
                problems.push(format!("film site `{site}` listed twice"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}
