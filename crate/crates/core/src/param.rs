//! Named, grouped trainable parameters.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// U-Net weights.
    Backbone,
    /// FiLM conditioner weights.
    Film,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Backbone, Group::Film];

    pub fn as_byte(self) -> u8 {
        match self {
            Group::Backbone => 0,
            Group::Film => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Group::Backbone),
            1 => Some(Group::Film),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Backbone => "backbone",
            Group::Film => "film",
        })
    }
}

pub type GroupSet = BTreeSet<Group>;

/// A trainable tensor with a unique hierarchical name.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    group: Group,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, group: Group, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            group,
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Kaiming-uniform initialisation with the given fan-in: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

/// Order-sensitive FNV-1a digest over names and raw value bits.
pub fn digest<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a Parameter<T>>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for p in params {
        eat(p.name.as_bytes());
        for v in p.value.data() {
            eat(&v.as_f64().to_bits().to_le_bytes());
        }
    }
    h
}

pub(crate) fn check_unique_names<T>(params: &[Parameter<T>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{}`", p.name)));
        }
    }
    Ok(())
}
