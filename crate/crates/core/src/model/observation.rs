use std::fmt;

use crate::diffmath::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::config::ModalitySpec;

/// A set of modality indices, stored as a bitmask over the model's modality
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Subset(u32);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    pub fn full(n: usize) -> Self {
        assert!(n <= 32);
        Subset(if n == 32 { u32::MAX } else { (1u32 << n) - 1 })
    }

    pub fn singleton(i: usize) -> Self {
        Subset(1 << i)
    }

    pub fn from_bits(bits: u32) -> Self {
        Subset(bits)
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        Subset(indices.into_iter().fold(0, |acc, i| acc | (1 << i)))
    }

    /// Parses `+`-separated modality names; `all` and `none` are accepted.
    pub fn parse(text: &str, specs: &[ModalitySpec]) -> Result<Self> {
        match text.trim() {
            "all" => return Ok(Self::full(specs.len())),
            "none" | "" => return Ok(Self::EMPTY),
            _ => {}
        }
        let mut s = Self::EMPTY;
        for name in text.split('+').map(str::trim) {
            let i = specs
                .iter()
                .position(|m| m.name == name)
                .ok_or_else(|| Error::UnknownModality(name.into()))?;
            s = s.with(i);
        }
        Ok(s)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn with(self, i: usize) -> Self {
        Subset(self.0 | (1 << i))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: Subset) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }

    /// Every subset of `{0, .., n-1}`, including the empty set.
    pub fn all_subsets(n: usize) -> impl Iterator<Item = Subset> {
        (0..(1u64 << n)).map(|b| Subset(b as u32))
    }

    pub fn label(self, specs: &[ModalitySpec]) -> String {
        if self.is_empty() {
            return "none".into();
        }
        if self == Self::full(specs.len()) {
            return "all".into();
        }
        self.iter().map(|i| specs[i].name.as_str()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Commanded velocities: `[forward m/s, turn rad/s]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Action {
    pub forward: f64,
    pub turn: f64,
}

impl Action {
    pub fn new(forward: f64, turn: f64) -> Self {
        Self { forward, turn }
    }

    pub fn to_vec(self) -> [f64; 2] {
        [self.forward, self.turn]
    }
}

/// Per-timestep observations; a modality is present iff its value is `Some`.
/// Values are in raw sensor units.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<S: Scalar = f32> {
    values: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ObservationSet<S> {
    pub fn new(specs: &[ModalitySpec], values: Vec<Option<Tensor<S>>>) -> Result<Self> {
        if values.len() != specs.len() {
            return Err(Error::Dimension {
                context: "ObservationSet modalities",
                expected: specs.len(),
                actual: values.len(),
            });
        }
        for (spec, v) in specs.iter().zip(&values) {
            if let Some(v) = v {
                if v.shape() != spec.shape.as_slice() {
                    return Err(Error::InvalidArgument(format!(
                        "observation `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        v.shape(),
                        spec.shape
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("observation `{}`", spec.name)));
                }
            }
        }
        Ok(Self { values })
    }

    /// Builds a set from `(name, value)` pairs; unnamed modalities are absent.
    pub fn from_named(specs: &[ModalitySpec], named: Vec<(&str, Tensor<S>)>) -> Result<Self> {
        let mut values = vec![None; specs.len()];
        for (name, v) in named {
            let i = specs.iter().position(|m| m.name == name).ok_or_else(|| Error::UnknownModality(name.into()))?;
            values[i] = Some(v);
        }
        Self::new(specs, values)
    }

    pub fn empty(n: usize) -> Self {
        Self { values: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Tensor<S>> {
        self.values.get(i).and_then(Option::as_ref)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }

    pub fn present(&self) -> Subset {
        Subset::from_indices(self.values.iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| i))
    }

    /// Keeps only modalities in `subset`.
    pub fn masked(&self, subset: Subset) -> Self {
        Self {
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| if subset.contains(i) { v.clone() } else { None })
                .collect(),
        }
    }
}
