use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Dense,
    Image,
}

/// One sensor stream: its layout and reconstruction weight.
///
/// `offset`/`scale` standardize raw values before they reach the networks;
/// decoder means live in the standardized space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// `[d]` for dense, `[channels, height, width]` for images.
    pub shape: Vec<usize>,
    pub lambda: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ModalitySpec {
    pub fn dense(name: &str, dim: usize, lambda: f64) -> Self {
        Self { name: name.into(), kind: ModalityKind::Dense, shape: vec![dim], lambda, offset: 0.0, scale: 1.0 }
    }

    pub fn image(name: &str, channels: usize, height: usize, width: usize, lambda: f64) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Image,
            shape: vec![channels, height, width],
            lambda,
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Prior expert times one Gaussian expert per present modality.
    Poe,
    /// Baseline: concatenated per-modality embeddings plus `h` map to the posterior.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub action_dim: usize,
    pub deter_dim: usize,
    pub stoch_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Channels of the three stride-2 convolutions of image encoders.
    pub conv_channels: [usize; 3],
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: Vec::new(),
            action_dim: 2,
            deter_dim: 64,
            stoch_dim: 16,
            embed_dim: 64,
            hidden_dim: 64,
            conv_channels: [16, 32, 32],
            fusion: Fusion::Poe,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.modalities.len() > 32 {
            return Err(Error::Config("at most 32 modalities are supported".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality name `{}`", m.name)));
            }
            if !(m.lambda >= 0.0) {
                return Err(Error::Config(format!("modality `{}` has negative lambda", m.name)));
            }
            if !(m.scale > 0.0) || !m.offset.is_finite() {
                return Err(Error::Config(format!("modality `{}` has invalid normalization", m.name)));
            }
            match (m.kind, m.shape.as_slice()) {
                (ModalityKind::Dense, [d]) if *d > 0 => {}
                (ModalityKind::Image, [c, h, w]) if *c > 0 && h % 8 == 0 && w % 8 == 0 && *h > 0 && *w > 0 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "modality `{}`: shape {:?} invalid for {:?} (images need H, W divisible by 8)",
                        m.name, m.shape, m.kind
                    )))
                }
            }
        }
        let dims = [self.action_dim, self.deter_dim, self.stoch_dim, self.embed_dim, self.hidden_dim];
        if dims.iter().chain(&self.conv_channels).any(|&d| d == 0) {
            return Err(Error::Config("all network dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.into()))
    }
}
