//! Learnable tensors of the model and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "MRSSMCKP"
//! u32       container version (1)
//! u64       manifest length in bytes
//! ...       UTF-8 JSON manifest: {"version", "config", "tensors": [{name, shape, offset, len}]}
//! ...       payload: f32 values; `offset` is the byte offset into the payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::config::{Fusion, ModalityKind, ModelConfig};

const MAGIC: &[u8; 8] = b"MRSSMCKP";
const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform Glorot with the given fan-in/fan-out.
    Glorot(usize, usize),
    Zero,
}

/// Names, shapes and initializers of every parameter for `config`.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{prefix}.w"), vec![fan_in, fan_out], Init::Glorot(fan_in, fan_out)));
        out.push((format!("{prefix}.b"), vec![fan_out], Init::Zero));
    };
    let conv = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cin: usize, cout: usize| {
        out.push((format!("{prefix}.w"), vec![cout, cin, 4, 4], Init::Glorot(cin * 16, cout * 16)));
        out.push((format!("{prefix}.b"), vec![cout], Init::Zero));
    };
    let deconv = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cin: usize, cout: usize| {
        out.push((format!("{prefix}.w"), vec![cin, cout, 4, 4], Init::Glorot(cin * 16, cout * 16)));
        out.push((format!("{prefix}.b"), vec![cout], Init::Zero));
    };
    let (dh, ds, de, dhid) = (config.deter_dim, config.stoch_dim, config.embed_dim, config.hidden_dim);
    let [c1, c2, c3] = config.conv_channels;

    linear(&mut out, "transition.embed", ds + config.action_dim, de);
    for gate in ["z", "r", "n"] {
        out.push((format!("transition.gru.wx_{gate}"), vec![de, dh], Init::Glorot(de, dh)));
        out.push((format!("transition.gru.wh_{gate}"), vec![dh, dh], Init::Glorot(dh, dh)));
        out.push((format!("transition.gru.b_{gate}"), vec![dh], Init::Zero));
    }
    linear(&mut out, "prior.l1", dh, dhid);
    linear(&mut out, "prior.l2", dhid, 2 * ds);

    // Per-modality observation networks; the PoE model emits Gaussian
    // experts, the concat baseline emits embeddings.
    let (enc_prefix, enc_out) = match config.fusion {
        Fusion::Poe => ("enc", 2 * ds),
        Fusion::Concat => ("concat.emb", de),
    };
    for m in &config.modalities {
        let p = format!("{enc_prefix}.{}", m.name);
        match m.kind {
            ModalityKind::Dense => {
                linear(&mut out, &format!("{p}.l1"), m.shape[0], dhid);
                linear(&mut out, &format!("{p}.l2"), dhid, dhid);
                linear(&mut out, &format!("{p}.out"), dhid, enc_out);
            }
            ModalityKind::Image => {
                conv(&mut out, &format!("{p}.conv1"), m.shape[0], c1);
                conv(&mut out, &format!("{p}.conv2"), c1, c2);
                conv(&mut out, &format!("{p}.conv3"), c2, c3);
                let flat = c3 * (m.shape[1] / 8) * (m.shape[2] / 8);
                linear(&mut out, &format!("{p}.out"), flat, enc_out);
            }
        }
    }
    if config.fusion == Fusion::Concat {
        let n = config.modalities.len();
        linear(&mut out, "concat.head.l1", n * de + dh, dhid);
        linear(&mut out, "concat.head.l2", dhid, 2 * ds);
    }
    for m in &config.modalities {
        let p = format!("dec.{}", m.name);
        match m.kind {
            ModalityKind::Dense => {
                linear(&mut out, &format!("{p}.l1"), dh + ds, dhid);
                linear(&mut out, &format!("{p}.l2"), dhid, dhid);
                linear(&mut out, &format!("{p}.out"), dhid, m.shape[0]);
            }
            ModalityKind::Image => {
                let flat = c3 * (m.shape[1] / 8) * (m.shape[2] / 8);
                linear(&mut out, &format!("{p}.fc"), dh + ds, flat);
                deconv(&mut out, &format!("{p}.deconv1"), c3, c2);
                deconv(&mut out, &format!("{p}.deconv2"), c2, c1);
                deconv(&mut out, &format!("{p}.deconv3"), c1, m.shape[0]);
            }
        }
    }
    out
}

/// All learnable tensors, keyed by dotted name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(&shape),
                    Init::Glorot(fi, fo) => {
                        let limit = (6.0 / (fi + fo) as f64).sqrt();
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| S::from_f64_lossy(rng.gen_range(-limit..limit))).collect();
                        Tensor::new(shape, data).expect("layout shapes are consistent")
                    }
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    /// Same layout as `init`, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor<S>) {
        self.tensors.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Name and position of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors.iter().find(|(_, t)| !t.is_finite()).map(|(k, _)| k.clone())
    }

    /// Checks that names and shapes match what `config` requires.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let want = layout(config);
        if want.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in want {
            match self.tensors.get(&name) {
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::with_capacity(self.numel() * 4);
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                len: t.numel(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { version: CONTAINER_VERSION, config: config.clone(), tensors: entries };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut bytes = Vec::with_capacity(20 + json.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, Self)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::format(path, msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let start = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..start])
            .map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[start..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let end = e.offset.checked_add(e.len * 4).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(bad(&format!("tensor `{}` extends past the payload", e.name)));
            };
            let data: Vec<f32> = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(&format!("tensor `{}`: {err}", e.name)))?;
            tensors.insert(e.name, t);
        }
        let params = Self { tensors };
        manifest.config.validate()?;
        params.check_layout(&manifest.config)?;
        Ok((manifest.config, params))
    }
}
