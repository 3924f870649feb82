//! The trained model: codebook stack, optional projection head and label
//! embeddings, and the hyperparameters it was trained with.
//!
//! File layout (little-endian): magic `PQM1`, `u32` version, `u32` L, K, D,
//! E, C, flags, `u32` metadata length followed by JSON metadata
//! (hyperparameters and training history), then `f32` payloads: L·K·E
//! codewords; when a head is present a `u32` tap id, D·E projection,
//! tap·C classifier and C bias values; when label embeddings are present a
//! `u32` dimension followed by C·dim values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::code::Codebook;
use crate::error::{Error, Result};
use crate::quantizer::{CascadeConfig, DistortionWeights};
use crate::supervised::{self, ClassifierTap, ProjectionHead, SemanticLabelSet};
use crate::trainer::Hyperparameters;

pub const MODEL_MAGIC: &[u8; 4] = b"PQM1";
pub const MODEL_VERSION: u32 = 1;

const FLAG_HEAD: u32 = 1;
const FLAG_SEM: u32 = 2;

/// Per-epoch loss curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub total: Vec<f64>,
    pub margin: Vec<f64>,
    pub classification: Vec<f64>,
    pub distortion: Vec<f64>,
    /// Mean total loss on the held-out slice, index 0 is before training.
    pub holdout_total: Vec<f64>,
    /// Mean full-length hard distortion on the training set, index 0 is
    /// before training.
    pub hard_distortion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveModel {
    /// Dimension of raw input features.
    pub input_dim: usize,
    pub codebooks: Vec<Codebook>,
    pub head: Option<ProjectionHead>,
    pub sem: Option<SemanticLabelSet>,
    pub hyper: Hyperparameters,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    hyper: Hyperparameters,
    history: TrainingHistory,
}

impl ProgressiveModel {
    /// A headless model over raw features, e.g. from a baseline stack.
    pub fn from_codebooks(codebooks: Vec<Codebook>) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| Error::Empty("model needs at least one codebook".into()))?;
        let (dim, k) = (first.dim(), first.len());
        for cb in &codebooks {
            Error::check_dim(dim, cb.dim())?;
            if cb.len() != k {
                return Err(Error::Config("codebooks differ in size".into()));
            }
        }
        let hyper = Hyperparameters {
            layers: codebooks.len(),
            codebook_size: k,
            embed_dim: dim,
            supervised: false,
            ..Hyperparameters::default()
        };
        Ok(ProgressiveModel {
            input_dim: dim,
            codebooks,
            head: None,
            sem: None,
            hyper,
            history: TrainingHistory::default(),
        })
    }

    pub fn layers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].len()
    }

    /// Bits per layer, `log2 K`.
    pub fn bits(&self) -> u32 {
        self.codebooks[0].bits()
    }

    /// Dimension of the quantizer input.
    pub fn qblock_dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    /// Maps a raw feature vector to the quantizer input space.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.head {
            Some(head) => supervised::project(x, head),
            None => {
                Error::check_dim(self.qblock_dim(), x.len())?;
                Ok(x.to_vec())
            }
        }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            gamma: self.hyper.gamma,
            soft_metric: self.hyper.soft_metric,
            hard_metric: self.hyper.hard_metric,
        }
    }

    pub fn distortion_weights(&self) -> DistortionWeights {
        DistortionWeights {
            layer_weights: self.hyper.layer_weights(self.layers()),
            mu: self.hyper.mu,
            nu: self.hyper.nu,
        }
    }

    /// The same model restricted to its first `layers` codebooks.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.layers() {
            return Err(Error::Range(format!(
                "prefix length {layers} outside 1..={}",
                self.layers()
            )));
        }
        let mut m = self.clone();
        m.codebooks.truncate(layers);
        m.hyper.layers = layers;
        if let Some(w) = &mut m.hyper.layer_weights {
            w.truncate(layers);
        }
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.codebooks.iter().all(|c| crate::linalg::all_finite(c.as_flat()))
            && self.head.as_ref().is_none_or(ProjectionHead::is_finite)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// SHA-256 of the serialized model.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let classes = self.head.as_ref().map_or(0, |h| h.classes);
        let flags = if self.head.is_some() { FLAG_HEAD } else { 0 } | if self.sem.is_some() { FLAG_SEM } else { 0 };
        let meta = serde_json::to_vec(&Meta {
            hyper: self.hyper.clone(),
            history: self.history.clone(),
        })?;
        w.write_all(MODEL_MAGIC)?;
        for v in [
            MODEL_VERSION,
            self.layers() as u32,
            self.codebook_size() as u32,
            self.input_dim as u32,
            self.qblock_dim() as u32,
            classes as u32,
            flags,
            meta.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&meta)?;
        for cb in &self.codebooks {
            write_f32s(&mut w, cb.as_flat())?;
        }
        if let Some(h) = &self.head {
            let tap: u32 = match h.tap {
                ClassifierTap::Semantic => 0,
                ClassifierTap::Features => 1,
            };
            w.write_all(&tap.to_le_bytes())?;
            write_f32s(&mut w, &h.w_embed)?;
            write_f32s(&mut w, &h.w_cls)?;
            write_f32s(&mut w, &h.bias)?;
        }
        if let Some(s) = &self.sem {
            w.write_all(&(s.dim() as u32).to_le_bytes())?;
            write_f32s(&mut w, s.raw())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated model header"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("bad magic, expected PQM1"));
        }
        let mut next = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated model header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = next()?;
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported model version {version}")));
        }
        let (layers, k, d, e, classes, flags, meta_len) = (
            next()? as usize,
            next()? as usize,
            next()? as usize,
            next()? as usize,
            next()? as usize,
            next()?,
            next()? as usize,
        );
        if layers == 0 || k == 0 || d == 0 || e == 0 {
            return Err(bad("zero-sized model dimension"));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(&meta).map_err(|e| bad(&format!("metadata: {e}")))?;
        let mut codebooks = Vec::with_capacity(layers);
        for l in 0..layers {
            let words = read_f32s(&mut r, k * e).map_err(|_| bad("truncated codebooks"))?;
            codebooks.push(Codebook::new(l, e, words).map_err(|err| bad(&err.to_string()))?);
        }
        let head = if flags & FLAG_HEAD != 0 {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated head"))?;
            let tap = match u32::from_le_bytes(b) {
                0 => ClassifierTap::Semantic,
                1 => ClassifierTap::Features,
                t => return Err(bad(&format!("unknown classifier tap {t}"))),
            };
            let mut h = ProjectionHead::zeros(d, e, classes, tap);
            h.w_embed = read_f32s(&mut r, d * e).map_err(|_| bad("truncated head"))?;
            h.w_cls = read_f32s(&mut r, h.tap_dim() * classes).map_err(|_| bad("truncated head"))?;
            h.bias = read_f32s(&mut r, classes).map_err(|_| bad("truncated head"))?;
            Some(h)
        } else {
            if d != e {
                return Err(bad("headless model with input dim != quantizer dim"));
            }
            None
        };
        let sem = if flags & FLAG_SEM != 0 {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated label embeddings"))?;
            let dim = u32::from_le_bytes(b) as usize;
            let z = read_f32s(&mut r, classes * dim).map_err(|_| bad("truncated label embeddings"))?;
            Some(SemanticLabelSet::new(classes, dim, z).map_err(|err| bad(&err.to_string()))?)
        } else {
            None
        };
        Ok(ProgressiveModel {
            input_dim: d,
            codebooks,
            head,
            sem,
            hyper: meta.hyper,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..], path)
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}
