//! Database encoding: hard residual cascade with Euclidean argmin, packed
//! multi-length codes and cached codeword cross terms.
//!
//! The encoded database file is the packed-code file followed by zero
//! padding to a 4-byte boundary, N·L little-endian `f32` cross terms (point
//! major) and the 32-byte SHA-256 digest of the model that produced it.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::code::{pack_code, read_field, AssignmentIndex, CodeArray, PackedCode};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sq_dist, Matrix};
use crate::model::ProgressiveModel;
use crate::quantizer::{hard_assign, Metric};

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDatabase {
    pub codes: CodeArray,
    /// `N × L`: entry `[i][l-1]` is `Σ_{a≠b≤l} <c^a(e_a), c^b(e_b)>` for point `i`.
    pub cross_terms: Vec<f64>,
    pub model_digest: [u8; 32],
}

impl EncodedDatabase {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.codes.layers()
    }

    pub fn bits(&self) -> u32 {
        self.codes.bits()
    }

    /// Cross term of point `i` for prefix length `l` (1-based).
    #[inline]
    pub fn cross_term(&self, i: usize, l: usize) -> f64 {
        self.cross_terms[i * self.layers() + l - 1]
    }

    /// Fails unless `model` is the one this database was encoded with.
    pub fn verify_model(&self, model: &ProgressiveModel) -> Result<()> {
        if model.digest()? != self.model_digest {
            return Err(Error::Corruption(
                "encoded database was produced by a different model".into(),
            ));
        }
        if model.layers() != self.layers() || model.bits() != self.bits() {
            return Err(Error::Corruption("code shape does not match model".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.codes.write_to(&mut w)?;
        let body = 16 + self.codes.as_bytes().len();
        w.write_all(&[0u8; 3][..(4 - body % 4) % 4])?;
        crate::model::write_f32s(&mut w, &self.cross_terms)?;
        w.write_all(&self.model_digest)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let codes = CodeArray::read_from(&mut r, path)?;
        let body = 16 + codes.as_bytes().len();
        let mut pad = [0u8; 3];
        let pad = &mut pad[..(4 - body % 4) % 4];
        r.read_exact(pad)
            .map_err(|_| Error::format(path, "truncated before cross terms"))?;
        let n = codes.len() * codes.layers();
        let cross_terms = crate::model::read_f32s(&mut r, n)
            .map_err(|_| Error::format(path, format!("truncated: expected {n} cross terms")))?;
        let mut model_digest = [0u8; 32];
        r.read_exact(&mut model_digest)
            .map_err(|_| Error::format(path, "truncated model digest"))?;
        Ok(EncodedDatabase {
            codes,
            cross_terms,
            model_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, path)
    }
}

/// Encodes a vector that already lives in the quantizer input space.
/// Returns the packed code and the cross term for every prefix length.
pub fn encode_embedded(v: &[f64], model: &ProgressiveModel) -> Result<(PackedCode, Vec<f64>)> {
    Error::check_dim(model.qblock_dim(), v.len())?;
    let mut residual = v.to_vec();
    let mut indices = Vec::with_capacity(model.layers());
    let mut cross = Vec::with_capacity(model.layers());
    let mut partial = vec![0.0; v.len()];
    let mut acc = 0.0;
    for cb in &model.codebooks {
        let idx = hard_assign(&residual, cb, Metric::Euclidean);
        let c = cb.word(idx.get());
        acc += 2.0 * dot(c, &partial);
        cross.push(acc);
        axpy(&mut partial, 1.0, c);
        axpy(&mut residual, -1.0, c);
        indices.push(idx);
    }
    Ok((pack_code(&indices, model.bits())?, cross))
}

/// Encodes a raw feature vector, projecting it first when the model has a
/// head.
pub fn encode_point(x: &[f64], model: &ProgressiveModel) -> Result<(PackedCode, Vec<f64>)> {
    encode_embedded(&model.embed(x)?, model)
}

/// Sum of the first `l` selected codewords.
pub fn decode(code: &PackedCode, model: &ProgressiveModel, l: usize) -> Result<Vec<f64>> {
    decode_raw(code.as_bytes(), code.layers(), code.bits_per_layer(), model, l)
}

pub(crate) fn decode_raw(
    bytes: &[u8],
    layers: usize,
    bits: u32,
    model: &ProgressiveModel,
    l: usize,
) -> Result<Vec<f64>> {
    if l == 0 || l > layers || l > model.layers() {
        return Err(Error::Range(format!(
            "prefix length {l} outside 1..={}",
            layers.min(model.layers())
        )));
    }
    if bits != model.bits() {
        return Err(Error::Corruption(format!(
            "code uses {bits} bits per layer, model has {}",
            model.bits()
        )));
    }
    let mut out = vec![0.0; model.qblock_dim()];
    for (layer, cb) in model.codebooks.iter().take(l).enumerate() {
        let k = read_field(bytes, layer, bits) as usize;
        if k >= cb.len() {
            return Err(Error::Corruption(format!(
                "index {k} outside codebook {layer} of size {}",
                cb.len()
            )));
        }
        axpy(&mut out, 1.0, cb.word(k));
    }
    Ok(out)
}

/// Per-layer indices of an encoded point.
pub fn indices_of(db: &EncodedDatabase, i: usize) -> Vec<AssignmentIndex> {
    let raw = db.codes.raw(i);
    (0..db.layers())
        .map(|l| AssignmentIndex(read_field(raw, l, db.bits())))
        .collect()
}

/// Encodes every row of `features` (raw features). Rows are processed in
/// parallel but results keep input order; `progress` sees `(done, total)`.
pub fn encode_database(
    features: &Matrix,
    model: &ProgressiveModel,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<EncodedDatabase> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Empty("database has no rows".into()));
    }
    let mut codes = CodeArray::new(model.layers(), model.bits())?;
    let mut cross_terms = Vec::with_capacity(n * model.layers());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let encoded: Vec<Result<(PackedCode, Vec<f64>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                encode_point(features.row(i), model).map_err(|e| Error::AtPoint {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect();
        for item in encoded {
            let (code, cross) = item?;
            codes.push(&code)?;
            cross_terms.extend_from_slice(&cross);
        }
        if let Some(cb) = progress {
            cb(end, n);
        }
    }
    Ok(EncodedDatabase {
        codes,
        cross_terms,
        model_digest: model.digest()?,
    })
}

/// Mean `|v - decode(code, l)|²` over the database for prefix length `l`,
/// with `v` the embedded rows of `features`.
pub fn mean_reconstruction_error(
    features: &Matrix,
    db: &EncodedDatabase,
    model: &ProgressiveModel,
    l: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..db.len() {
        let v = model.embed(features.row(i))?;
        let rec = decode_raw(db.codes.raw(i), db.layers(), db.bits(), model, l)?;
        total += sq_dist(&v, &rec);
    }
    Ok(total / db.len().max(1) as f64)
}
