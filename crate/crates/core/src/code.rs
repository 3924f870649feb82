//! Shared value types: feature vectors, codebooks, assignment indices and
//! packed multi-length binary codes.
//!
//! A packed code stores one `m`-bit field per layer, most significant bit
//! first, layer 0 first. Because fields are laid out back to back, the first
//! `l * m` bits of a code are exactly the code of the first `l` layers.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the packed-code file.
pub const CODE_MAGIC: &[u8; 4] = b"PQC1";

/// Largest supported bits-per-layer.
pub const MAX_BITS: u32 = 32;

/// A dense real feature vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("feature vector has dimension 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite feature entry at {i}")));
        }
        Ok(FeatureVector(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Zero-based codeword index within one codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct AssignmentIndex(pub u32);

impl AssignmentIndex {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for AssignmentIndex {
    fn from(v: usize) -> Self {
        AssignmentIndex(v as u32)
    }
}

/// `K` codewords of dimension `D`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Zero-based position of this codebook in its stack.
    pub layer: usize,
    dim: usize,
    words: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from `K * dim` row-major values. `K` must be a power
    /// of two and all entries finite.
    pub fn new(layer: usize, dim: usize, words: Vec<f64>) -> Result<Self> {
        if dim == 0 || words.is_empty() || !words.len().is_multiple_of(dim) {
            return Err(Error::Length(format!(
                "codebook of {} values is not a whole number of {dim}-dim codewords",
                words.len()
            )));
        }
        let k = words.len() / dim;
        if !k.is_power_of_two() {
            return Err(Error::Config(format!("codebook size {k} is not a power of two")));
        }
        if !words.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite codeword entry".into()));
        }
        Ok(Codebook { layer, dim, words })
    }

    pub fn from_rows(layer: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Length("codewords have differing dimensions".into()));
        }
        Self::new(layer, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log2 K`.
    pub fn bits(&self) -> u32 {
        self.len().trailing_zeros()
    }

    #[inline]
    pub fn word(&self, k: usize) -> &[f64] {
        &self.words[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn word_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.words[k * self.dim..(k + 1) * self.dim]
    }

    pub fn words(&self) -> impl Iterator<Item = &[f64]> {
        self.words.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.words
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.words
    }
}

/// A binary code of `layers` fields of `bits` bits each.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedCode {
    bytes: Vec<u8>,
    layers: usize,
    bits: u32,
}

impl PackedCode {
    pub fn from_bytes(bytes: Vec<u8>, layers: usize, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let need = code_bytes(layers, bits);
        if bytes.len() < need {
            return Err(Error::Length(format!(
                "code holds {} bytes, {layers} layers of {bits} bits need {need}",
                bytes.len()
            )));
        }
        let mut bytes = bytes;
        bytes.truncate(need);
        Ok(PackedCode { bytes, layers, bits })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn bits_per_layer(&self) -> u32 {
        self.bits
    }

    /// Total code length in bits, `layers * bits`.
    pub fn bit_len(&self) -> usize {
        self.layers * self.bits as usize
    }

    pub fn index(&self, layer: usize) -> AssignmentIndex {
        AssignmentIndex(read_field(&self.bytes, layer, self.bits))
    }
}

/// Bytes per record for a code of `layers` fields of `bits` bits.
pub fn code_bytes(layers: usize, bits: u32) -> usize {
    (layers * bits as usize).div_ceil(8)
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Range(format!("bits per layer {bits} outside 1..={MAX_BITS}")));
    }
    Ok(())
}

/// Reads the `bits`-wide field of `layer` from a packed byte string.
#[inline]
pub fn read_field(bytes: &[u8], layer: usize, bits: u32) -> u32 {
    let bit_off = layer * bits as usize;
    let first = bit_off / 8;
    let shift_in = (bit_off % 8) as u32;
    // at most 5 bytes are touched when bits <= 32
    let mut window = 0u64;
    for i in 0..8 {
        window <<= 8;
        if let Some(&b) = bytes.get(first + i) {
            window |= b as u64;
        }
    }
    ((window << shift_in) >> (64 - bits)) as u32
}

fn write_field(bytes: &mut [u8], layer: usize, bits: u32, value: u32) {
    let bit_off = layer * bits as usize;
    for b in 0..bits as usize {
        let bit = (value >> (bits as usize - 1 - b)) & 1;
        if bit == 1 {
            let pos = bit_off + b;
            bytes[pos / 8] |= 0x80 >> (pos % 8);
        }
    }
}

/// Packs per-layer indices into a code, layer 0 in the leading bits. The
/// final byte is zero-padded.
pub fn pack_code(indices: &[AssignmentIndex], bits: u32) -> Result<PackedCode> {
    check_bits(bits)?;
    let limit = 1u64 << bits;
    let mut bytes = vec![0u8; code_bytes(indices.len(), bits)];
    for (layer, idx) in indices.iter().enumerate() {
        if idx.0 as u64 >= limit {
            return Err(Error::Range(format!(
                "index {} at layer {layer} does not fit in {bits} bits",
                idx.0
            )));
        }
        write_field(&mut bytes, layer, bits, idx.0);
    }
    Ok(PackedCode {
        bytes,
        layers: indices.len(),
        bits,
    })
}

/// Recovers the first `layers` indices of `code`.
pub fn unpack_code(code: &PackedCode, layers: usize, bits: u32) -> Result<Vec<AssignmentIndex>> {
    check_bits(bits)?;
    let need = layers * bits as usize;
    if code.bytes.len() * 8 < need {
        return Err(Error::Length(format!(
            "code holds {} bits, {layers} layers of {bits} bits need {need}",
            code.bytes.len() * 8
        )));
    }
    Ok((0..layers)
        .map(|l| AssignmentIndex(read_field(&code.bytes, l, bits)))
        .collect())
}

/// The code of the first `layers` layers: the leading `layers * bits` bits,
/// with the tail of the last byte cleared.
pub fn prefix_code(code: &PackedCode, layers: usize, bits: u32) -> Result<PackedCode> {
    check_bits(bits)?;
    if layers == 0 || layers > code.layers {
        return Err(Error::Range(format!(
            "prefix length {layers} outside 1..={}",
            code.layers
        )));
    }
    let nbits = layers * bits as usize;
    let mut bytes = code.bytes[..nbits.div_ceil(8)].to_vec();
    let rem = nbits % 8;
    if rem != 0 {
        let last = bytes.len() - 1;
        bytes[last] &= 0xFFu8 << (8 - rem);
    }
    Ok(PackedCode { bytes, layers, bits })
}

/// A contiguous array of `n` equal-width packed codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeArray {
    layers: usize,
    bits: u32,
    stride: usize,
    data: Vec<u8>,
}

impl CodeArray {
    pub fn new(layers: usize, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(CodeArray {
            layers,
            bits,
            stride: code_bytes(layers, bits),
            data: Vec::new(),
        })
    }

    pub fn from_codes(layers: usize, bits: u32, codes: &[PackedCode]) -> Result<Self> {
        let mut arr = Self::new(layers, bits)?;
        for c in codes {
            arr.push(c)?;
        }
        Ok(arr)
    }

    pub fn push(&mut self, code: &PackedCode) -> Result<()> {
        if code.layers != self.layers || code.bits != self.bits {
            return Err(Error::Length(format!(
                "code shape ({}, {}) differs from array shape ({}, {})",
                code.layers, code.bits, self.layers, self.bits
            )));
        }
        self.data.extend_from_slice(&code.bytes);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.stride).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn raw(&self, i: usize) -> &[u8] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn get(&self, i: usize) -> PackedCode {
        PackedCode {
            bytes: self.raw(i).to_vec(),
            layers: self.layers,
            bits: self.bits,
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Serializes in the code file layout: magic, little-endian `u32` N, L,
    /// m, then N zero-padded records.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CODE_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.layers as u32).to_le_bytes())?;
        w.write_all(&self.bits.to_le_bytes())?;
        w.write_all(&self.data)
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::format(path, "truncated code header"))?;
        if &header[..4] != CODE_MAGIC {
            return Err(Error::format(path, "bad magic, expected PQC1"));
        }
        let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (n, layers, bits) = (field(0) as usize, field(1) as usize, field(2));
        let mut arr = CodeArray::new(layers, bits).map_err(|e| Error::format(path, e.to_string()))?;
        arr.data = vec![0u8; n * arr.stride];
        r.read_exact(&mut arr.data)
            .map_err(|_| Error::format(path, format!("truncated: expected {n} code records")))?;
        Ok(arr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, path)
    }
}
