//! Dataset files, split manifests and the synthetic mixture generator.
//!
//! Vectors use the fvecs/ivecs layout: every record is a little-endian
//! `i32` dimension followed by that many `f32` (or `i32`) values.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::supervised::{LabelAnnotation, SemanticLabelSet};

/// Fills `buf` completely, or reports how many bytes were available.
/// `Ok(0)` means a clean end of file.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn read_records<R: Read>(mut r: R, path: &Path, mut each: impl FnMut(&[u8])) -> Result<(usize, usize)> {
    let mut dim: Option<usize> = None;
    let mut n = 0;
    let mut head = [0u8; 4];
    let mut body = Vec::new();
    loop {
        match read_full(&mut r, &mut head)? {
            0 => break,
            4 => {}
            got => {
                return Err(Error::Length(format!(
                    "{}: record {n} header cut after {got} bytes",
                    path.display()
                )))
            }
        }
        let d = i32::from_le_bytes(head);
        if d <= 0 {
            return Err(Error::format(path, format!("record {n} has dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::format(
                    path,
                    format!("record {n} has dimension {d}, earlier records have {expected}"),
                ));
            }
            Some(_) => {}
        }
        body.resize(4 * d, 0);
        let got = read_full(&mut r, &mut body)?;
        if got != body.len() {
            return Err(Error::Length(format!(
                "{}: record {n} holds {got} of {} value bytes",
                path.display(),
                body.len()
            )));
        }
        each(&body);
        n += 1;
    }
    Ok((n, dim.unwrap_or(0)))
}

pub fn read_fvecs_from<R: Read>(r: R, path: &Path) -> Result<Matrix> {
    let mut data = Vec::new();
    let (n, d) = read_records(r, path, |body| {
        data.extend(
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        );
    })?;
    Ok(Matrix::new(n, d, data))
}

pub fn read_fvecs(path: &Path) -> Result<Matrix> {
    read_fvecs_from(BufReader::new(File::open(path)?), path)
}

/// Values are narrowed to `f32`.
pub fn write_fvecs_to<W: Write>(mut w: W, m: &Matrix) -> Result<()> {
    for row in m.iter_rows() {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(w.flush()?)
}

pub fn write_fvecs(path: &Path, m: &Matrix) -> Result<()> {
    write_fvecs_to(BufWriter::new(File::create(path)?), m)
}

/// Reads integer vectors, e.g. ground-truth neighbour lists.
pub fn read_ivecs(path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut negative = false;
    read_records(BufReader::new(File::open(path)?), path, |body| {
        out.push(
            body.chunks_exact(4)
                .map(|b| {
                    let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                    negative |= v < 0;
                    v.max(0) as usize
                })
                .collect(),
        );
    })?;
    if negative {
        return Err(Error::format(path, "negative id"));
    }
    Ok(out)
}

pub fn write_ivecs(path: &Path, rows: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &v in row {
            let v = i32::try_from(v).map_err(|_| Error::Range(format!("id {v} does not fit in i32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(w.flush()?)
}

/// Label file: per item a `u16` count followed by that many `u16` class ids.
pub fn read_labels(path: &Path) -> Result<Vec<LabelAnnotation>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut head = [0u8; 2];
    loop {
        match read_full(&mut r, &mut head)? {
            0 => break,
            2 => {}
            _ => {
                return Err(Error::Length(format!(
                    "{}: item {} header cut short",
                    path.display(),
                    out.len()
                )))
            }
        }
        let count = u16::from_le_bytes(head) as usize;
        let mut body = vec![0u8; 2 * count];
        if read_full(&mut r, &mut body)? != body.len() {
            return Err(Error::Length(format!(
                "{}: item {} labels cut short",
                path.display(),
                out.len()
            )));
        }
        let ids = body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        let ann = LabelAnnotation::new(ids).map_err(|e| Error::format(path, format!("item {}: {e}", out.len())))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LabelAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        let p = l.positives();
        w.write_all(&(p.len() as u16).to_le_bytes())?;
        for &c in p {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(w.flush()?)
}

/// Label embedding file: `u32` classes, `u32` dimension, then row-major `f32`.
pub fn read_label_embeddings(path: &Path) -> Result<SemanticLabelSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    if read_full(&mut r, &mut head)? != 8 {
        return Err(Error::Length(format!("{}: header cut short", path.display())));
    }
    let c = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
    let e = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let mut body = vec![0u8; 4 * c * e];
    if read_full(&mut r, &mut body)? != body.len() {
        return Err(Error::Length(format!("{}: expected {c}x{e} values", path.display())));
    }
    let z = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    SemanticLabelSet::new(c, e, z).map_err(|err| Error::format(path, err.to_string()))
}

pub fn write_label_embeddings(path: &Path, set: &SemanticLabelSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(set.classes() as u32).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    for &v in set.raw() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(w.flush()?)
}

/// Which rows train the model, which are queries and which are searched.
/// `disjoint` asserts that no query row is also a train or database row;
/// train and database may overlap either way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
    #[serde(default)]
    pub disjoint: bool,
}

impl SplitManifest {
    /// Everything in every role.
    pub fn all(n: usize) -> Self {
        let ids: Vec<usize> = (0..n).collect();
        SplitManifest {
            train: ids.clone(),
            query: ids.clone(),
            database: ids,
            disjoint: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, ids) in [
            ("train", &self.train),
            ("query", &self.query),
            ("database", &self.database),
        ] {
            if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
                return Err(Error::Range(format!(
                    "{name} split holds id {bad} but only {n} rows exist"
                )));
            }
        }
        if self.disjoint {
            let mut used = vec![false; n];
            for &i in self.train.iter().chain(&self.database) {
                used[i] = true;
            }
            if let Some(&i) = self.query.iter().find(|&&i| used[i]) {
                return Err(Error::Config(format!("query id {i} also appears in train or database")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Features plus everything needed to train and evaluate on them.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub features: Matrix,
    pub labels: Option<Vec<LabelAnnotation>>,
    pub label_embeddings: Option<SemanticLabelSet>,
    pub split: SplitManifest,
}

pub const FEATURES_FILE: &str = "features.fvecs";
pub const LABELS_FILE: &str = "labels.bin";
pub const LABEL_EMBEDDINGS_FILE: &str = "label_embeddings.bin";
pub const SPLIT_FILE: &str = "split.json";

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Length(format!("{} label entries for {n} rows", l.len())));
            }
            if let Some(z) = &self.label_embeddings {
                if let Some(bad) = l.iter().find(|a| a.max_class() >= z.classes()) {
                    return Err(Error::Range(format!(
                        "label {} but only {} label embeddings",
                        bad.max_class(),
                        z.classes()
                    )));
                }
            }
        }
        self.split.validate(n)
    }

    pub fn labels_of(&self, ids: &[usize]) -> Option<Vec<LabelAnnotation>> {
        self.labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i].clone()).collect())
    }

    /// Loads a dataset directory. Only the feature file is required; a
    /// missing split means every row plays every role.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let features = read_fvecs(&dir.join(FEATURES_FILE))?;
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let labels = opt(LABELS_FILE).map(|p| read_labels(&p)).transpose()?;
        let label_embeddings = opt(LABEL_EMBEDDINGS_FILE)
            .map(|p| read_label_embeddings(&p))
            .transpose()?;
        let split = match opt(SPLIT_FILE) {
            Some(p) => SplitManifest::load(&p)?,
            None => SplitManifest::all(features.rows()),
        };
        let bundle = DatasetBundle {
            features,
            labels,
            label_embeddings,
            split,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_fvecs(&dir.join(FEATURES_FILE), &self.features)?;
        if let Some(l) = &self.labels {
            write_labels(&dir.join(LABELS_FILE), l)?;
        }
        if let Some(z) = &self.label_embeddings {
            write_label_embeddings(&dir.join(LABEL_EMBEDDINGS_FILE), z)?;
        }
        self.split.save(&dir.join(SPLIT_FILE))
    }
}

/// Gaussian mixture benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub dim: usize,
    /// Standard deviation of the points around their center; centers are
    /// standard normal.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.points_per_cluster == 0 || self.dim == 0 {
            return Err(Error::Config(
                "synthetic data needs clusters, points and dim ≥ 1".into(),
            ));
        }
        if self.clusters > u16::MAX as usize + 1 {
            return Err(Error::Config("too many clusters for u16 labels".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        Ok(())
    }
}

/// Draws a labelled mixture, cluster after cluster. In each cluster the
/// first tenth of the points (at least one, unless the cluster has a single
/// point) become queries; the rest form both the training and database set.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let centers: Vec<f64> = (0..spec.clusters * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let n = spec.clusters * spec.points_per_cluster;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut split = SplitManifest {
        train: Vec::new(),
        query: Vec::new(),
        database: Vec::new(),
        disjoint: true,
    };
    let per_query = if spec.points_per_cluster > 1 {
        spec.points_per_cluster.div_ceil(10).min(spec.points_per_cluster - 1)
    } else {
        0
    };
    for c in 0..spec.clusters {
        let center = &centers[c * d..(c + 1) * d];
        for p in 0..spec.points_per_cluster {
            let id = labels.len();
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + spec.noise * z);
            }
            labels.push(LabelAnnotation::single(c as u16));
            if p < per_query {
                split.query.push(id);
            } else {
                split.train.push(id);
                split.database.push(id);
            }
        }
    }
    Ok(DatasetBundle {
        features: Matrix::new(n, d, data),
        labels: Some(labels),
        label_embeddings: None,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sq_dist;

    fn spec(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            clusters: 10,
            points_per_cluster: 20,
            dim: 16,
            noise,
            seed,
        }
    }

    #[test]
    fn single_record_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.fvecs");
        let mut bytes = 2i32.to_le_bytes().to_vec();
        bytes.extend(1.0f32.to_le_bytes());
        bytes.extend(2.0f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        let m = read_fvecs(&p).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 2));
        assert_eq!(m.as_slice(), &[1.0, 2.0]);

        let e = dir.path().join("empty.fvecs");
        std::fs::write(&e, b"").unwrap();
        let m = read_fvecs(&e).unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 0));
    }

    #[test]
    fn fvecs_roundtrip_is_bit_identical() {
        let ds = make_synthetic(&SyntheticSpec {
            clusters: 5,
            points_per_cluster: 20,
            dim: 16,
            noise: 0.3,
            seed: 1,
        })
        .unwrap();
        // make the values exactly representable first
        let m = ds
            .features
            .map_rows(16, |r| Ok(r.iter().map(|&v| v as f32 as f64).collect()))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fvecs");
        write_fvecs(&p, &m).unwrap();
        let back = read_fvecs(&p).unwrap();
        assert_eq!(back.rows(), 100);
        assert!(back
            .as_slice()
            .iter()
            .zip(m.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let first = std::fs::read(&p).unwrap();
        write_fvecs(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn fvecs_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.fvecs");
        let mut bytes = Vec::new();
        for d in [2i32, 2, 3] {
            bytes.extend(d.to_le_bytes());
            for _ in 0..d {
                bytes.extend(0.5f32.to_le_bytes());
            }
        }
        std::fs::write(&p, &bytes).unwrap();
        let err = read_fvecs(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("record 2"), "{err}");

        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(read_fvecs(&p).unwrap_err(), Error::Length(_)));
        std::fs::write(&p, &bytes[..2]).unwrap();
        assert!(matches!(read_fvecs(&p).unwrap_err(), Error::Length(_)));
    }

    #[test]
    fn ivecs_and_labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.ivecs");
        let rows = vec![vec![3, 1, 4], vec![1, 5, 9]];
        write_ivecs(&p, &rows).unwrap();
        assert_eq!(read_ivecs(&p).unwrap(), rows);

        let p = dir.path().join("labels.bin");
        let labels = vec![LabelAnnotation::single(3), LabelAnnotation::new(vec![0, 7, 2]).unwrap()];
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        std::fs::write(&p, [1u8, 0]).unwrap();
        assert!(read_labels(&p).is_err());

        let p = dir.path().join("z.bin");
        let z = SemanticLabelSet::new(2, 3, vec![1.0, 0.0, 0.5, 0.0, 1.0, -0.25]).unwrap();
        write_label_embeddings(&p, &z).unwrap();
        assert_eq!(read_label_embeddings(&p).unwrap().raw(), z.raw());
    }

    #[test]
    fn split_validation() {
        let mut s = SplitManifest::all(4);
        assert!(s.validate(4).is_ok());
        assert!(s.validate(3).is_err());
        s.disjoint = true;
        assert!(s.validate(4).is_err());
        s.query = vec![];
        assert!(s.validate(4).is_ok());
    }

    #[test]
    fn synthetic_examples() {
        let ds = make_synthetic(&spec(0.0, 3)).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let first = ds.features.row(0).to_vec();
        for i in 0..ds.features.rows() {
            if labels[i] == labels[0] {
                assert_eq!(ds.features.row(i), &first[..]);
            }
        }
        let a = make_synthetic(&spec(0.1, 9)).unwrap();
        let b = make_synthetic(&spec(0.1, 9)).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.split, b.split);
        assert_ne!(make_synthetic(&spec(0.1, 10)).unwrap().features, a.features);
        a.validate().unwrap();
        assert_eq!(a.split.query.len(), 20);
        assert_eq!(a.split.database.len(), 180);
    }

    #[test]
    fn synthetic_neighbours_share_the_cluster() {
        let ds = make_synthetic(&spec(0.1, 4)).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for &q in &ds.split.query {
            let best = ds
                .split
                .database
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    sq_dist(ds.features.row(q), ds.features.row(a))
                        .total_cmp(&sq_dist(ds.features.row(q), ds.features.row(b)))
                })
                .unwrap();
            assert_eq!(labels[best], labels[q]);
        }
    }

    #[test]
    fn bundle_directory_roundtrip() {
        let mut ds = make_synthetic(&spec(0.2, 5)).unwrap();
        ds.features = ds
            .features
            .map_rows(16, |r| Ok(r.iter().map(|&v| v as f32 as f64).collect()))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = DatasetBundle::load_dir(dir.path()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.split, ds.split);
    }
}
