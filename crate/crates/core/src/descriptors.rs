//! Per-keyframe global descriptors with exact nearest-neighbor retrieval.
//!
//! Queries are brute force by design: at the scale of a single traversal
//! (hundreds to a few thousand keyframes) exact search is trivially fast and
//! keeps every downstream result deterministic. A temporal exclusion window
//! suppresses matches against the immediate neighbors of the query keyframe.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Default temporal exclusion window: candidates within 10 keyframes of the
/// query on either side are never returned.
pub const DEFAULT_EXCLUSION_WINDOW: usize = 10;

const BINARY_MAGIC: &[u8; 4] = b"VPRD";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("keyframe {0} already present in store")]
    DuplicateKeyframe(usize),
    #[error("descriptor dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("descriptor for keyframe {0} contains a non-finite value")]
    NonFiniteValue(usize),
    #[error("keyframe {0} not present in store")]
    UnknownKeyframe(usize),
    #[error("store is empty")]
    EmptyStore,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed descriptor file at line {line}: {reason}")]
    MalformedFile { line: usize, reason: String },
    #[error("malformed binary descriptor file: {0}")]
    MalformedBinary(String),
}

/// A fixed-dimension global descriptor attached to one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub keyframe_id: usize,
    pub vector: Vec<f64>,
}

impl Descriptor {
    pub fn new(keyframe_id: usize, vector: Vec<f64>) -> Descriptor {
        Descriptor {
            keyframe_id,
            vector,
        }
    }
}

/// One retrieval result: a candidate keyframe and its Euclidean distance to
/// the query descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCandidate {
    pub query_id: usize,
    pub candidate_id: usize,
    pub distance: f64,
}

/// Euclidean distance between two equal-dimension vectors.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// In-memory descriptor database.
#[derive(Debug, Clone, Default)]
pub struct DescriptorStore {
    dim: Option<usize>,
    descriptors: Vec<Descriptor>,
    index: HashMap<usize, usize>,
}

impl DescriptorStore {
    pub fn new() -> DescriptorStore {
        DescriptorStore::default()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Dimension of the stored vectors; `None` while the store is empty.
    pub fn dimension(&self) -> Option<usize> {
        self.dim
    }

    pub fn contains(&self, keyframe_id: usize) -> bool {
        self.index.contains_key(&keyframe_id)
    }

    pub fn get(&self, keyframe_id: usize) -> Option<&Descriptor> {
        self.index.get(&keyframe_id).map(|&i| &self.descriptors[i])
    }

    /// Iterates descriptors in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Descriptor> {
        self.descriptors.iter()
    }

    pub fn insert(&mut self, d: Descriptor) -> Result<(), StoreError> {
        if let Some(dim) = self.dim {
            if d.vector.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    got: d.vector.len(),
                });
            }
        }
        if self.index.contains_key(&d.keyframe_id) {
            return Err(StoreError::DuplicateKeyframe(d.keyframe_id));
        }
        if d.vector.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue(d.keyframe_id));
        }
        self.dim.get_or_insert(d.vector.len());
        self.index.insert(d.keyframe_id, self.descriptors.len());
        self.descriptors.push(d);
        Ok(())
    }

    /// L2-normalizes every stored vector in place. Zero vectors are left as-is.
    pub fn l2_normalize(&mut self) {
        for d in &mut self.descriptors {
            let n = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in &mut d.vector {
                    *v /= n;
                }
            }
        }
    }

    /// Exact k-nearest-neighbor query under Euclidean distance.
    ///
    /// Every returned candidate satisfies `|candidate_id - query_id| > window`.
    /// Results are sorted by ascending distance, ties broken by ascending
    /// candidate id, truncated to `k`.
    pub fn query(
        &self,
        query_id: usize,
        k: usize,
        window: usize,
    ) -> Result<Vec<MatchCandidate>, StoreError> {
        let q = self
            .get(query_id)
            .ok_or(StoreError::UnknownKeyframe(query_id))?;
        let mut out: Vec<MatchCandidate> = Vec::new();
        for d in &self.descriptors {
            if d.keyframe_id.abs_diff(query_id) <= window {
                continue;
            }
            let dist = distance(&q.vector, &d.vector)?;
            out.push(MatchCandidate {
                query_id,
                candidate_id: d.keyframe_id,
                distance: dist,
            });
        }
        out.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap()
                .then(a.candidate_id.cmp(&b.candidate_id))
        });
        out.truncate(k);
        Ok(out)
    }

    /// Full pairwise distance matrix, ordered by ascending keyframe id.
    ///
    /// Each off-diagonal entry is computed once and mirrored, so the matrix is
    /// exactly symmetric.
    pub fn similarity_matrix(&self) -> Result<SimilarityMatrix, StoreError> {
        if self.is_empty() {
            return Err(StoreError::EmptyStore);
        }
        let mut order: Vec<usize> = (0..self.descriptors.len()).collect();
        order.sort_by_key(|&i| self.descriptors[i].keyframe_id);
        let ids: Vec<usize> = order
            .iter()
            .map(|&i| self.descriptors[i].keyframe_id)
            .collect();
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let d = distance(
                    &self.descriptors[order[a]].vector,
                    &self.descriptors[order[b]].vector,
                )?;
                data[a * n + b] = d;
                data[b * n + a] = d;
            }
        }
        Ok(SimilarityMatrix { ids, data })
    }

    // ---- CSV format -------------------------------------------------------
    //
    // Header `keyframe_id,v0,...,v{D-1}`, one row per keyframe, UTF-8, LF.

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), StoreError> {
        let dim = self.dim.unwrap_or(0);
        let mut header = String::from("keyframe_id");
        for i in 0..dim {
            header.push_str(&format!(",v{i}"));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut order: Vec<&Descriptor> = self.descriptors.iter().collect();
        order.sort_by_key(|d| d.keyframe_id);
        for d in order {
            let mut line = d.keyframe_id.to_string();
            for v in &d.vector {
                line.push(',');
                line.push_str(&format!("{v}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<DescriptorStore, StoreError> {
        let mut store = DescriptorStore::new();
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(StoreError::MalformedFile {
            line: 1,
            reason: "missing header".into(),
        })?;
        let header = header?;
        if !header.starts_with("keyframe_id") {
            return Err(StoreError::MalformedFile {
                line: 1,
                reason: "header must start with 'keyframe_id'".into(),
            });
        }
        for (idx, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let id_str = parts.next().unwrap();
            let keyframe_id: usize = id_str.parse().map_err(|_| StoreError::MalformedFile {
                line: idx + 1,
                reason: format!("bad keyframe id '{id_str}'"),
            })?;
            let mut vector = Vec::new();
            for p in parts {
                let v: f64 = p.parse().map_err(|_| StoreError::MalformedFile {
                    line: idx + 1,
                    reason: format!("bad float '{p}'"),
                })?;
                vector.push(v);
            }
            store.insert(Descriptor::new(keyframe_id, vector))?;
        }
        Ok(store)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)
    }

    pub fn load_csv(path: &Path) -> Result<DescriptorStore, StoreError> {
        let f = std::fs::File::open(path)?;
        DescriptorStore::read_csv(std::io::BufReader::new(f))
    }

    // ---- Binary format ----------------------------------------------------
    //
    // Magic `VPRD`, u32 version = 1, u32 D, u32 N, then N records of
    // (u64 id, D little-endian f64).

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), StoreError> {
        let dim = self.dim.unwrap_or(0);
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.descriptors.len() as u32).to_le_bytes())?;
        let mut order: Vec<&Descriptor> = self.descriptors.iter().collect();
        order.sort_by_key(|d| d.keyframe_id);
        for d in order {
            w.write_all(&(d.keyframe_id as u64).to_le_bytes())?;
            for v in &d.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<DescriptorStore, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(StoreError::MalformedBinary("bad magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != BINARY_VERSION {
            return Err(StoreError::MalformedBinary(format!(
                "unsupported version {version}"
            )));
        }
        r.read_exact(&mut buf4)?;
        let dim = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let n = u32::from_le_bytes(buf4) as usize;
        let mut store = DescriptorStore::new();
        let mut buf8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            let id = u64::from_le_bytes(buf8) as usize;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf8)?;
                vector.push(f64::from_le_bytes(buf8));
            }
            store.insert(Descriptor::new(id, vector))?;
        }
        Ok(store)
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut w)
    }

    pub fn load_binary(path: &Path) -> Result<DescriptorStore, StoreError> {
        let f = std::fs::File::open(path)?;
        DescriptorStore::read_binary(std::io::BufReader::new(f))
    }
}

/// Symmetric pairwise-distance matrix with its keyframe-id ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub ids: Vec<usize>,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.ids.len() + col]
    }
}
