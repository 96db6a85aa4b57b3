//! Vector sets, the texmex `.fvecs` / `.bvecs` / `.ivecs` formats, synthetic data
//! and exact k-nearest-neighbor ground truth.
//!
//! Every record in the texmex formats is a little-endian `i32` dimension followed by
//! that many components (`f32`, `u8` or `i32`). All records of a file share the
//! same dimension.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::ByteReader;
use crate::kernels::sq_dist_f32;
use crate::{parallel, seeds, Error, Result};

/// `n` dense vectors of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorSet {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl VectorSet {
    /// Builds a set from row-major data. Every value must be finite.
    pub fn new(d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            if data.is_empty() {
                return Ok(Self::default());
            }
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "data length {} is not a multiple of dimension {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            n: data.len() / d,
            d,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Ok(Self::default());
        };
        let d = first.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(d, data)
    }

    /// An empty set that remembers its dimension.
    pub fn empty(d: usize) -> Self {
        Self {
            n: 0,
            d,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Dimensionality; 0 for a set read from an empty file.
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size; an empty set has no rows anyway.
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the selected rows into a new set.
    pub fn select(&self, ids: &[usize]) -> VectorSet {
        let mut data = Vec::with_capacity(ids.len() * self.d);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        VectorSet {
            n: ids.len(),
            d: self.d,
            data,
        }
    }

    /// Appends the rows of `other`, which must have the same dimension.
    pub fn extend(&mut self, other: &VectorSet) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if self.is_empty() && self.d == 0 {
            *self = other.clone();
            return Ok(());
        }
        if other.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.n += other.n;
        Ok(())
    }
}

/// Component encoding of a texmex vector file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecsFormat {
    /// `f32` components (`.fvecs`).
    Float,
    /// `u8` components (`.bvecs`), widened exactly to `f32`.
    Byte,
}

impl VecsFormat {
    fn component_size(self) -> usize {
        match self {
            VecsFormat::Float => 4,
            VecsFormat::Byte => 1,
        }
    }
}

/// Sequential, chunked reader for `.fvecs` / `.bvecs` streams.
///
/// Large base sets are consumed with [`VecsReader::next_chunk`]; the whole-file
/// helpers [`read_fvecs`] and [`read_bvecs`] are built on it.
pub struct VecsReader<R> {
    src: ByteReader<R>,
    format: VecsFormat,
    dim: Option<usize>,
    done: bool,
}

impl<R: Read> VecsReader<R> {
    pub fn new(inner: R, format: VecsFormat) -> Self {
        Self {
            src: ByteReader::new(inner),
            format,
            dim: None,
            done: false,
        }
    }

    /// Dimension of the records seen so far.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Reads up to `max_rows` records. Returns `None` at end of stream.
    pub fn next_chunk(&mut self, max_rows: usize) -> Result<Option<VectorSet>> {
        if self.done {
            return Ok(None);
        }
        let mut data = Vec::new();
        let mut rows = 0;
        let mut payload = Vec::new();
        while rows < max_rows {
            let record_start = self.src.offset();
            let mut header = [0u8; 4];
            let got = self.src.read_up_to(&mut header)?;
            if got == 0 {
                self.done = true;
                break;
            }
            if got < 4 {
                return Err(Error::format(
                    record_start,
                    format!("truncated record header: expected 4 bytes, found {got}"),
                ));
            }
            let d = i32::from_le_bytes(header);
            if d <= 0 {
                return Err(Error::format(
                    record_start,
                    format!("invalid record dimension {d}"),
                ));
            }
            let d = d as usize;
            match self.dim {
                None => self.dim = Some(d),
                Some(first) if first != d => {
                    return Err(Error::format(
                        record_start,
                        format!("inconsistent dimension: first record has d={first}, this record has d={d}"),
                    ))
                }
                _ => {}
            }
            payload.resize(d * self.format.component_size(), 0);
            let payload_start = self.src.offset();
            self.src.read_exact(&mut payload, "record")?;
            match self.format {
                VecsFormat::Float => {
                    for (j, c) in payload.chunks_exact(4).enumerate() {
                        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                        if !v.is_finite() {
                            return Err(Error::format(
                                payload_start + 4 * j as u64,
                                "non-finite component",
                            ));
                        }
                        data.push(v);
                    }
                }
                VecsFormat::Byte => data.extend(payload.iter().map(|&b| b as f32)),
            }
            rows += 1;
        }
        if rows == 0 {
            return Ok(None);
        }
        let d = self.dim.unwrap_or(0);
        Ok(Some(VectorSet { n: rows, d, data }))
    }

    /// Reads every remaining record.
    pub fn read_all(&mut self) -> Result<VectorSet> {
        let mut out = VectorSet::default();
        while let Some(chunk) = self.next_chunk(1 << 16)? {
            out.extend(&chunk)?;
        }
        Ok(out)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a whole `.fvecs` file. An empty file yields an empty set with `d = 0`.
pub fn read_fvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    VecsReader::new(open(path)?, VecsFormat::Float)
        .read_all()
        .map_err(|e| e.with_path(path))
}

/// Reads a whole `.bvecs` file, widening bytes exactly to `0.0..=255.0`.
pub fn read_bvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    VecsReader::new(open(path)?, VecsFormat::Byte)
        .read_all()
        .map_err(|e| e.with_path(path))
}

/// Reads a vector file, picking the format from the extension (`.bvecs` or anything else as `.fvecs`).
pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bvecs") => read_bvecs(path),
        _ => read_fvecs(path),
    }
}

pub fn write_fvecs_to<W: Write>(w: &mut W, set: &VectorSet) -> std::io::Result<()> {
    let header = (set.d as i32).to_le_bytes();
    let mut buf = Vec::with_capacity(4 + set.d * 4);
    for row in set.rows().take(set.n) {
        buf.clear();
        buf.extend_from_slice(&header);
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_fvecs(path: impl AsRef<Path>, set: &VectorSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_fvecs_to(&mut w, set)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_ivecs_to<W: Write>(w: &mut W, rows: &[Vec<i32>]) -> Result<()> {
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::invalid(format!(
                "ivecs rows must be rectangular: found lengths {} and {}",
                first.len(),
                bad.len()
            )));
        }
    }
    for r in rows {
        let mut buf = Vec::with_capacity(4 + 4 * r.len());
        buf.extend_from_slice(&(r.len() as i32).to_le_bytes());
        for v in r {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}

pub fn write_ivecs(path: impl AsRef<Path>, rows: &[Vec<i32>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_ivecs_to(&mut w, rows).map_err(|e| e.with_path(path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ivecs_from<R: Read>(r: R) -> Result<Vec<Vec<i32>>> {
    let mut src = ByteReader::new(r);
    let mut rows = Vec::new();
    let mut dim: Option<usize> = None;
    loop {
        let record_start = src.offset();
        let mut header = [0u8; 4];
        let got = src.read_up_to(&mut header)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            return Err(Error::format(record_start, "truncated record header"));
        }
        let len = i32::from_le_bytes(header);
        if len < 0 {
            return Err(Error::format(record_start, format!("invalid row length {len}")));
        }
        let len = len as usize;
        if let Some(first) = dim {
            if first != len {
                return Err(Error::format(
                    record_start,
                    format!("inconsistent dimension: first record has d={first}, this record has d={len}"),
                ));
            }
        }
        dim = Some(len);
        let mut payload = vec![0u8; len * 4];
        src.read_exact(&mut payload, "record")?;
        rows.push(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok(rows)
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    let path = path.as_ref();
    read_ivecs_from(open(path)?).map_err(|e| e.with_path(path))
}

/// Exact nearest neighbors of each query: `r` base ids per row, ascending by
/// squared distance, ties resolved toward the lower id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    r: usize,
    ids: Vec<u64>,
    distances: Option<Vec<f32>>,
}

impl GroundTruth {
    pub fn new(r: usize, ids: Vec<u64>, distances: Option<Vec<f32>>) -> Result<Self> {
        if r == 0 && !ids.is_empty() {
            return Err(Error::invalid("ground truth depth must be positive"));
        }
        if r > 0 && !ids.len().is_multiple_of(r) {
            return Err(Error::invalid("ground truth ids are not a multiple of the depth"));
        }
        if let Some(d) = &distances {
            if d.len() != ids.len() {
                return Err(Error::invalid("ground truth distance count mismatch"));
            }
        }
        Ok(Self { r, ids, distances })
    }

    /// Neighbors per query.
    pub fn depth(&self) -> usize {
        self.r
    }

    pub fn num_queries(&self) -> usize {
        self.ids.len().checked_div(self.r).unwrap_or(0)
    }

    pub fn ids(&self, q: usize) -> &[u64] {
        &self.ids[q * self.r..(q + 1) * self.r]
    }

    /// Squared distances, when known (not stored in `.ivecs`).
    pub fn distances(&self, q: usize) -> Option<&[f32]> {
        self.distances
            .as_ref()
            .map(|d| &d[q * self.r..(q + 1) * self.r])
    }

    pub fn to_ivecs_rows(&self) -> Result<Vec<Vec<i32>>> {
        (0..self.num_queries())
            .map(|q| {
                self.ids(q)
                    .iter()
                    .map(|&id| {
                        i32::try_from(id)
                            .map_err(|_| Error::invalid(format!("id {id} does not fit in ivecs")))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_ivecs_rows(rows: &[Vec<i32>]) -> Result<Self> {
        let r = rows.first().map_or(0, Vec::len);
        let mut ids = Vec::with_capacity(rows.len() * r);
        for row in rows {
            for &v in row {
                if v < 0 {
                    return Err(Error::invalid(format!("negative id {v} in ground truth")));
                }
                ids.push(v as u64);
            }
        }
        Self::new(r, ids, None)
    }
}

/// Exact top-`r` neighbors of every query by squared L2 distance.
pub fn brute_force_knn(base: &VectorSet, queries: &VectorSet, r: usize) -> Result<GroundTruth> {
    if !queries.is_empty() && !base.is_empty() && base.dim() != queries.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: queries.dim(),
        });
    }
    if r > base.len() {
        return Err(Error::invalid(format!(
            "requested {r} neighbors but the base set has {} vectors",
            base.len()
        )));
    }
    if r == 0 {
        return GroundTruth::new(0, Vec::new(), Some(Vec::new()));
    }
    let rows = parallel::map_indexed(queries.len(), |qi| {
        let q = queries.row(qi);
        let mut all: Vec<(f32, u64)> = base
            .rows()
            .enumerate()
            .map(|(i, x)| (sq_dist_f32(q, x), i as u64))
            .collect();
        let cmp = |a: &(f32, u64), b: &(f32, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if r < all.len() {
            all.select_nth_unstable_by(r - 1, cmp);
            all.truncate(r);
        }
        all.sort_unstable_by(cmp);
        all
    });
    let mut ids = Vec::with_capacity(queries.len() * r);
    let mut dists = Vec::with_capacity(queries.len() * r);
    for row in rows {
        for (d, id) in row {
            ids.push(id);
            dists.push(d);
        }
    }
    GroundTruth::new(r, ids, Some(dists))
}

/// How synthetic vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticMode {
    /// `clusters` centers uniform in `[0,1]^d`, each point a uniformly chosen center
    /// plus isotropic Gaussian noise with standard deviation `spread`.
    GaussianMixture { clusters: usize, spread: f32 },
    /// Independent uniform `[0,1]` components.
    Uniform,
}

/// Synthetic data together with the mixture that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub vectors: VectorSet,
    /// Mixture centers (empty for uniform data).
    pub centers: VectorSet,
    /// Center index of every vector (empty for uniform data).
    pub labels: Vec<usize>,
}

pub fn generate_synthetic(n: usize, d: usize, mode: SyntheticMode, seed: u64) -> Result<VectorSet> {
    generate_labeled(n, d, mode, seed).map(|s| s.vectors)
}

pub fn generate_labeled(n: usize, d: usize, mode: SyntheticMode, seed: u64) -> Result<SyntheticData> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("synthetic data needs n >= 1 and d >= 1"));
    }
    let mut rng = seeds::rng(seed, seeds::GEN);
    match mode {
        SyntheticMode::Uniform => {
            let data = (0..n * d).map(|_| rng.random::<f32>()).collect();
            Ok(SyntheticData {
                vectors: VectorSet::new(d, data)?,
                centers: VectorSet::empty(d),
                labels: Vec::new(),
            })
        }
        SyntheticMode::GaussianMixture { clusters, spread } => {
            if clusters == 0 || clusters > n {
                return Err(Error::invalid(format!(
                    "cluster count {clusters} must be in 1..={n}"
                )));
            }
            if !(spread >= 0.0 && spread.is_finite()) {
                return Err(Error::invalid("spread must be a finite non-negative number"));
            }
            let centers: Vec<f32> = (0..clusters * d).map(|_| rng.random::<f32>()).collect();
            let mut labels = Vec::with_capacity(n);
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let c = rng.random_range(0..clusters);
                labels.push(c);
                for j in 0..d {
                    let noise: f32 = rng.sample(StandardNormal);
                    data.push(centers[c * d + j] + spread * noise);
                }
            }
            Ok(SyntheticData {
                vectors: VectorSet::new(d, data)?,
                centers: VectorSet::new(d, centers)?,
                labels,
            })
        }
    }
}
