//! The additive codebook: `M` dictionaries of `K` full-dimensional codewords.
//!
//! A code `(i_1, .., i_M)` reconstructs to `Σ_m c_m(i_m)`. Encoding is a beam search
//! over the dictionaries in order; search uses asymmetric distance tables plus the
//! precomputed codeword cross products.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::binio::{put_f32s, put_u32, put_u64, ByteReader};
use crate::data_io::VectorSet;
use crate::kernels::{dot, sq_dist, sq_norm};
use crate::{counters, parallel, Error, Result};

const CODEBOOK_MAGIC: &[u8; 4] = b"HCLB";
const CODEBOOK_VERSION: u32 = 1;
const ENCODED_MAGIC: &[u8; 4] = b"HCLE";
const ENCODED_VERSION: u32 = 1;
const TAG_HASH: &[u8; 4] = b"HASH";
const TAG_IDS: &[u8; 4] = b"IDS\0";

/// Largest supported dictionary size.
pub const MAX_K: usize = 1 << 16;

/// SHA-256 of a codebook's serialized bytes.
pub type CodebookHash = [u8; 32];

pub fn hash_hex(hash: &CodebookHash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Codebook {
    m: usize,
    k: usize,
    d: usize,
    /// `M·K·d` values, dictionary-major then codeword-major.
    words: Vec<f32>,
    /// `order[i]` is the original index of the dictionary now at position `i`.
    order: Vec<u32>,
    hash: OnceLock<CodebookHash>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
            && self.k == other.k
            && self.d == other.d
            && self.order == other.order
            && self.words.len() == other.words.len()
            && self.words.iter().zip(&other.words).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Codebook {
    /// All-zero codebook with identity order.
    pub fn zeros(m: usize, k: usize, d: usize) -> Result<Self> {
        Self::new(m, k, d, vec![0.0; m * k * d])
    }

    pub fn new(m: usize, k: usize, d: usize, words: Vec<f32>) -> Result<Self> {
        Self::from_parts(m, k, d, words, (0..m as u32).collect())
    }

    pub fn from_parts(m: usize, k: usize, d: usize, words: Vec<f32>, order: Vec<u32>) -> Result<Self> {
        if m == 0 || k == 0 || d == 0 {
            return Err(Error::invalid(format!("codebook needs M, K, d >= 1 (got {m}, {k}, {d})")));
        }
        if k > MAX_K {
            return Err(Error::invalid(format!("K={k} exceeds the supported maximum {MAX_K}")));
        }
        if words.len() != m * k * d {
            return Err(Error::invalid(format!(
                "codeword data has {} values, expected M*K*d = {}",
                words.len(),
                m * k * d
            )));
        }
        if words.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codewords must be finite"));
        }
        let mut seen = vec![false; m];
        for &o in &order {
            if o as usize >= m || std::mem::replace(&mut seen[o as usize], true) {
                return Err(Error::invalid(format!("order {order:?} is not a permutation of 0..{m}")));
            }
        }
        if order.len() != m {
            return Err(Error::invalid(format!("order {order:?} is not a permutation of 0..{m}")));
        }
        Ok(Self {
            m,
            k,
            d,
            words,
            order,
            hash: OnceLock::new(),
        })
    }

    pub fn num_dicts(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.words
    }

    pub fn codeword(&self, m: usize, k: usize) -> &[f32] {
        let start = (m * self.k + k) * self.d;
        &self.words[start..start + self.d]
    }

    /// The `K·d` values of dictionary `m`.
    pub fn dictionary(&self, m: usize) -> &[f32] {
        let len = self.k * self.d;
        &self.words[m * len..(m + 1) * len]
    }

    pub fn set_dictionary(&mut self, m: usize, values: &[f32]) -> Result<()> {
        if m >= self.m || values.len() != self.k * self.d {
            return Err(Error::invalid(format!(
                "dictionary {m} replacement must have K*d = {} values",
                self.k * self.d
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codewords must be finite"));
        }
        let len = self.k * self.d;
        self.words[m * len..(m + 1) * len].copy_from_slice(values);
        self.hash = OnceLock::new();
        Ok(())
    }

    fn check_code(&self, code: &[u16]) -> Result<()> {
        if code.len() != self.m {
            return Err(Error::invalid(format!("code has {} parts, expected {}", code.len(), self.m)));
        }
        if let Some((m, &c)) = code.iter().enumerate().find(|(_, &c)| c as usize >= self.k) {
            return Err(Error::invalid(format!("code index {c} in part {m} is not below K={}", self.k)));
        }
        Ok(())
    }

    pub fn reconstruct(&self, code: &[u16]) -> Result<Vec<f32>> {
        self.check_code(code)?;
        let mut out = vec![0f32; self.d];
        self.reconstruct_into(code, &mut out);
        Ok(out)
    }

    /// Sum of the selected codewords, accumulated in f64. `code` must be valid.
    pub(crate) fn reconstruct_into(&self, code: &[u16], out: &mut [f32]) {
        let mut acc = vec![0f64; self.d];
        for (m, &c) in code.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(self.codeword(m, c as usize)) {
                *a += v as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }

    /// `‖x − reconstruct(code)‖²` for one vector, in f64.
    pub fn squared_error(&self, x: &[f32], code: &[u16]) -> Result<f64> {
        self.check_code(code)?;
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        Ok(self.squared_error_unchecked(x, code))
    }

    pub(crate) fn squared_error_unchecked(&self, x: &[f32], code: &[u16]) -> f64 {
        let mut r: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for (m, &c) in code.iter().enumerate() {
            for (a, &v) in r.iter_mut().zip(self.codeword(m, c as usize)) {
                *a -= v as f64;
            }
        }
        r.iter().map(|v| v * v).sum()
    }

    /// Mean of `‖x − reconstruct(code)‖²` over the data set.
    pub fn distortion(&self, data: &VectorSet, codes: &EncodedDataset) -> Result<f64> {
        if data.len() != codes.len() {
            return Err(Error::invalid(format!(
                "{} vectors but {} codes",
                data.len(),
                codes.len()
            )));
        }
        self.check_shape(codes)?;
        if data.is_empty() {
            return Ok(0.0);
        }
        if data.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: data.dim(),
            });
        }
        let errs = parallel::map_indexed(data.len(), |i| self.squared_error_unchecked(data.row(i), codes.code(i)));
        Ok(errs.iter().sum::<f64>() / data.len() as f64)
    }

    fn check_shape(&self, codes: &EncodedDataset) -> Result<()> {
        if codes.m != self.m || codes.k != self.k {
            return Err(Error::CodebookMismatch(format!(
                "codes have M={}, K={} but the codebook has M={}, K={}",
                codes.m, codes.k, self.m, self.k
            )));
        }
        Ok(())
    }

    /// `Var(C_m) = (1/K) Σ_k ‖c_m(k) − mean_k c_m(k)‖²` for every dictionary.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.m)
            .map(|m| {
                let mut mean = vec![0f64; self.d];
                for k in 0..self.k {
                    for (a, &v) in mean.iter_mut().zip(self.codeword(m, k)) {
                        *a += v as f64;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= self.k as f64);
                (0..self.k)
                    .map(|k| {
                        self.codeword(m, k)
                            .iter()
                            .zip(&mean)
                            .map(|(&v, &c)| (v as f64 - c).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / self.k as f64
            })
            .collect()
    }

    /// Dictionaries sorted by non-increasing variance (stable), and the permutation
    /// `perm` with `perm[new] = old`. Codes are remapped with [`EncodedDataset::permute_parts`].
    pub fn reorder_by_variance(&self) -> (Codebook, Vec<usize>) {
        let var = self.variances();
        let mut perm: Vec<usize> = (0..self.m).collect();
        perm.sort_by(|&a, &b| var[b].total_cmp(&var[a]));
        let mut words = Vec::with_capacity(self.words.len());
        for &p in &perm {
            words.extend_from_slice(self.dictionary(p));
        }
        let order = perm.iter().map(|&p| self.order[p]).collect();
        let out = Codebook {
            m: self.m,
            k: self.k,
            d: self.d,
            words,
            order,
            hash: OnceLock::new(),
        };
        (out, perm)
    }

    /// SHA-256 of the serialized codebook, computed once.
    pub fn content_hash(&self) -> CodebookHash {
        *self.hash.get_or_init(|| Sha256::digest(self.to_bytes()).into())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.words.len() * 4 + self.m * 4);
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        put_u32(w, CODEBOOK_VERSION)?;
        put_u32(w, self.d as u32)?;
        put_u32(w, self.m as u32)?;
        put_u32(w, self.k as u32)?;
        put_f32s(w, &self.words)?;
        for &o in &self.order {
            put_u32(w, o)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.read_magic(CODEBOOK_MAGIC)?;
        let version = r.u32("version")?;
        if version != CODEBOOK_VERSION {
            return Err(Error::UnsupportedVersion {
                path: None,
                expected: CODEBOOK_VERSION,
                found: version,
            });
        }
        let header = r.offset();
        let d = r.u32("dimension")? as usize;
        let m = r.u32("dictionary count")? as usize;
        let k = r.u32("codeword count")? as usize;
        if d == 0 || m == 0 || k == 0 || k > MAX_K {
            return Err(Error::format(header, format!("invalid codebook shape d={d}, M={m}, K={k}")));
        }
        let values_at = r.offset();
        let words = r.f32_vec(m * k * d, "codewords")?;
        if let Some(i) = words.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(values_at + 4 * i as u64, "non-finite codeword value"));
        }
        let order_at = r.offset();
        let mut order = Vec::with_capacity(m);
        for _ in 0..m {
            order.push(r.u32("order")?);
        }
        r.expect_eof()?;
        Self::from_parts(m, k, d, words, order).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::format(order_at, msg),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.with_path(path))
    }
}

/// Inner products between codewords of different dictionaries, plus squared norms.
#[derive(Debug, Clone)]
pub struct CrossProductTable {
    m: usize,
    k: usize,
    norms: Vec<f64>,
    /// For each pair `a < b`, a `K×K` block with rows indexed by the code of `a`.
    pairs: Vec<f64>,
}

impl CrossProductTable {
    pub fn new(codebook: &Codebook) -> Self {
        let (m, k) = (codebook.m, codebook.k);
        let norms = parallel::map_indexed(m * k, |i| sq_norm(codebook.codeword(i / k, i % k)));
        let n_pairs = m * m.saturating_sub(1) / 2;
        let mut pairs = vec![0f64; n_pairs * k * k];
        parallel::for_each_chunk_mut(&mut pairs, k, |row, out| {
            let (pair, i) = (row / k, row % k);
            let (a, b) = pair_of(m, pair);
            let ci = codebook.codeword(a, i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(ci, codebook.codeword(b, j));
            }
        });
        Self { m, k, norms, pairs }
    }

    pub fn num_dicts(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    /// `‖c_m(i)‖²`.
    pub fn norm(&self, m: usize, i: usize) -> f64 {
        self.norms[m * self.k + i]
    }

    fn pair_index(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < b && b < self.m);
        a * (2 * self.m - a - 1) / 2 + (b - a - 1)
    }

    /// `c_a(i)ᵀ c_b(j)` for `a != b`.
    pub fn get(&self, a: usize, i: usize, b: usize, j: usize) -> f64 {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => self.row(a, i, b)[j],
            std::cmp::Ordering::Greater => self.row(b, j, a)[i],
            std::cmp::Ordering::Equal => panic!("cross products are defined between distinct dictionaries"),
        }
    }

    /// `c_a(i)ᵀ c_b(·)` for `a < b`, as a slice over the codes of `b`.
    pub fn row(&self, a: usize, i: usize, b: usize) -> &[f64] {
        let start = (self.pair_index(a, b) * self.k + i) * self.k;
        &self.pairs[start..start + self.k]
    }
}

/// Inverse of the `a < b` pair numbering used by [`CrossProductTable`].
fn pair_of(m: usize, mut idx: usize) -> (usize, usize) {
    for a in 0..m {
        let span = m - a - 1;
        if idx < span {
            return (a, a + 1 + idx);
        }
        idx -= span;
    }
    unreachable!("pair index out of range")
}

/// Best code found by the beam search and its squared reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub code: Vec<u16>,
    pub error: f64,
}

/// Beam-search encoding over the dictionaries in order.
///
/// Keeps the `beam` best partial codes per stage (ties broken toward the
/// lexicographically smaller code). Candidates are scored as
/// `‖x − a − c‖² − ‖x‖² = s(a) + ‖c‖² − 2xᵀc + 2cᵀa`, where the `‖c‖² − 2xᵀc`
/// terms come from one `K`-entry table per stage and `cᵀa` from the cross-product
/// table. The codebook is used in its stored order; callers wanting variance
/// order must reorder first.
pub fn encode_multipath(
    codebook: &Codebook,
    cross: &CrossProductTable,
    x: &[f32],
    beam: usize,
) -> Result<Encoding> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if x.len() != codebook.d {
        return Err(Error::DimensionMismatch {
            expected: codebook.d,
            found: x.len(),
        });
    }
    if cross.m != codebook.m || cross.k != codebook.k {
        return Err(Error::CodebookMismatch("cross-product table built for another codebook".into()));
    }
    Ok(encode_unchecked(codebook, cross, x, beam))
}

#[derive(Clone, Copy)]
struct Extension {
    score: f64,
    parent_rank: u32,
    parent: u32,
    code: u16,
}

fn ext_cmp(a: &Extension, b: &Extension) -> std::cmp::Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.parent_rank.cmp(&b.parent_rank))
        .then(a.code.cmp(&b.code))
}

fn encode_unchecked(codebook: &Codebook, cross: &CrossProductTable, x: &[f32], beam: usize) -> Encoding {
    let (m_count, k) = (codebook.m, codebook.k);
    let x_norm = sq_norm(x);
    let mut unary = vec![0f64; k];
    let mut prefix_sum = vec![0f64; k];

    // Live candidates: codes stored flat (`width` entries each), scores, and
    // lexicographic rank among the live codes.
    let mut codes: Vec<u16> = Vec::new();
    let mut scores: Vec<f64> = vec![0.0];
    let mut ranks: Vec<u32> = vec![0];
    let mut exts: Vec<Extension> = Vec::with_capacity(beam.min(MAX_K) * k);

    for m in 0..m_count {
        for (c, u) in unary.iter_mut().enumerate() {
            *u = cross.norm(m, c) - 2.0 * dot(x, codebook.codeword(m, c));
        }
        exts.clear();
        for p in 0..scores.len() {
            let code = &codes[p * m..(p + 1) * m];
            prefix_sum.iter_mut().for_each(|v| *v = 0.0);
            for (i, &ci) in code.iter().enumerate() {
                for (s, &v) in prefix_sum.iter_mut().zip(cross.row(i, ci as usize, m)) {
                    *s += v;
                }
            }
            for c in 0..k {
                exts.push(Extension {
                    score: scores[p] + unary[c] + 2.0 * prefix_sum[c],
                    parent_rank: ranks[p],
                    parent: p as u32,
                    code: c as u16,
                });
            }
        }
        if exts.len() > beam {
            exts.select_nth_unstable_by(beam - 1, ext_cmp);
            exts.truncate(beam);
        }
        exts.sort_unstable_by(ext_cmp);

        let width = m + 1;
        let mut next_codes = Vec::with_capacity(exts.len() * width);
        for e in &exts {
            let p = e.parent as usize;
            next_codes.extend_from_slice(&codes[p * m..(p + 1) * m]);
            next_codes.push(e.code);
        }
        scores = exts.iter().map(|e| e.score).collect();
        // Lexicographic order of the new codes is (parent rank, code).
        let mut by_lex: Vec<usize> = (0..exts.len()).collect();
        by_lex.sort_unstable_by_key(|&i| (exts[i].parent_rank, exts[i].code));
        ranks = vec![0; exts.len()];
        for (r, &i) in by_lex.iter().enumerate() {
            ranks[i] = r as u32;
        }
        codes = next_codes;
    }
    Encoding {
        code: codes[..m_count].to_vec(),
        error: (scores[0] + x_norm).max(0.0),
    }
}

/// Encodes every vector; identical to calling [`encode_multipath`] per row.
pub fn encode_dataset(
    codebook: &Codebook,
    cross: &CrossProductTable,
    data: &VectorSet,
    beam: usize,
) -> Result<EncodedDataset> {
    encode_dataset_with_errors(codebook, cross, data, beam).map(|(e, _)| e)
}

/// As [`encode_dataset`], also returning each vector's squared reconstruction error.
pub fn encode_dataset_with_errors(
    codebook: &Codebook,
    cross: &CrossProductTable,
    data: &VectorSet,
    beam: usize,
) -> Result<(EncodedDataset, Vec<f64>)> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if !data.is_empty() && data.dim() != codebook.d {
        return Err(Error::DimensionMismatch {
            expected: codebook.d,
            found: data.dim(),
        });
    }
    if cross.m != codebook.m || cross.k != codebook.k {
        return Err(Error::CodebookMismatch("cross-product table built for another codebook".into()));
    }
    let results = parallel::map_indexed(data.len(), |i| encode_unchecked(codebook, cross, data.row(i), beam));
    let mut codes = Vec::with_capacity(data.len() * codebook.m);
    let mut errors = Vec::with_capacity(data.len());
    for r in results {
        codes.extend_from_slice(&r.code);
        errors.push(r.error);
    }
    let mut enc = EncodedDataset::new(codebook.m, codebook.k, codes)?;
    enc.codebook_hash = Some(codebook.content_hash());
    Ok((enc, errors))
}

/// Codes for a set of vectors, optionally with original ids and the hash of the
/// codebook that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    n: usize,
    m: usize,
    k: usize,
    codes: Vec<u16>,
    ids: Option<Vec<u64>>,
    codebook_hash: Option<CodebookHash>,
}

impl EncodedDataset {
    pub fn new(m: usize, k: usize, codes: Vec<u16>) -> Result<Self> {
        if m == 0 || k == 0 || k > MAX_K {
            return Err(Error::invalid(format!("invalid code shape M={m}, K={k}")));
        }
        if !codes.len().is_multiple_of(m) {
            return Err(Error::invalid(format!("{} code values do not split into rows of {m}", codes.len())));
        }
        if let Some(c) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::invalid(format!("code index {c} is not below K={k}")));
        }
        Ok(Self {
            n: codes.len() / m,
            m,
            k,
            codes,
            ids: None,
            codebook_hash: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.n {
            return Err(Error::invalid(format!("{} ids for {} codes", ids.len(), self.n)));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn with_codebook_hash(mut self, hash: Option<CodebookHash>) -> Self {
        self.codebook_hash = hash;
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_dicts(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn code(&self, i: usize) -> &[u16] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.codes
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    /// External id of row `i`: the id map entry if present, else `i`.
    pub fn id(&self, i: usize) -> u64 {
        self.ids.as_ref().map_or(i as u64, |ids| ids[i])
    }

    pub fn codebook_hash(&self) -> Option<&CodebookHash> {
        self.codebook_hash.as_ref()
    }

    /// Fails unless the codes fit `codebook` and, when a hash is recorded, it matches.
    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        codebook.check_shape(self)?;
        if let Some(h) = &self.codebook_hash {
            let actual = codebook.content_hash();
            if *h != actual {
                return Err(Error::CodebookMismatch(format!(
                    "codes were produced by codebook {} but {} was supplied",
                    hash_hex(h),
                    hash_hex(&actual)
                )));
            }
        }
        Ok(())
    }

    /// Reorders code parts with `perm[new] = old`, matching [`Codebook::reorder_by_variance`].
    pub fn permute_parts(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.m];
        if perm.len() != self.m || perm.iter().any(|&p| p >= self.m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{}", self.m)));
        }
        let mut codes = Vec::with_capacity(self.codes.len());
        for i in 0..self.n {
            let row = self.code(i);
            codes.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Self {
            codes,
            codebook_hash: None,
            ..self.clone()
        })
    }

    /// Concatenates `other` after `self`. Row ids are kept only if both sides have them.
    pub fn append(&mut self, other: &EncodedDataset) -> Result<()> {
        if other.m != self.m || other.k != self.k {
            return Err(Error::invalid("cannot append codes of a different shape"));
        }
        self.ids = match (self.ids.take(), &other.ids) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
        if self.codebook_hash != other.codebook_hash {
            self.codebook_hash = None;
        }
        self.codes.extend_from_slice(&other.codes);
        self.n += other.n;
        Ok(())
    }

    /// Bytes per stored code index.
    pub fn code_width(&self) -> u8 {
        if self.k <= 256 {
            1
        } else {
            2
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(ENCODED_MAGIC)?;
        put_u32(w, ENCODED_VERSION)?;
        put_u64(w, self.n as u64)?;
        put_u32(w, self.m as u32)?;
        put_u32(w, self.k as u32)?;
        w.write_all(&[self.code_width()])?;
        let packed: Vec<u8> = if self.code_width() == 1 {
            self.codes.iter().map(|&c| c as u8).collect()
        } else {
            self.codes.iter().flat_map(|c| c.to_le_bytes()).collect()
        };
        w.write_all(&packed)?;
        if let Some(h) = &self.codebook_hash {
            w.write_all(TAG_HASH)?;
            w.write_all(h)?;
        }
        if let Some(ids) = &self.ids {
            w.write_all(TAG_IDS)?;
            for &id in ids {
                put_u64(w, id)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.read_magic(ENCODED_MAGIC)?;
        let version = r.u32("version")?;
        if version != ENCODED_VERSION {
            return Err(Error::UnsupportedVersion {
                path: None,
                expected: ENCODED_VERSION,
                found: version,
            });
        }
        let header = r.offset();
        let n = r.u64("row count")?;
        let m = r.u32("dictionary count")? as usize;
        let k = r.u32("codeword count")? as usize;
        let width = r.u8("code width")?;
        if m == 0 || k == 0 || k > MAX_K {
            return Err(Error::format(header, format!("invalid code shape M={m}, K={k}")));
        }
        let expected_width = if k <= 256 { 1 } else { 2 };
        if width != expected_width {
            return Err(Error::format(
                header + 16,
                format!("code width {width} does not match K={k}"),
            ));
        }
        let total = (n as usize)
            .checked_mul(m)
            .ok_or_else(|| Error::format(header, "row count overflows"))?;
        let codes_at = r.offset();
        let mut bytes = vec![0u8; total * width as usize];
        r.read_exact(&mut bytes, "codes")?;
        let codes: Vec<u16> = if width == 1 {
            bytes.iter().map(|&b| b as u16).collect()
        } else {
            bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
        };
        if let Some(i) = codes.iter().position(|&c| c as usize >= k) {
            return Err(Error::format(
                codes_at + (i * width as usize) as u64,
                format!("code index {} is not below K={k}", codes[i]),
            ));
        }
        let mut out = Self::new(m, k, codes)?;
        loop {
            let at = r.offset();
            let mut tag = [0u8; 4];
            match r.read_up_to(&mut tag)? {
                0 => break,
                4 => {}
                _ => return Err(Error::format(at, "truncated trailer tag")),
            }
            match &tag {
                t if t == TAG_HASH && out.codebook_hash.is_none() => {
                    let mut h = [0u8; 32];
                    r.read_exact(&mut h, "codebook hash")?;
                    out.codebook_hash = Some(h);
                }
                t if t == TAG_IDS && out.ids.is_none() => {
                    let mut ids = Vec::with_capacity(out.n);
                    for _ in 0..out.n {
                        ids.push(r.u64("ids")?);
                    }
                    out.ids = Some(ids);
                }
                _ => return Err(Error::format(at, format!("unknown or repeated trailer {tag:?}"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.with_path(path))
    }
}

/// Per-query table of `‖q − c_m(k)‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    m: usize,
    k: usize,
    values: Vec<f32>,
    q_norm_sq: f32,
}

impl AdcTable {
    pub fn new(codebook: &Codebook, q: &[f32]) -> Result<Self> {
        if q.len() != codebook.d {
            return Err(Error::DimensionMismatch {
                expected: codebook.d,
                found: q.len(),
            });
        }
        let (m, k) = (codebook.m, codebook.k);
        let values = (0..m * k)
            .map(|i| sq_dist(q, codebook.codeword(i / k, i % k)) as f32)
            .collect();
        Ok(Self {
            m,
            k,
            values,
            q_norm_sq: sq_norm(q) as f32,
        })
    }

    pub fn num_dicts(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    /// `‖q − c_m(k)‖²`; counted as one table lookup.
    #[inline]
    pub fn get(&self, m: usize, k: usize) -> f32 {
        counters::count_table_lookup();
        self.values[m * self.k + k]
    }

    pub fn q_norm_sq(&self) -> f32 {
        self.q_norm_sq
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// Adds dictionary `m` with code `code` to a partial distance.
    ///
    /// The first part contributes its table entry; each later part contributes
    /// `‖q − c_m‖² − ‖q‖² + 2·eps`, where `eps` is the code's inner product with
    /// the preceding parts ([`step_epsilon`]). After all `M` parts the result
    /// is `‖q − Σ c_m‖²` up to rounding.
    #[inline]
    pub fn extend(&self, acc: f64, m: usize, code: u16, eps: f32) -> f64 {
        let t = self.get(m, code as usize) as f64;
        if m == 0 {
            t
        } else {
            acc + (t - self.q_norm_sq as f64 + 2.0 * eps as f64)
        }
    }
}

pub fn adc_table(codebook: &Codebook, q: &[f32]) -> Result<AdcTable> {
    AdcTable::new(codebook, q)
}

/// `Σ_{i<m} c_i(prefix_i)ᵀ c_m(code)`, summed in f64 and rounded to f32.
pub fn step_epsilon(cross: &CrossProductTable, prefix: &[u16], code: u16) -> f32 {
    let m = prefix.len();
    prefix
        .iter()
        .enumerate()
        .map(|(i, &c)| cross.row(i, c as usize, m)[code as usize])
        .sum::<f64>() as f32
}

/// Approximate `‖q − reconstruct(code)‖²` from the ADC table and cross products.
pub fn adc_distance(table: &AdcTable, cross: &CrossProductTable, code: &[u16]) -> f64 {
    let mut acc = 0.0;
    for m in 0..code.len() {
        let eps = step_epsilon(cross, &code[..m], code[m]);
        acc = table.extend(acc, m, code[m], eps);
    }
    acc
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

pub(crate) fn rank_neighbors(mut all: Vec<(f64, u64)>, r: usize) -> Vec<Neighbor> {
    let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if r == 0 {
        return Vec::new();
    }
    if r < all.len() {
        all.select_nth_unstable_by(r - 1, cmp);
        all.truncate(r);
    }
    all.sort_unstable_by(cmp);
    all.into_iter()
        .map(|(d, id)| Neighbor {
            id,
            distance: d as f32,
        })
        .collect()
}

/// Exact top-`r` under [`adc_distance`] over every encoded vector; ties by lower id.
pub fn exhaustive_adc_search(
    codebook: &Codebook,
    cross: &CrossProductTable,
    encoded: &EncodedDataset,
    q: &[f32],
    r: usize,
) -> Result<Vec<Neighbor>> {
    encoded.check_codebook(codebook)?;
    if r > encoded.len() {
        return Err(Error::invalid(format!(
            "requested {r} neighbors but only {} vectors are encoded",
            encoded.len()
        )));
    }
    let table = AdcTable::new(codebook, q)?;
    let all = (0..encoded.len())
        .map(|i| (adc_distance(&table, cross, encoded.code(i)), encoded.id(i)))
        .collect();
    Ok(rank_neighbors(all, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticMode};
    use crate::seeds;
    use rand::Rng;

    fn random_codebook(m: usize, k: usize, d: usize, seed: u64) -> Codebook {
        let mut rng = seeds::rng(seed, "test-codebook");
        let words = (0..m * k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Codebook::new(m, k, d, words).unwrap()
    }

    fn naive_error(cb: &Codebook, x: &[f32], code: &[u16]) -> f64 {
        (0..cb.dim())
            .map(|j| {
                let s: f64 = code.iter().enumerate().map(|(m, &c)| cb.codeword(m, c as usize)[j] as f64).sum();
                (x[j] as f64 - s).powi(2)
            })
            .sum()
    }

    fn all_codes(m: usize, k: usize) -> Vec<Vec<u16>> {
        let mut out = vec![vec![]];
        for _ in 0..m {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k as u16).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn reconstruct_examples() {
        let cb = Codebook::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cb.reconstruct(&[0, 0]).unwrap(), vec![1.0, 1.0]);
        assert!(cb.reconstruct(&[0, 1]).is_err());
        let z = Codebook::zeros(3, 4, 5).unwrap();
        assert_eq!(z.reconstruct(&[1, 2, 3]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn distortion_examples() {
        let cb = Codebook::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let data = VectorSet::new(2, vec![1.0, 1.0]).unwrap();
        let codes = EncodedDataset::new(1, 1, vec![0]).unwrap();
        assert_eq!(cb.distortion(&data, &codes).unwrap(), 2.0);
        let exact = VectorSet::new(2, vec![0.0, 0.0]).unwrap();
        assert_eq!(cb.distortion(&exact, &codes).unwrap(), 0.0);
        let short = EncodedDataset::new(1, 1, vec![]).unwrap();
        assert!(cb.distortion(&data, &short).is_err());
    }

    #[test]
    fn reorder_examples() {
        let cb = random_codebook(3, 4, 3, 1);
        let (sorted, perm) = cb.reorder_by_variance();
        let (again, perm2) = sorted.reorder_by_variance();
        assert_eq!(perm2, vec![0, 1, 2]);
        assert_eq!(again, sorted);
        let v = sorted.variances();
        assert!(v.windows(2).all(|w| w[0] >= w[1]));
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(sorted.dictionary(new), cb.dictionary(old));
        }

        // Variances (1, 4): codewords ±1 and ±2 along one axis.
        let cb = Codebook::new(2, 2, 1, vec![-1.0, 1.0, -2.0, 2.0]).unwrap();
        assert_eq!(cb.variances(), vec![1.0, 4.0]);
        let (sorted, perm) = cb.reorder_by_variance();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(sorted.order(), &[1, 0]);
    }

    #[test]
    fn cross_table_examples() {
        let cb = Codebook::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = CrossProductTable::new(&cb);
        assert_eq!(t.get(0, 0, 1, 0), 0.0);
        let cb = Codebook::new(2, 1, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let t = CrossProductTable::new(&cb);
        assert_eq!(t.get(0, 0, 1, 0), 2.0);
        assert_eq!(t.norm(1, 0), 2.0);

        let cb = random_codebook(4, 5, 6, 2);
        let t = CrossProductTable::new(&cb);
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    continue;
                }
                for i in 0..5 {
                    for j in 0..5 {
                        let naive: f64 = cb
                            .codeword(a, i)
                            .iter()
                            .zip(cb.codeword(b, j))
                            .map(|(&x, &y)| x as f64 * y as f64)
                            .sum();
                        assert!((t.get(a, i, b, j) - naive).abs() < 1e-9);
                        assert_eq!(t.get(a, i, b, j), t.get(b, j, a, i));
                    }
                }
            }
        }
    }

    #[test]
    fn pair_numbering_round_trips() {
        for m in 1..7 {
            let cb = Codebook::zeros(m, 1, 1).unwrap();
            let t = CrossProductTable::new(&cb);
            let mut idx = 0;
            for a in 0..m {
                for b in a + 1..m {
                    assert_eq!(t.pair_index(a, b), idx);
                    assert_eq!(pair_of(m, idx), (a, b));
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn single_dictionary_is_nearest_codeword() {
        let cb = random_codebook(1, 16, 4, 3);
        let t = CrossProductTable::new(&cb);
        let data = generate_synthetic(50, 4, SyntheticMode::Uniform, 3).unwrap();
        for x in data.rows() {
            let want = (0..16u16)
                .min_by(|&a, &b| naive_error(&cb, x, &[a]).total_cmp(&naive_error(&cb, x, &[b])))
                .unwrap();
            for beam in [1, 3, 16] {
                let e = encode_multipath(&cb, &t, x, beam).unwrap();
                assert_eq!(e.code, vec![want]);
                assert!((e.error - naive_error(&cb, x, &[want])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_beam_matches_exhaustive() {
        let cb = random_codebook(2, 4, 4, 4);
        let t = CrossProductTable::new(&cb);
        let data = generate_synthetic(100, 4, SyntheticMode::Uniform, 4).unwrap();
        let codes = all_codes(2, 4);
        for x in data.rows() {
            let best = codes
                .iter()
                .map(|c| (naive_error(&cb, x, c), c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
                .unwrap();
            let e = encode_multipath(&cb, &t, x, 4).unwrap();
            assert!((e.error - best.0).abs() <= 1e-9 * best.0.max(1.0));
            assert_eq!(&e.code, best.1);
        }
    }

    #[test]
    fn encode_reports_true_error() {
        let cb = random_codebook(4, 8, 16, 5);
        let t = CrossProductTable::new(&cb);
        let data = generate_synthetic(20, 16, SyntheticMode::Uniform, 5).unwrap();
        for x in data.rows() {
            let e = encode_multipath(&cb, &t, x, 5).unwrap();
            assert!((e.error - naive_error(&cb, x, &e.code)).abs() < 1e-9 * e.error.max(1.0));
        }
        assert!(encode_multipath(&cb, &t, &[0.0; 3], 5).is_err());
        assert!(encode_multipath(&cb, &t, data.row(0), 0).is_err());
    }

    #[test]
    fn ties_prefer_smaller_code() {
        // Duplicate codewords: every code sharing the same vectors ties.
        let cb = Codebook::new(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let t = CrossProductTable::new(&cb);
        for beam in 1..=4 {
            assert_eq!(encode_multipath(&cb, &t, &[1.0], beam).unwrap().code, vec![0, 0]);
        }
    }

    #[test]
    fn encoder_vector_op_budget() {
        if !counters::ENABLED {
            return;
        }
        let cb = random_codebook(4, 8, 16, 6);
        let t = CrossProductTable::new(&cb);
        let x = vec![0.5f32; 16];
        counters::reset();
        encode_multipath(&cb, &t, &x, 7).unwrap();
        assert_eq!(counters::vector_ops(), 4 * 8 + 1);
    }

    #[test]
    fn encode_dataset_matches_per_vector() {
        let cb = random_codebook(3, 8, 6, 7);
        let t = CrossProductTable::new(&cb);
        let data = generate_synthetic(40, 6, SyntheticMode::Uniform, 7).unwrap();
        let (enc, errs) = encode_dataset_with_errors(&cb, &t, &data, 4).unwrap();
        for (i, x) in data.rows().enumerate() {
            let e = encode_multipath(&cb, &t, x, 4).unwrap();
            assert_eq!(enc.code(i), e.code.as_slice());
            assert_eq!(errs[i], e.error);
        }
        let mean = errs.iter().sum::<f64>() / 40.0;
        assert!((cb.distortion(&data, &enc).unwrap() - mean).abs() < 1e-9);
        assert_eq!(enc.codebook_hash(), Some(&cb.content_hash()));
    }

    #[test]
    fn adc_examples() {
        let cb = random_codebook(3, 4, 5, 8);
        let q = cb.codeword(1, 2).to_vec();
        let t = AdcTable::new(&cb, &q).unwrap();
        assert_eq!(t.get(1, 2), 0.0);
        let z = AdcTable::new(&cb, &[0.0; 5]).unwrap();
        for m in 0..3 {
            for k in 0..4 {
                let n: f32 = cb.codeword(m, k).iter().map(|v| v * v).sum();
                assert!((z.get(m, k) - n).abs() < 1e-6);
            }
        }
        assert!(AdcTable::new(&cb, &[0.0; 4]).is_err());

        let cross = CrossProductTable::new(&cb);
        let code = [1u16, 3, 0];
        let q = cb.reconstruct(&code).unwrap();
        let t = AdcTable::new(&cb, &q).unwrap();
        assert!(adc_distance(&t, &cross, &code).abs() < 1e-5);

        let one = random_codebook(1, 4, 5, 9);
        let c1 = CrossProductTable::new(&one);
        let t1 = AdcTable::new(&one, &[0.3; 5]).unwrap();
        assert_eq!(adc_distance(&t1, &c1, &[2]), t1.get(0, 2) as f64);
    }

    #[test]
    fn exhaustive_search_examples() {
        let cb = random_codebook(2, 4, 3, 10);
        let cross = CrossProductTable::new(&cb);
        let enc = EncodedDataset::new(2, 4, vec![0, 1, 2, 3, 3, 3]).unwrap().with_ids(vec![7, 8, 9]).unwrap();
        let q = cb.reconstruct(&[2, 3]).unwrap();
        let res = exhaustive_adc_search(&cb, &cross, &enc, &q, 3).unwrap();
        assert_eq!(res[0].id, 8);
        assert!(res[0].distance.abs() < 1e-5);
        assert!(exhaustive_adc_search(&cb, &cross, &enc, &q, 4).is_err());

        let single = EncodedDataset::new(2, 4, vec![1, 1]).unwrap();
        assert_eq!(exhaustive_adc_search(&cb, &cross, &single, &q, 1).unwrap()[0].id, 0);

        // Same code for every row: ties resolve by id.
        let same = EncodedDataset::new(2, 4, vec![1, 1, 1, 1, 1, 1]).unwrap();
        let ids: Vec<u64> = exhaustive_adc_search(&cb, &cross, &same, &q, 3).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let cb = random_codebook(2, 4, 3, 11);
        let other = random_codebook(2, 4, 3, 12);
        let cross = CrossProductTable::new(&cb);
        let data = generate_synthetic(5, 3, SyntheticMode::Uniform, 1).unwrap();
        let enc = encode_dataset(&cb, &cross, &data, 2).unwrap();
        assert!(matches!(
            exhaustive_adc_search(&other, &cross, &enc, data.row(0), 1),
            Err(Error::CodebookMismatch(_))
        ));
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = random_codebook(3, 5, 4, 13);
        let (cb, _) = cb.reorder_by_variance();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"HCLB");
        assert_eq!(bytes.len(), 20 + 3 * 5 * 4 * 4 + 3 * 4);
        let back = Codebook::read_from(&bytes[..]).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.content_hash(), cb.content_hash());

        assert!(matches!(Codebook::read_from(&b"HCLX"[..]), Err(Error::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Codebook::read_from(&v2[..]), Err(Error::UnsupportedVersion { .. })));
        assert!(matches!(
            Codebook::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Codebook::read_from(&trailing[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn encoded_file_round_trip() {
        for k in [4usize, 300] {
            let codes: Vec<u16> = (0..30).map(|i| (i * 37 % k) as u16).collect();
            let plain = EncodedDataset::new(3, k, codes).unwrap();
            let full = plain
                .clone()
                .with_ids((100..110).collect())
                .unwrap()
                .with_codebook_hash(Some([7u8; 32]));
            for enc in [plain, full] {
                let mut bytes = Vec::new();
                enc.write_to(&mut bytes).unwrap();
                assert_eq!(&bytes[..4], b"HCLE");
                assert_eq!(bytes[24] as usize, if k <= 256 { 1 } else { 2 });
                let back = EncodedDataset::read_from(&bytes[..]).unwrap();
                assert_eq!(back, enc);
                let mut again = Vec::new();
                back.write_to(&mut again).unwrap();
                assert_eq!(again, bytes);
            }
        }
        let enc = EncodedDataset::new(2, 4, vec![0, 1, 2, 3]).unwrap();
        let mut bytes = Vec::new();
        enc.write_to(&mut bytes).unwrap();
        *bytes.last_mut().unwrap() = 9;
        assert!(matches!(EncodedDataset::read_from(&bytes[..]), Err(Error::Format { .. })));
        bytes.pop();
        assert!(matches!(EncodedDataset::read_from(&bytes[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn permute_parts_follows_codebook() {
        let cb = random_codebook(3, 4, 5, 14);
        let cross = CrossProductTable::new(&cb);
        let data = generate_synthetic(20, 5, SyntheticMode::Uniform, 14).unwrap();
        let enc = encode_dataset(&cb, &cross, &data, 3).unwrap();
        let before = cb.distortion(&data, &enc).unwrap();
        let (sorted, perm) = cb.reorder_by_variance();
        let remapped = enc.permute_parts(&perm).unwrap();
        let after = sorted.distortion(&data, &remapped).unwrap();
        assert!((before - after).abs() < 1e-9);
    }
}
