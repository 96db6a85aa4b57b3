//! Dictionary annealing: fit one dictionary at a time against the residue left by
//! all the others, then re-encode.
//!
//! "Heating up" dictionary `m` forms `x' = x − Σ_{j≠m} c_j(i_j(x))`; "cooling down"
//! refits dictionary `m` to `{x'}` with [`improved_kmeans`] warm-started from its
//! current codewords.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::clustering::{improved_kmeans, Centroids, DimensionSchedule, DEFAULT_MAX_ITERS, DEFAULT_STAGES};
use crate::codebook::{encode_dataset_with_errors, Codebook, CrossProductTable, EncodedDataset, MAX_K};
use crate::data_io::VectorSet;
use crate::meta::Meta;
use crate::{parallel, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m: usize,
    pub k: usize,
    /// Beam width used for every re-encode.
    pub beam: usize,
    /// Number of stages `I` in the dimension schedule of the cool-down k-means.
    pub schedule_stages: usize,
    /// Lloyd iteration budget per schedule stage.
    pub kmeans_iters: usize,
    /// Maximum number of full sweeps over the dictionaries.
    pub sweeps: usize,
    /// Stop once a sweep improves distortion by less than this fraction.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 8,
            k: 256,
            beam: 10,
            schedule_stages: DEFAULT_STAGES,
            kmeans_iters: DEFAULT_MAX_ITERS,
            sweeps: 10,
            rel_tol: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.k > MAX_K {
            return Err(Error::invalid(format!(
                "M and K must be at least 1 and K at most {MAX_K} (got M={}, K={})",
                self.m, self.k
            )));
        }
        if self.beam == 0 || self.schedule_stages == 0 {
            return Err(Error::invalid("beam width and schedule stages must be at least 1"));
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return Err(Error::invalid(format!("rel_tol must be >= 0 (got {})", self.rel_tol)));
        }
        Ok(())
    }

    pub fn schedule(&self, d: usize) -> DimensionSchedule {
        DimensionSchedule::geometric(d, self.schedule_stages)
    }

    /// Key/value echo of the configuration.
    pub fn to_meta(&self) -> Meta {
        let mut meta = Meta::new();
        meta.push("m", self.m);
        meta.push("k", self.k);
        meta.push("beam", self.beam);
        meta.push("schedule_stages", self.schedule_stages);
        meta.push("kmeans_iters", self.kmeans_iters);
        meta.push("sweeps", self.sweeps);
        meta.push("rel_tol", self.rel_tol);
        meta.push("seed", self.seed);
        meta
    }
}

/// Distortion after one dictionary update. Sweep 0 is the initial pass (growth
/// from zero dictionaries, or the first encode of an online batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub sweep: usize,
    pub dictionary: usize,
    pub distortion: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<TrainStep>,
}

impl TrainReport {
    pub fn final_distortion(&self) -> Option<f64> {
        self.steps.last().map(|s| s.distortion)
    }

    /// Completed sweeps, not counting sweep 0.
    pub fn sweeps(&self) -> usize {
        self.steps.last().map_or(0, |s| s.sweep)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invariant(format!("csv serialization failed: {e}"))
}

fn check_codes(data: &VectorSet, codebook: &Codebook, codes: &EncodedDataset) -> Result<()> {
    if data.len() != codes.len() {
        return Err(Error::invalid(format!("{} vectors but {} codes", data.len(), codes.len())));
    }
    if codes.num_dicts() != codebook.num_dicts() || codes.num_codewords() != codebook.num_codewords() {
        return Err(Error::CodebookMismatch("codes do not fit the codebook shape".into()));
    }
    if !data.is_empty() && data.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: data.dim(),
        });
    }
    Ok(())
}

/// `x − Σ_{j<parts, j≠skip} c_j(code_j)` for every row, accumulated in f64.
fn residue(data: &VectorSet, codebook: &Codebook, codes: &[u16], m_total: usize, parts: usize, skip: usize) -> VectorSet {
    let d = codebook.dim();
    let mut out = vec![0f32; data.len() * d];
    parallel::for_each_chunk_mut(&mut out, d, |i, row| {
        let code = &codes[i * m_total..(i + 1) * m_total];
        let mut acc: Vec<f64> = data.row(i).iter().map(|&v| v as f64).collect();
        for (j, &c) in code.iter().enumerate().take(parts) {
            if j == skip {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(codebook.codeword(j, c as usize)) {
                *a -= v as f64;
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    VectorSet::new(d, out).expect("residue of finite data is finite")
}

/// The intermediate set `x' = x − Σ_{j≠m} c_j(i_j(x))`.
pub fn heat_up(data: &VectorSet, codebook: &Codebook, codes: &EncodedDataset, m: usize) -> Result<VectorSet> {
    check_codes(data, codebook, codes)?;
    if m >= codebook.num_dicts() {
        return Err(Error::invalid(format!("dictionary {m} out of range")));
    }
    if data.is_empty() {
        return Ok(VectorSet::empty(codebook.dim()));
    }
    Ok(residue(data, codebook, codes.as_slice(), codebook.num_dicts(), codebook.num_dicts(), m))
}

/// Refits dictionary `m` to the intermediate set and returns the nearest new
/// codeword of every intermediate vector.
pub fn cool_down(intermediate: &VectorSet, codebook: &mut Codebook, m: usize, config: &TrainConfig) -> Result<Vec<u32>> {
    if m >= codebook.num_dicts() {
        return Err(Error::invalid(format!("dictionary {m} out of range")));
    }
    let (k, d) = (codebook.num_codewords(), codebook.dim());
    let init = Centroids::new(k, d, codebook.dictionary(m).to_vec())?;
    let fitted = improved_kmeans(intermediate, &init, &config.schedule(d), config.kmeans_iters)?;
    let assignment = fitted.assignment().to_vec();
    codebook.set_dictionary(m, fitted.as_slice())?;
    Ok(assignment)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

struct State {
    codebook: Codebook,
    codes: Vec<u16>,
    errors: Vec<f64>,
}

impl State {
    fn distortion(&self) -> f64 {
        mean(&self.errors)
    }

    fn direct_errors(&self, data: &VectorSet) -> Vec<f64> {
        let m = self.codebook.num_dicts();
        parallel::map_indexed(data.len(), |i| {
            self.codebook.squared_error_unchecked(data.row(i), &self.codes[i * m..(i + 1) * m])
        })
    }

    fn into_encoded(self) -> Result<EncodedDataset> {
        let hash = self.codebook.content_hash();
        Ok(EncodedDataset::new(self.codebook.num_dicts(), self.codebook.num_codewords(), self.codes)?
            .with_codebook_hash(Some(hash)))
    }
}

/// Heat up, cool down and re-encode dictionary `m`. Each vector keeps whichever
/// of its refit code and its fresh beam-search code reconstructs better, so the
/// distortion cannot increase.
fn anneal_dictionary(data: &VectorSet, state: &mut State, m: usize, config: &TrainConfig) -> Result<()> {
    let m_count = state.codebook.num_dicts();
    let x_prime = residue(data, &state.codebook, &state.codes, m_count, m_count, m);
    let assignment = cool_down(&x_prime, &mut state.codebook, m, config)?;
    for (i, &a) in assignment.iter().enumerate() {
        state.codes[i * m_count + m] = a as u16;
    }
    let incumbent = state.direct_errors(data);

    let cross = CrossProductTable::new(&state.codebook);
    let (fresh, _) = encode_dataset_with_errors(&state.codebook, &cross, data, config.beam)?;
    let fresh_errors = parallel::map_indexed(data.len(), |i| {
        state.codebook.squared_error_unchecked(data.row(i), fresh.code(i))
    });
    for i in 0..data.len() {
        if fresh_errors[i] < incumbent[i] {
            state.codes[i * m_count..(i + 1) * m_count].copy_from_slice(fresh.code(i));
            state.errors[i] = fresh_errors[i];
        } else {
            state.errors[i] = incumbent[i];
        }
    }
    Ok(())
}

/// Runs sweeps until the budget is spent or a sweep improves less than `rel_tol`.
fn run_sweeps(
    data: &VectorSet,
    state: &mut State,
    config: &TrainConfig,
    report: &mut TrainReport,
    start: Instant,
    observer: &mut dyn FnMut(&Codebook, &TrainStep) -> Result<()>,
) -> Result<()> {
    for sweep in 1..=config.sweeps {
        let before = state.distortion();
        for m in 0..state.codebook.num_dicts() {
            anneal_dictionary(data, state, m, config)?;
            report.steps.push(TrainStep {
                sweep,
                dictionary: m,
                distortion: state.distortion(),
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        observer(&state.codebook, report.steps.last().expect("at least one dictionary"))?;
        let after = state.distortion();
        if before <= 0.0 || (before - after) / before < config.rel_tol {
            break;
        }
    }
    Ok(())
}

/// One pass of heat-up, cool-down and re-encode over every dictionary.
pub fn da_sweep(
    data: &VectorSet,
    codebook: &Codebook,
    codes: &EncodedDataset,
    config: &TrainConfig,
) -> Result<(Codebook, EncodedDataset, Vec<TrainStep>)> {
    config.validate()?;
    check_codes(data, codebook, codes)?;
    if data.len() < codebook.num_codewords() {
        return Err(Error::invalid(format!(
            "need at least K={} vectors, got {}",
            codebook.num_codewords(),
            data.len()
        )));
    }
    let start = Instant::now();
    let mut state = State {
        codebook: codebook.clone(),
        codes: codes.as_slice().to_vec(),
        errors: Vec::new(),
    };
    state.errors = state.direct_errors(data);
    let mut steps = Vec::with_capacity(codebook.num_dicts());
    for m in 0..codebook.num_dicts() {
        anneal_dictionary(data, &mut state, m, config)?;
        steps.push(TrainStep {
            sweep: 1,
            dictionary: m,
            distortion: state.distortion(),
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    let codebook = state.codebook.clone();
    Ok((codebook, state.into_encoded()?, steps))
}

/// Output of offline training.
#[derive(Debug, Clone)]
pub struct Trained {
    pub codebook: Codebook,
    pub codes: EncodedDataset,
    pub report: TrainReport,
}

pub fn train_from_scratch(data: &VectorSet, config: &TrainConfig) -> Result<Trained> {
    train_from_scratch_observed(data, config, &mut |_, _| Ok(()))
}

/// Learns `M` dictionaries starting from all zeros.
///
/// The growth pass fits dictionary `m` to the residue of the first `m` and
/// assigns each vector its nearest new codeword, keeping earlier codes fixed.
/// Sweeps with full beam re-encoding follow. The result is reordered by
/// dictionary variance and the codes remapped. `observer` sees the codebook
/// after the growth pass and after every sweep.
pub fn train_from_scratch_observed(
    data: &VectorSet,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Codebook, &TrainStep) -> Result<()>,
) -> Result<Trained> {
    config.validate()?;
    if data.len() < config.k {
        return Err(Error::invalid(format!(
            "need at least K={} training vectors, got {}",
            config.k,
            data.len()
        )));
    }
    let (n, d, m_count) = (data.len(), data.dim(), config.m);
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut state = State {
        codebook: Codebook::zeros(m_count, config.k, d)?,
        codes: vec![0; n * m_count],
        errors: Vec::new(),
    };

    for m in 0..m_count {
        let x_prime = residue(data, &state.codebook, &state.codes, m_count, m, usize::MAX);
        let assignment = cool_down(&x_prime, &mut state.codebook, m, config)?;
        for (i, &a) in assignment.iter().enumerate() {
            state.codes[i * m_count + m] = a as u16;
        }
        // Dictionaries after `m` are still zero, so the full-code error is the
        // error of the greedy prefix.
        state.errors = state.direct_errors(data);
        report.steps.push(TrainStep {
            sweep: 0,
            dictionary: m,
            distortion: state.distortion(),
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    observer(&state.codebook, report.steps.last().expect("M >= 1"))?;
    run_sweeps(data, &mut state, config, &mut report, start, observer)?;

    let (sorted, perm) = state.codebook.reorder_by_variance();
    let codes = EncodedDataset::new(m_count, config.k, state.codes)?.permute_parts(&perm)?;
    let codes = codes.with_codebook_hash(Some(sorted.content_hash()));
    Ok(Trained {
        codebook: sorted,
        codes,
        report,
    })
}

pub fn train_online(codebook: &Codebook, batch: &VectorSet, config: &TrainConfig) -> Result<(Codebook, TrainReport)> {
    train_online_observed(codebook, batch, config, &mut |_, _| Ok(()))
}

/// Refits an existing codebook to a new batch: encode the batch, then sweep over
/// it. Dictionary order is left unchanged.
pub fn train_online_observed(
    codebook: &Codebook,
    batch: &VectorSet,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Codebook, &TrainStep) -> Result<()>,
) -> Result<(Codebook, TrainReport)> {
    config.validate()?;
    if batch.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: batch.dim(),
        });
    }
    if batch.len() < codebook.num_codewords() {
        return Err(Error::invalid(format!(
            "an online batch needs at least K={} vectors, got {}",
            codebook.num_codewords(),
            batch.len()
        )));
    }
    let start = Instant::now();
    let cross = CrossProductTable::new(codebook);
    let (codes, _) = encode_dataset_with_errors(codebook, &cross, batch, config.beam)?;
    let mut state = State {
        codebook: codebook.clone(),
        codes: codes.as_slice().to_vec(),
        errors: Vec::new(),
    };
    state.errors = state.direct_errors(batch);
    let mut report = TrainReport {
        steps: vec![TrainStep {
            sweep: 0,
            dictionary: 0,
            distortion: state.distortion(),
            elapsed_secs: start.elapsed().as_secs_f64(),
        }],
    };
    run_sweeps(batch, &mut state, config, &mut report, start, observer)?;
    Ok((state.codebook, report))
}

/// Writes `path` as a codebook file and `path.meta` with the step and configuration.
pub fn write_checkpoint(path: &Path, codebook: &Codebook, step: &TrainStep, config: &TrainConfig) -> Result<()> {
    codebook.save(path)?;
    let mut meta = Meta::new();
    meta.push("sweep", step.sweep);
    meta.push("distortion", step.distortion);
    meta.push("elapsed_secs", step.elapsed_secs);
    meta.extend(config.to_meta());
    meta.write(crate::meta::sidecar_path(path))
}
