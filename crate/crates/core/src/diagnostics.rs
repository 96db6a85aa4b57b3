//! Entropy diagnostics of code parts and recall/latency evaluation.
//!
//! All entropies are in bits.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::atree::{search_with_table, ATree, SearchParams};
use crate::codebook::{exhaustive_adc_search, AdcTable, Codebook, CrossProductTable, EncodedDataset};
use crate::data_io::{GroundTruth, VectorSet};
use crate::{seeds, Error, Result};

/// Default row cap for [`mi_matrix`].
pub const DEFAULT_SAMPLE_CAP: usize = 100_000;
/// Version tag of the JSON evaluation report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Empirical frequencies.
    PlugIn,
    /// Grassberger's bias-corrected estimator.
    Grassberger,
}

/// Digamma function for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

fn grassberger_g(n: u64) -> f64 {
    let n = n as f64;
    let sign = if (n as u64).is_multiple_of(2) { 1.0 } else { -1.0 };
    digamma(n) + 0.5 * sign * (digamma((n + 1.0) / 2.0) - digamma(n / 2.0))
}

/// Entropy in bits of a histogram given as counts.
pub fn entropy_from_counts(counts: &[u64], estimator: Estimator) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let nats = match estimator {
        Estimator::PlugIn => {
            n.ln() - counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 * (c as f64).ln()).sum::<f64>() / n
        }
        Estimator::Grassberger => {
            let mut memo: HashMap<u64, f64> = HashMap::new();
            let s: f64 = counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| c as f64 * *memo.entry(c).or_insert_with(|| grassberger_g(c)))
                .sum();
            n.ln() - s / n
        }
    };
    nats / std::f64::consts::LN_2
}

/// Run lengths of equal values in a sorted slice.
fn run_counts<T: PartialEq>(sorted: &[T]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        out.push((j - i) as u64);
        i = j;
    }
    out
}

fn key_entropy(mut keys: Vec<u64>, estimator: Estimator) -> f64 {
    keys.sort_unstable();
    entropy_from_counts(&run_counts(&keys), estimator)
}

/// Self-information on the diagonal, mutual information off it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiMatrix {
    pub m: usize,
    pub values: Vec<f64>,
    pub samples: usize,
    pub estimator: Estimator,
}

impl MiMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.m + b]
    }

    /// Grid with a header row and column of part indices.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend((0..self.m).map(|i| i.to_string()));
        out.write_record(&header).map_err(csv_err)?;
        for a in 0..self.m {
            let mut row = vec![a.to_string()];
            row.extend((0..self.m).map(|b| self.get(a, b).to_string()));
            out.write_record(&row).map_err(csv_err)?;
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

/// MI matrix over rows of codes (`rows.len() / m` samples).
fn mi_of_rows(rows: &[u16], m: usize, k: usize, estimator: Estimator) -> MiMatrix {
    let n = rows.len() / m;
    let part = |a: usize| -> Vec<u64> { (0..n).map(|i| rows[i * m + a] as u64).collect() };
    let log_k = (k as f64).log2();
    let diag: Vec<f64> = (0..m).map(|a| key_entropy(part(a), estimator).clamp(0.0, log_k)).collect();
    let mut values = vec![0f64; m * m];
    for a in 0..m {
        values[a * m + a] = diag[a];
        for b in a + 1..m {
            let joint: Vec<u64> = (0..n)
                .map(|i| rows[i * m + a] as u64 * k as u64 + rows[i * m + b] as u64)
                .collect();
            let h_ab = key_entropy(joint, estimator);
            let mi = (diag[a] + diag[b] - h_ab).clamp(0.0, diag[a].min(diag[b]));
            values[a * m + b] = mi;
            values[b * m + a] = mi;
        }
    }
    MiMatrix {
        m,
        values,
        samples: n,
        estimator,
    }
}

/// Mutual information between code parts on a seeded uniform subsample of at
/// most `sample_cap` rows, using the bias-corrected estimator.
pub fn mi_matrix(encoded: &EncodedDataset, sample_cap: usize, seed: u64) -> Result<MiMatrix> {
    mi_matrix_with(encoded, sample_cap, seed, Estimator::Grassberger)
}

pub fn mi_matrix_with(encoded: &EncodedDataset, sample_cap: usize, seed: u64, estimator: Estimator) -> Result<MiMatrix> {
    let n = encoded.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 encoded rows, got {n}")));
    }
    if sample_cap < 2 {
        return Err(Error::invalid("sample cap must be at least 2"));
    }
    let m = encoded.num_dicts();
    let rows: Vec<u16> = if n > sample_cap {
        let mut rng = seeds::rng(seed, seeds::EVAL);
        let mut picked = index::sample(&mut rng, n, sample_cap).into_vec();
        picked.sort_unstable();
        picked.iter().flat_map(|&i| encoded.code(i).iter().copied()).collect()
    } else {
        encoded.as_slice().to_vec()
    };
    Ok(mi_of_rows(&rows, m, encoded.num_codewords(), estimator))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityProfile {
    /// `L_m = H(I_m | I_1..I_{m-1})` over the pooled neighborhood population.
    pub conditional: Vec<f64>,
    /// `H(I_1..I_m)` for each prefix length `m`.
    pub prefix_entropy: Vec<f64>,
    /// Plug-in MI matrix of the same population.
    pub mi: MiMatrix,
    pub anchors: usize,
    pub population: usize,
}

/// Conditional entropies of code parts within nearest-neighbor neighborhoods.
///
/// Every ground-truth row is an anchor. The codes of its first `neighborhood_k`
/// neighbors are pooled across anchors, and prefix entropies of the pooled rows
/// give `L_m` by the chain rule. With `self_join` the anchors are base vectors,
/// row `a` of the ground truth is base vector `a` and it is left out of its own
/// neighborhood.
pub fn locality_profile(
    encoded: &EncodedDataset,
    ground_truth: &GroundTruth,
    neighborhood_k: usize,
    self_join: bool,
) -> Result<LocalityProfile> {
    if neighborhood_k == 0 {
        return Err(Error::invalid("neighborhood size must be at least 1"));
    }
    let depth = ground_truth.depth();
    let needed = neighborhood_k + usize::from(self_join);
    if needed > depth {
        return Err(Error::invalid(format!(
            "neighborhood of {neighborhood_k} needs ground truth depth {needed}, have {depth}"
        )));
    }
    // Row position of every id.
    let position: HashMap<u64, usize> = (0..encoded.len()).map(|i| (encoded.id(i), i)).collect();
    let m = encoded.num_dicts();
    let mut rows: Vec<u16> = Vec::new();
    for a in 0..ground_truth.num_queries() {
        let mut taken = 0;
        for &id in ground_truth.ids(a) {
            if taken == neighborhood_k {
                break;
            }
            if self_join && id == a as u64 {
                continue;
            }
            let row = *position
                .get(&id)
                .ok_or_else(|| Error::invalid(format!("ground truth id {id} is not in the encoded set")))?;
            rows.extend_from_slice(encoded.code(row));
            taken += 1;
        }
    }
    let pop = rows.len() / m;
    if pop < 2 {
        return Err(Error::invalid("neighborhood population has fewer than 2 rows"));
    }
    let mut order: Vec<usize> = (0..pop).collect();
    order.sort_unstable_by(|&x, &y| rows[x * m..(x + 1) * m].cmp(&rows[y * m..(y + 1) * m]));
    let mut prefix_entropy = Vec::with_capacity(m);
    let mut conditional = Vec::with_capacity(m);
    let mut prev = 0.0;
    for len in 1..=m {
        let mut counts = Vec::new();
        let mut i = 0;
        while i < pop {
            let head = &rows[order[i] * m..order[i] * m + len];
            let mut j = i + 1;
            while j < pop && &rows[order[j] * m..order[j] * m + len] == head {
                j += 1;
            }
            counts.push((j - i) as u64);
            i = j;
        }
        let h = entropy_from_counts(&counts, Estimator::PlugIn);
        conditional.push((h - prev).max(0.0));
        prefix_entropy.push(h);
        prev = h;
    }
    Ok(LocalityProfile {
        conditional,
        prefix_entropy,
        mi: mi_of_rows(&rows, m, encoded.num_codewords(), Estimator::PlugIn),
        anchors: ground_truth.num_queries(),
        population: pop,
    })
}

/// The index under evaluation.
pub enum SearchIndex<'a> {
    Exhaustive {
        codebook: &'a Codebook,
        cross: &'a CrossProductTable,
        encoded: &'a EncodedDataset,
    },
    ATree {
        tree: &'a ATree,
        codebook: &'a Codebook,
        params: SearchParams,
    },
}

impl SearchIndex<'_> {
    fn name(&self) -> &'static str {
        match self {
            SearchIndex::Exhaustive { .. } => "exhaustive-adc",
            SearchIndex::ATree { .. } => "atree",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub index: String,
    pub queries: usize,
    pub r: usize,
    /// `(r, recall@r)` pairs for `r` in `{1, 10, 100, R}` up to `R`.
    pub recall: Vec<(usize, f64)>,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub distortion: Option<f64>,
    pub mean_nodes_visited: Option<f64>,
    pub max_nodes_visited: Option<usize>,
    pub node_count: Option<usize>,
    /// Parameter echo.
    pub params: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn recall_at(&self, r: usize) -> Option<f64> {
        self.recall.iter().find(|(x, _)| *x == r).map(|(_, v)| *v)
    }

    /// `metric,value` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "value"]).map_err(csv_err)?;
        let mut rows: Vec<(String, String)> = vec![
            ("schema_version".into(), self.schema_version.to_string()),
            ("index".into(), self.index.clone()),
            ("queries".into(), self.queries.to_string()),
            ("r".into(), self.r.to_string()),
        ];
        rows.extend(self.recall.iter().map(|(r, v)| (format!("recall@{r}"), v.to_string())));
        rows.push(("mean_latency_ms".into(), self.mean_latency_ms.to_string()));
        rows.push(("median_latency_ms".into(), self.median_latency_ms.to_string()));
        let opt = |v: Option<String>| v.unwrap_or_default();
        rows.push(("distortion".into(), opt(self.distortion.map(|v| v.to_string()))));
        rows.push(("mean_nodes_visited".into(), opt(self.mean_nodes_visited.map(|v| v.to_string()))));
        rows.push(("max_nodes_visited".into(), opt(self.max_nodes_visited.map(|v| v.to_string()))));
        rows.push(("node_count".into(), opt(self.node_count.map(|v| v.to_string()))));
        rows.extend(self.params.iter().map(|(k, v)| (format!("param.{k}"), v.clone())));
        for (k, v) in rows {
            out.write_record([k, v]).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fraction of queries whose true nearest neighbor is among the first `r` returned ids.
pub fn recall_at(results: &[Vec<u64>], ground_truth: &GroundTruth, r: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .enumerate()
        .filter(|(q, ids)| {
            let truth = ground_truth.ids(*q)[0];
            ids.iter().take(r).any(|&id| id == truth)
        })
        .count();
    hits as f64 / results.len() as f64
}

/// Runs every query through `index` one at a time, timing each, and scores
/// recall against the first ground-truth neighbor.
pub fn evaluate(index: &SearchIndex<'_>, queries: &VectorSet, ground_truth: &GroundTruth, r: usize) -> Result<EvalReport> {
    if ground_truth.num_queries() != queries.len() {
        return Err(Error::invalid(format!(
            "ground truth covers {} queries but {} were given",
            ground_truth.num_queries(),
            queries.len()
        )));
    }
    if ground_truth.depth() == 0 {
        return Err(Error::invalid("ground truth has no neighbors"));
    }
    if r == 0 {
        return Err(Error::invalid("R must be at least 1"));
    }
    let mut latencies = Vec::with_capacity(queries.len());
    let mut results = Vec::with_capacity(queries.len());
    let mut visited = Vec::new();
    let budgets = match index {
        SearchIndex::ATree { tree, codebook, params } => {
            tree.check_codebook(codebook)?;
            Some(params.layer_budgets(tree.num_dicts())?)
        }
        SearchIndex::Exhaustive { encoded, codebook, .. } => {
            encoded.check_codebook(codebook)?;
            None
        }
    };
    for q in queries.rows() {
        let t0 = Instant::now();
        let ids: Vec<u64> = match index {
            SearchIndex::Exhaustive {
                codebook,
                cross,
                encoded,
            } => exhaustive_adc_search(codebook, cross, encoded, q, r.min(encoded.len()))?
                .iter()
                .map(|n| n.id)
                .collect(),
            SearchIndex::ATree { tree, codebook, .. } => {
                let table = AdcTable::new(codebook, q)?;
                let out = search_with_table(tree, &table, budgets.as_deref().expect("tree budgets"), r);
                visited.push(out.stats.nodes_visited);
                out.neighbors.iter().map(|n| n.id).collect()
            }
        };
        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
        results.push(ids);
    }
    let mut cutoffs: Vec<usize> = [1, 10, 100].into_iter().filter(|&c| c <= r).collect();
    if !cutoffs.contains(&r) {
        cutoffs.push(r);
    }
    let recall = cutoffs.iter().map(|&c| (c, recall_at(&results, ground_truth, c))).collect();
    let mean_latency_ms = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let median_latency_ms = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let mut params = BTreeMap::new();
    let (mean_nodes_visited, max_nodes_visited, node_count) = match index {
        SearchIndex::ATree { tree, params: p, .. } => {
            params.insert("budgets".into(), format!("{:?}", budgets.as_deref().unwrap_or_default()));
            match &p.budgets {
                crate::atree::Budgets::Geometric { l0, ls } => {
                    params.insert("l0".into(), l0.to_string());
                    params.insert("ls".into(), ls.to_string());
                }
                crate::atree::Budgets::Fixed(_) => {}
                crate::atree::Budgets::Unbounded => {
                    params.insert("unbounded".into(), "true".into());
                }
            }
            let mean = if visited.is_empty() {
                0.0
            } else {
                visited.iter().sum::<usize>() as f64 / visited.len() as f64
            };
            (Some(mean), visited.iter().copied().max(), Some(tree.node_count()))
        }
        SearchIndex::Exhaustive { .. } => (None, None, None),
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        index: index.name().to_string(),
        queries: queries.len(),
        r,
        recall,
        mean_latency_ms,
        median_latency_ms,
        distortion: None,
        mean_nodes_visited,
        max_nodes_visited,
        node_count,
        params,
    })
}
