use annealvq::annealing::{train_from_scratch, TrainConfig};
use annealvq::atree::{build_atree, SearchParams};
use annealvq::codebook::{Codebook, CrossProductTable, EncodedDataset};
use annealvq::data_io::{brute_force_knn, generate_synthetic, SyntheticMode, VectorSet};
use annealvq::diagnostics::{evaluate, locality_profile, mi_matrix_with, Estimator, SearchIndex};
use serde::{Deserialize, Serialize};

/// Size caps so a page cannot freeze the tab for minutes.
const MAX_POINTS: usize = 50_000;
const MAX_LATTICE: usize = 4096;

fn err(e: annealvq::Error) -> String {
    e.to_string()
}

fn check_size(n: usize) -> Result<(), String> {
    if n > MAX_POINTS {
        return Err(format!("at most {MAX_POINTS} points (got {n})"));
    }
    Ok(())
}

fn mixture(n: usize, d: usize, clusters: usize, spread: f64, seed: u64) -> Result<VectorSet, String> {
    generate_synthetic(n, d, SyntheticMode::GaussianMixture { clusters, spread: spread as f32 }, seed).map_err(err)
}

fn config(m: usize, k: usize, sweeps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        sweeps,
        seed,
        ..TrainConfig::new(m, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub n: usize,
    pub clusters: usize,
    pub spread: f64,
    pub m: usize,
    pub k: usize,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            n: 2000,
            clusters: 12,
            spread: 0.04,
            m: 2,
            k: 8,
            sweeps: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepView {
    pub sweep: usize,
    pub dictionary: usize,
    pub distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingView {
    pub points: Vec<[f32; 2]>,
    /// `dictionaries[m][k]`.
    pub dictionaries: Vec<Vec<[f32; 2]>>,
    /// Every reachable reconstruction, empty when there are more than 4096.
    pub lattice: Vec<[f32; 2]>,
    /// Reconstruction of each point.
    pub reconstructions: Vec<[f32; 2]>,
    pub steps: Vec<StepView>,
    pub distortion: f64,
}

fn pair(v: &[f32]) -> [f32; 2] {
    [v[0], v[1]]
}

fn lattice(cb: &Codebook) -> Vec<[f32; 2]> {
    let (m, k) = (cb.num_dicts(), cb.num_codewords());
    let total = (k as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if total > MAX_LATTICE as u128 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut code = vec![0u16; m];
    for _ in 0..total {
        out.push(pair(&cb.reconstruct(&code).expect("valid code")));
        for part in code.iter_mut().rev() {
            *part += 1;
            if (*part as usize) < k {
                break;
            }
            *part = 0;
        }
    }
    out
}

pub fn train_2d(p: &TrainParams) -> Result<TrainingView, String> {
    check_size(p.n)?;
    let data = mixture(p.n, 2, p.clusters, p.spread, p.seed)?;
    let trained = train_from_scratch(&data, &config(p.m, p.k, p.sweeps, p.seed)).map_err(err)?;
    let cb = &trained.codebook;
    let reconstructions = (0..trained.codes.len())
        .map(|i| cb.reconstruct(trained.codes.code(i)).map(|r| pair(&r)))
        .collect::<annealvq::Result<Vec<_>>>()
        .map_err(err)?;
    Ok(TrainingView {
        points: data.rows().map(pair).collect(),
        dictionaries: (0..cb.num_dicts())
            .map(|m| (0..cb.num_codewords()).map(|k| pair(cb.codeword(m, k))).collect())
            .collect(),
        lattice: lattice(cb),
        reconstructions,
        steps: trained
            .report
            .steps
            .iter()
            .map(|s| StepView {
                sweep: s.sweep,
                dictionary: s.dictionary,
                distortion: s.distortion,
            })
            .collect(),
        distortion: trained.report.final_distortion().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    pub n: usize,
    pub queries: usize,
    pub d: usize,
    pub clusters: usize,
    pub spread: f64,
    pub m: usize,
    pub k: usize,
    pub sweeps: usize,
    pub ls: f64,
    pub l0s: Vec<usize>,
    pub r: usize,
    pub seed: u64,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            n: 10_000,
            queries: 100,
            d: 16,
            clusters: 32,
            spread: 0.2,
            m: 4,
            k: 16,
            sweeps: 1,
            ls: 2.0,
            l0s: vec![1, 2, 4, 8, 16, 32],
            r: 100,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub l0: usize,
    pub recall: Vec<(usize, f64)>,
    pub mean_nodes_visited: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveView {
    pub node_count: usize,
    pub exhaustive_recall: Vec<(usize, f64)>,
    pub exhaustive_latency_ms: f64,
    pub points: Vec<CurvePoint>,
    pub distortion: f64,
}

pub fn recall_curve(p: &CurveParams) -> Result<CurveView, String> {
    check_size(p.n + p.queries)?;
    if p.queries == 0 || p.l0s.is_empty() {
        return Err("need at least one query and one L0 value".into());
    }
    let all = mixture(p.n + p.queries, p.d, p.clusters, p.spread, p.seed)?;
    let base = all.select(&(0..p.n).collect::<Vec<_>>());
    let queries = all.select(&(p.n..p.n + p.queries).collect::<Vec<_>>());
    let trained = train_from_scratch(&base, &config(p.m, p.k, p.sweeps, p.seed)).map_err(err)?;
    let cb = &trained.codebook;
    let cross = CrossProductTable::new(cb);
    let codes = trained.codes.clone().with_codebook_hash(Some(cb.content_hash()));
    let tree = build_atree(&codes, cb, &cross).map_err(err)?;
    let r = p.r.min(p.n).max(1);
    let gt = brute_force_knn(&base, &queries, 1).map_err(err)?;
    let exhaustive = evaluate(
        &SearchIndex::Exhaustive {
            codebook: cb,
            cross: &cross,
            encoded: &codes,
        },
        &queries,
        &gt,
        r,
    )
    .map_err(err)?;
    let mut points = Vec::with_capacity(p.l0s.len());
    for &l0 in &p.l0s {
        let index = SearchIndex::ATree {
            tree: &tree,
            codebook: cb,
            params: SearchParams::geometric(l0, p.ls, r),
        };
        let rep = evaluate(&index, &queries, &gt, r).map_err(err)?;
        points.push(CurvePoint {
            l0,
            recall: rep.recall,
            mean_nodes_visited: rep.mean_nodes_visited.unwrap_or(0.0),
            mean_latency_ms: rep.mean_latency_ms,
        });
    }
    Ok(CurveView {
        node_count: tree.node_count(),
        exhaustive_recall: exhaustive.recall,
        exhaustive_latency_ms: exhaustive.mean_latency_ms,
        points,
        distortion: trained.report.final_distortion().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapParams {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub spread: f64,
    pub m: usize,
    pub k: usize,
    pub sweeps: usize,
    pub anchors: usize,
    pub neighborhood: usize,
    pub seed: u64,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        Self {
            n: 5000,
            d: 16,
            clusters: 32,
            spread: 0.2,
            m: 6,
            k: 16,
            sweeps: 2,
            anchors: 200,
            neighborhood: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapView {
    pub m: usize,
    /// Row-major `m × m` mutual information over all codes, in bits.
    pub global: Vec<f64>,
    /// The same over the pooled anchor neighborhoods.
    pub local: Vec<f64>,
    /// `H(I_m | I_1..I_{m-1})` over the pooled neighborhoods.
    pub conditional: Vec<f64>,
    pub max_bits: f64,
}

pub fn heatmap_of(codes: &EncodedDataset, data: &VectorSet, anchors: usize, neighborhood: usize) -> Result<HeatmapView, String> {
    let global = mi_matrix_with(codes, usize::MAX, 0, Estimator::PlugIn).map_err(err)?;
    let n = data.len();
    let anchors = anchors.clamp(1, n);
    let step = n / anchors;
    let anchor_set = data.select(&(0..anchors).map(|i| i * step).collect::<Vec<_>>());
    let gt = brute_force_knn(data, &anchor_set, neighborhood.min(n)).map_err(err)?;
    let profile = locality_profile(codes, &gt, neighborhood.min(n), false).map_err(err)?;
    Ok(HeatmapView {
        m: codes.num_dicts(),
        global: global.values,
        local: profile.mi.values,
        conditional: profile.conditional,
        max_bits: (codes.num_codewords() as f64).log2(),
    })
}

pub fn mi_heatmap(p: &HeatmapParams) -> Result<HeatmapView, String> {
    check_size(p.n)?;
    let data = mixture(p.n, p.d, p.clusters, p.spread, p.seed)?;
    let trained = train_from_scratch(&data, &config(p.m, p.k, p.sweeps, p.seed)).map_err(err)?;
    heatmap_of(&trained.codes, &data, p.anchors, p.neighborhood)
}
