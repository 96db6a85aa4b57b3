//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use annealvq::codebook::Codebook;
use annealvq::data_io::{generate_synthetic, SyntheticMode, VectorSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vectors(n: usize, d: usize, seed: u64) -> VectorSet {
    let mut r = rng(seed);
    VectorSet::new(d, (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_codebook(m: usize, k: usize, d: usize, seed: u64) -> Codebook {
    let mut r = rng(seed);
    Codebook::new(m, k, d, (0..m * k * d).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn mixture(n: usize, d: usize, clusters: usize, spread: f32, seed: u64) -> VectorSet {
    generate_synthetic(n, d, SyntheticMode::GaussianMixture { clusters, spread }, seed).unwrap()
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Coordinate-wise sum of the selected codewords.
pub fn naive_reconstruct(cb: &Codebook, code: &[u16]) -> Vec<f64> {
    let mut out = vec![0.0; cb.dim()];
    for (m, &c) in code.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(cb.codeword(m, c as usize)) {
            *o += *v as f64;
        }
    }
    out
}

pub fn direct_error(cb: &Codebook, x: &[f32], code: &[u16]) -> f64 {
    naive_reconstruct(cb, code)
        .iter()
        .zip(x)
        .map(|(r, v)| (*v as f64 - r).powi(2))
        .sum()
}

/// Every code in lexicographic order.
pub fn all_codes(m: usize, k: usize) -> Vec<Vec<u16>> {
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

/// Exhaustive argmin of the reconstruction error; ties keep the first code in lexicographic order.
pub fn brute_force_encode(cb: &Codebook, x: &[f32]) -> (Vec<u16>, f64) {
    let mut best = (Vec::new(), f64::INFINITY);
    for code in all_codes(cb.num_dicts(), cb.num_codewords()) {
        let e = direct_error(cb, x, &code);
        if e < best.1 {
            best = (code, e);
        }
    }
    best
}

/// Plain Lloyd iterations started from `k` distinct random samples.
pub fn lloyd(data: &[Vec<f64>], k: usize, iters: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < k {
        let i = r.random_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    let mut centers: Vec<Vec<f64>> = picked.iter().map(|&i| data[i].clone()).collect();
    for _ in 0..iters {
        let assign: Vec<usize> = data.iter().map(|x| nearest(&centers, x).0).collect();
        let d = data[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

pub fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let e: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        if e < best.1 {
            best = (i, e);
        }
    }
    best
}

/// Greedy residual vector quantization: each stage clusters the residues left by
/// the previous ones and subtracts the nearest center. Returns the dictionaries
/// and the mean squared error.
pub fn rvq(data: &VectorSet, m: usize, k: usize, iters: usize, seed: u64) -> (Codebook, f64) {
    let mut r = rng(seed);
    let mut residues: Vec<Vec<f64>> = data.rows().map(|x| x.iter().map(|v| *v as f64).collect()).collect();
    let mut words = Vec::with_capacity(m * k * data.dim());
    for _ in 0..m {
        let centers = lloyd(&residues, k, iters, &mut r);
        for x in residues.iter_mut() {
            let (c, _) = nearest(&centers, x);
            for (v, cv) in x.iter_mut().zip(&centers[c]) {
                *v -= cv;
            }
        }
        words.extend(centers.iter().flatten().map(|v| *v as f32));
    }
    let err = residues.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / residues.len() as f64;
    (Codebook::new(m, k, data.dim(), words).unwrap(), err)
}

pub fn rvq_distortion(data: &VectorSet, m: usize, k: usize, iters: usize, seed: u64) -> f64 {
    rvq(data, m, k, iters, seed).1
}

/// Symmetric eigenvalues by cyclic Jacobi rotations, ascending.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Plug-in joint entropy in bits of the given rows.
pub fn plug_in_entropy<T: Ord + Clone>(rows: &[T]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for r in rows {
        *counts.entry(r.clone()).or_insert(0u64) += 1;
    }
    let n = rows.len() as f64;
    -counts.values().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

/// One mixture draw split into a base set of `n` rows and `nq` queries.
pub fn mixture_split(n: usize, nq: usize, d: usize, clusters: usize, spread: f32, seed: u64) -> (VectorSet, VectorSet) {
    let all = mixture(n + nq, d, clusters, spread, seed);
    (all.select(&(0..n).collect::<Vec<_>>()), all.select(&(n..n + nq).collect::<Vec<_>>()))
}
