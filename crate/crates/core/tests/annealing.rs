mod common;

use annealvq::annealing::{heat_up, train_from_scratch, train_online, TrainConfig};
use annealvq::clustering::{improved_kmeans, quantization_error, Centroids, DimensionSchedule};
use annealvq::codebook::{encode_dataset, encode_dataset_with_errors, Codebook, CrossProductTable, EncodedDataset};
use proptest::prelude::*;

fn config(m: usize, k: usize, sweeps: usize) -> TrainConfig {
    TrainConfig {
        sweeps,
        rel_tol: 0.0,
        ..TrainConfig::new(m, k)
    }
}

fn mean_error(cb: &Codebook, data: &annealvq::data_io::VectorSet) -> f64 {
    let t = CrossProductTable::new(cb);
    let (_, errors) = encode_dataset_with_errors(cb, &t, data, 10).unwrap();
    errors.iter().sum::<f64>() / errors.len() as f64
}

#[test]
fn da_dominates_greedy_rvq() {
    let data = common::mixture(10_000, 32, 64, 0.2, 21);
    let trained = train_from_scratch(&data, &config(4, 16, 5)).unwrap();
    let da = trained.report.final_distortion().unwrap();
    let rvq = common::rvq_distortion(&data, 4, 16, 30, 21);
    assert!(da <= rvq, "DA {da} vs RVQ {rvq}");
    assert!(common::rel_close(da, trained.codebook.distortion(&data, &trained.codes).unwrap(), 1e-9));
}

#[test]
fn first_three_sweeps_strictly_improve() {
    let data = common::mixture(10_000, 32, 64, 0.2, 22);
    let trained = train_from_scratch(&data, &config(4, 16, 3)).unwrap();
    let per_sweep: Vec<f64> = (0..=3)
        .map(|s| trained.report.steps.iter().rfind(|st| st.sweep == s).unwrap().distortion)
        .collect();
    assert!(per_sweep.windows(2).all(|w| w[1] < w[0]), "{per_sweep:?}");
    let all: Vec<f64> = trained.report.steps.iter().map(|s| s.distortion).collect();
    assert!(all.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)), "{all:?}");
}

#[test]
fn training_is_byte_reproducible() {
    let data = common::mixture(3000, 16, 32, 0.2, 23);
    let a = train_from_scratch(&data, &config(3, 16, 2)).unwrap();
    let b = train_from_scratch(&data, &config(3, 16, 2)).unwrap();
    assert_eq!(a.codebook.to_bytes(), b.codebook.to_bytes());
    assert_eq!(a.codes, b.codes);
}

#[test]
fn single_dictionary_is_improved_kmeans() {
    let data = common::mixture(2000, 8, 16, 0.1, 24);
    let trained = train_from_scratch(&data, &config(1, 16, 3)).unwrap();
    let words = Centroids::new(16, 8, trained.codebook.dictionary(0).to_vec()).unwrap();
    let kmeans_err = quantization_error(&data, &words).unwrap();
    let reported = trained.report.final_distortion().unwrap();
    assert!(common::rel_close(reported, kmeans_err, 1e-5), "{reported} vs {kmeans_err}");
    let direct = improved_kmeans(&data, &Centroids::zeros(16, 8), &DimensionSchedule::geometric(8, 10), 30).unwrap();
    assert!(kmeans_err <= quantization_error(&data, &direct).unwrap() * (1.0 + 1e-9));
}

#[test]
fn online_batch_adapts_to_drift() {
    let (batch1, _) = common::mixture_split(5000, 0, 16, 32, 0.1, 25);
    let (batch2, held_out) = common::mixture_split(5000, 2000, 16, 32, 0.1, 26);
    let cfg = config(4, 16, 3);
    let first = train_from_scratch(&batch1, &cfg).unwrap().codebook;
    let (second, report) = train_online(&first, &batch2, &cfg).unwrap();
    assert!(report.steps.windows(2).all(|w| w[1].distortion <= w[0].distortion * (1.0 + 1e-6)));
    let (before, after) = (mean_error(&first, &held_out), mean_error(&second, &held_out));
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn heat_up_cost_is_dictionary_cost_plus_constant() {
    let data = common::random_vectors(300, 6, 27);
    let cb = common::random_codebook(3, 8, 6, 28);
    let t = CrossProductTable::new(&cb);
    let codes = encode_dataset(&cb, &t, &data, 4).unwrap();
    for m in 0..3 {
        let xp = heat_up(&data, &cb, &codes, m).unwrap();
        let mut offsets = Vec::new();
        for trial in 0..3u64 {
            let mut replaced = cb.clone();
            let fresh = common::random_codebook(1, 8, 6, 100 + trial);
            replaced.set_dictionary(m, fresh.dictionary(0)).unwrap();
            let full = replaced.distortion(&data, &codes).unwrap();
            let part: f64 = xp
                .rows()
                .enumerate()
                .map(|(i, x)| common::sq_dist(x, replaced.codeword(m, codes.code(i)[m] as usize)))
                .sum::<f64>()
                / data.len() as f64;
            offsets.push(full - part);
        }
        assert!(offsets.iter().all(|o| (o - offsets[0]).abs() < 1e-4), "{offsets:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn heat_up_adds_back_to_input(m in 1usize..5, k in 1usize..6, d in 1usize..8, seed in any::<u64>()) {
        let data = common::random_vectors(20, d, seed);
        let cb = common::random_codebook(m, k, d, seed ^ 1);
        let mut r = common::rng(seed ^ 2);
        use rand::Rng;
        let codes = EncodedDataset::new(m, k, (0..20 * m).map(|_| r.random_range(0..k as u16)).collect()).unwrap();
        for part in 0..m {
            let xp = heat_up(&data, &cb, &codes, part).unwrap();
            for i in 0..20 {
                let code = codes.code(i);
                for j in 0..d {
                    let others: f64 = (0..m).filter(|&o| o != part).map(|o| cb.codeword(o, code[o] as usize)[j] as f64).sum();
                    prop_assert!((xp.row(i)[j] as f64 + others - data.row(i)[j] as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn training_log_never_increases(m in 1usize..4, k in 2usize..6, seed in 0u64..1000) {
        let data = common::random_vectors(200, 5, seed);
        let trained = train_from_scratch(&data, &TrainConfig { sweeps: 3, seed, ..TrainConfig::new(m, k) }).unwrap();
        let d: Vec<f64> = trained.report.steps.iter().map(|s| s.distortion).collect();
        prop_assert!(d.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)), "{d:?}");
    }
}
