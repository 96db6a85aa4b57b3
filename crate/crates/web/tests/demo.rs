use annealvq_web::demo::{mi_heatmap, recall_curve, train_2d, CurveParams, HeatmapParams, TrainParams};

#[test]
fn training_view_is_consistent() {
    let p = TrainParams::default();
    let v = train_2d(&p).unwrap();
    assert_eq!(v.points.len(), p.n);
    assert_eq!(v.reconstructions.len(), p.n);
    assert_eq!(v.dictionaries.len(), p.m);
    assert_eq!(v.lattice.len(), p.k.pow(p.m as u32));
    let mse: f64 = v
        .points
        .iter()
        .zip(&v.reconstructions)
        .map(|(a, b)| ((a[0] - b[0]) as f64).powi(2) + ((a[1] - b[1]) as f64).powi(2))
        .sum::<f64>()
        / p.n as f64;
    assert!((mse - v.distortion).abs() <= 1e-5 * v.distortion.max(1e-9));
    assert!(v.steps.windows(2).all(|w| w[1].distortion <= w[0].distortion * (1.0 + 1e-6)));
}

#[test]
fn large_lattice_is_omitted() {
    let v = train_2d(&TrainParams { m: 4, k: 16, n: 500, sweeps: 1, ..Default::default() }).unwrap();
    assert!(v.lattice.is_empty());
}

#[test]
fn curve_is_monotone_in_l0() {
    let p = CurveParams { n: 3000, queries: 50, ..Default::default() };
    let v = recall_curve(&p).unwrap();
    assert_eq!(v.points.len(), p.l0s.len());
    let at = |r: &Vec<(usize, f64)>| r.iter().find(|(c, _)| *c == 100).unwrap().1;
    assert!(v.points.windows(2).all(|w| at(&w[1].recall) >= at(&w[0].recall)));
    assert!(v.points.iter().all(|pt| pt.mean_nodes_visited <= v.node_count as f64));
    assert!(at(&v.exhaustive_recall) > 0.0);
}

#[test]
fn heatmap_is_symmetric_and_bounded() {
    let p = HeatmapParams { n: 2000, sweeps: 1, ..Default::default() };
    let v = mi_heatmap(&p).unwrap();
    assert_eq!(v.global.len(), p.m * p.m);
    for a in 0..p.m {
        for b in 0..p.m {
            assert_eq!(v.global[a * p.m + b], v.global[b * p.m + a]);
            assert!(v.global[a * p.m + b] <= v.max_bits + 1e-12);
            assert!(v.local[a * p.m + b] >= 0.0);
        }
    }
    assert_eq!(v.conditional.len(), p.m);
}

#[test]
fn oversized_requests_are_rejected() {
    assert!(train_2d(&TrainParams { n: 1_000_000, ..Default::default() }).is_err());
}

#[test]
fn json_entry_points_round_trip() {
    let out = annealvq_web::train_2d(r#"{"n": 300, "k": 4, "sweeps": 1}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 300);
    let defaults: serde_json::Value = serde_json::from_str(&annealvq_web::default_params()).unwrap();
    assert_eq!(defaults["recall_curve"]["m"], 4);
}
