use super::*;
use crate::data::{Cohort, DiagnosisCode, SplitPart};

/// Records `(hospital, codes, sociodem, outcome)`; codes map to category `code % 3`.
fn dataset(rows: &[(usize, &[u32], [f64; 2], u8)], hospitals: usize) -> Dataset {
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (h, codes, z, y))| AdmissionRecord {
            admission_id: i as u64,
            hospital: *h,
            primary: DiagnosisCode(codes[0]),
            secondaries: codes[1..].iter().map(|&c| DiagnosisCode(c)).collect(),
            sociodem: z.to_vec(),
            outcome: *y,
            cohort: Cohort::CR,
        })
        .collect();
    Dataset {
        records,
        hospitals,
        vocab_size: 6,
        sociodem_dim: 2,
        n_categories: 3,
        category_map: (0..6).map(|c| c % 3).collect(),
        max_secondaries: 5,
        ground_truth: None,
        pretrained_embeddings: None,
    }
}

fn all_train(n: usize) -> SplitAssignment {
    SplitAssignment { labels: vec![SplitPart::Train; n], warnings: Vec::new() }
}

fn rates_dataset() -> Dataset {
    // hospital 0: 1 in 10 readmitted, hospital 1: 2 in 10
    let mut rows = Vec::new();
    for i in 0..10 {
        rows.push((0, &[0u32][..], [0.0, 0.0], (i < 1) as u8));
        rows.push((1, &[1u32][..], [0.0, 0.0], (i < 2) as u8));
    }
    dataset(&rows, 2)
}

fn unweighted() -> SolverConfig {
    SolverConfig { class_weighting: false, tol: 1e-9, ..Default::default() }
}

fn mixed_dataset() -> Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let codes: Vec<Vec<u32>> = (0..400)
        .map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..6)).collect())
        .collect();
    let mut rows = Vec::new();
    for c in &codes {
        let h = rng.random_range(0..4);
        let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let eta = -1.0 + 0.3 * h as f64 + if c.iter().any(|&v| v % 3 == 1) { 0.8 } else { 0.0 } + 0.5 * z[0];
        let y = rng.random_bool(sigmoid(eta)) as u8;
        rows.push((h, c.as_slice(), z, y));
    }
    dataset(&rows, 4)
}

#[test]
fn soft_threshold_on_grid() {
    for i in -200..=200 {
        let b = i as f64 * 0.05;
        for j in 0..=40 {
            let t = j as f64 * 0.1;
            let expected = if b.abs() <= t { 0.0 } else { b.signum() * (b.abs() - t) };
            assert_eq!(soft_threshold(b, t), expected, "b={b} t={t}");
        }
    }
    assert_eq!(soft_threshold(-0.3, 0.0), -0.3);
}

#[test]
fn predict_examples() {
    let ds = dataset(&[(0, &[1, 2], [0.5, -1.0], 0)], 2);
    let mut p = LinearParams::zeros(2, 3, 2);
    assert_eq!(predict_linear(&p, &ds, &[0]).unwrap(), vec![0.5]);
    p.bias = logit(0.13);
    assert!((predict_linear(&p, &ds, &[0]).unwrap()[0] - 0.13).abs() < 1e-15);
    p = LinearParams { bias: 0.2, alpha: vec![-0.4, 0.9], beta: vec![0.1, 0.3, -0.7, 1.5, 2.0], n_categories: 3, sociodem_dim: 2 };
    let hand = sigmoid(0.2 - 0.4 + 0.3 - 0.7 + 1.5 * 0.5 + 2.0 * -1.0);
    assert!((predict_linear(&p, &ds, &[0]).unwrap()[0] - hand).abs() < 1e-12);
    let wrong = LinearParams::zeros(2, 4, 2);
    assert!(matches!(predict_linear(&wrong, &ds, &[0]), Err(Error::Shape(_))));
}

#[test]
fn hospital_mean_recovers_bernoulli_rates() {
    let ds = rates_dataset();
    let fit = fit_hospital_mean(&ds, &all_train(ds.len()), 0.0, &unweighted()).unwrap();
    assert!(fit.report.converged, "{:?} {:?}", fit.report.grad_map_norm, fit.report.iterations);
    assert!(fit.params.beta.iter().all(|&b| b == 0.0));
    let p = predict_linear(&fit.params, &ds, &[0, 1]).unwrap();
    assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] - 0.2).abs() < 1e-6, "{p:?}");
}

#[test]
fn single_rate_half_gives_even_odds() {
    let rows: Vec<_> = (0..6).map(|i| (0, &[0u32][..], [0.0, 0.0], (i % 2) as u8)).collect();
    let ds = dataset(&rows, 1);
    let fit = fit_hospital_mean(&ds, &all_train(6), 0.0, &unweighted()).unwrap();
    assert!((predict_linear(&fit.params, &ds, &[0]).unwrap()[0] - 0.5).abs() < 1e-9);
}

#[test]
fn heavy_l2_shrinks_alpha() {
    let ds = rates_dataset();
    let fit = fit_hospital_mean(&ds, &all_train(ds.len()), 1e3, &unweighted()).unwrap();
    assert!(fit.params.alpha.iter().all(|a| a.abs() < 0.01), "{:?}", fit.params.alpha);
    let p = predict_linear(&fit.params, &ds, &[0, 1]).unwrap();
    assert!(p.iter().all(|v| (v - 0.15).abs() < 0.005));
}

#[test]
fn objective_never_increases() {
    let ds = mixed_dataset();
    let fit = fit_hglm(&ds, &all_train(ds.len()), 1e-3, &SolverConfig::default()).unwrap();
    assert!(fit.report.converged);
    assert!(fit.report.trace.windows(2).all(|w| w[1] <= w[0]));
    let enet = fit_elastic_net(&ds, &all_train(ds.len()), 5.0, 1e-3, &SolverConfig::default()).unwrap();
    assert!(enet.report.trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn hglm_beats_hospital_mean_on_training_loss() {
    let ds = mixed_dataset();
    let split = all_train(ds.len());
    let opts = SolverConfig::default();
    let hm = fit_hospital_mean(&ds, &split, 1e-4, &opts).unwrap();
    let hg = fit_hglm(&ds, &split, 1e-4, &opts).unwrap();
    assert!(hg.report.objective <= hm.report.objective);
    let pen = PenaltyConfig { lambda1: 0.0, lambda2: 1e-4 };
    let clamped = training_objective(LinearKind::Hglm, &ds, &split, &hm.params, pen, &opts).unwrap();
    assert!((clamped - hm.report.objective).abs() < 1e-15);
}

#[test]
fn elastic_net_without_l1_is_hglm() {
    let ds = mixed_dataset();
    let split = all_train(ds.len());
    let opts = SolverConfig::default();
    let hg = fit_hglm(&ds, &split, 1e-5, &opts).unwrap();
    let en = fit_elastic_net(&ds, &split, 0.0, 1e-5, &opts).unwrap();
    assert_eq!(hg.params, en.params);
}

#[test]
fn strong_l1_zeroes_beta_and_moderate_l1_sparsifies() {
    let ds = mixed_dataset();
    let split = all_train(ds.len());
    let opts = SolverConfig::default();
    let huge = fit_elastic_net(&ds, &split, 1e6, 1e-5, &opts).unwrap();
    assert!(huge.params.beta.iter().all(|&b| b == 0.0));
    assert!(huge.params.alpha.iter().any(|&a| a != 0.0));
    let dense = fit_elastic_net(&ds, &split, 0.0, 1e-5, &opts).unwrap();
    let sparse = fit_elastic_net(&ds, &split, 15.0, 1e-5, &opts).unwrap();
    assert!(sparse.params.nonzero_beta() < dense.params.nonzero_beta());
}

#[test]
fn hospital_without_training_records_warns() {
    let mut rows: Vec<_> = (0..8).map(|i| (0, &[0u32][..], [0.0, 0.0], (i % 3 == 0) as u8)).collect();
    rows.push((1, &[1u32][..], [0.0, 0.0], 1));
    let ds = dataset(&rows, 2);
    let mut split = all_train(ds.len());
    split.labels[8] = SplitPart::Test;
    let fit = fit_hglm(&ds, &split, 0.0, &SolverConfig::default()).unwrap();
    assert_eq!(fit.params.alpha[1], 0.0);
    assert!(fit.report.warnings.iter().any(|w| w.contains("without training records")));
}

#[test]
fn grid_keeps_best_validation_auc() {
    let ds = mixed_dataset();
    let mut split = all_train(ds.len());
    for i in (0..ds.len()).step_by(4) {
        split.labels[i] = SplitPart::Validation;
    }
    let out = linear_grid_search(LinearKind::ElasticNet, &ds, &split, &elastic_net_grid(), &SolverConfig::default()).unwrap();
    assert_eq!(out.rows.len(), 16);
    let best = out.rows.iter().filter_map(|r| r.val_roc_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.rows[out.best_index].val_roc_auc, Some(best));
    assert_eq!(out.rows.iter().position(|r| r.val_roc_auc == Some(best)), Some(out.best_index));
    assert_eq!(hglm_grid().len(), 4);
}

#[test]
fn checkpoint_round_trip_checks_feature_map() {
    let ds = mixed_dataset();
    let fit = fit_hglm(&ds, &all_train(ds.len()), 1e-3, &SolverConfig::default()).unwrap();
    let ckpt = LinearCheckpoint::new(&fit, &ds);
    let back: LinearCheckpoint = serde_json::from_str(&serde_json::to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.params_for(&ds).unwrap(), &fit.params);
    let mut other = ds.clone();
    other.category_map[0] = 2;
    assert!(back.params_for(&other).is_err());
}
