use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdfcil::data::digits;
use rdfcil::metrics::{
    accuracy, aggregate_groups, aggregate_runs, append_metrics_row, average_incremental, format_table, read_metrics,
    MeanStd, MetricsRow, RunReport,
};
use rdfcil::model::{BackboneConfig, IncrementalModel};
use rdfcil::protocol::{cumulative_test_view, split_equal};
use rdfcil::trainer::{evaluate_phase, Ablation};

fn report(seed: u64, accs: &[f64], ablation: Ablation) -> RunReport {
    RunReport::new(seed, "equal", accs.len(), ablation, accs.to_vec(), vec![1.0; accs.len()], "h").unwrap()
}

#[test]
fn streaming_accuracy_equals_counting_on_random_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let p: Vec<usize> = (0..1000).map(|_| r.random_range(0..10)).collect();
    let y: Vec<usize> = (0..1000).map(|_| r.random_range(0..10)).collect();
    let hits = p.iter().zip(&y).filter(|(a, b)| a == b).count();
    assert_eq!(accuracy(&p, &y).unwrap(), hits as f64 / 1000.0);
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&[1], &[1, 2]).is_err());
}

#[test]
fn evaluate_phase_equals_brute_force() {
    let ds = digits().unwrap();
    let s = split_equal(10, 5, 0).unwrap();
    let m = IncrementalModel::<f32>::new(&BackboneConfig::default(), ds.image_shape, 4, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let view = cumulative_test_view(&s, &ds, 2).unwrap();
    let (x, y) = view.all();
    let pred = m.predict(&x).unwrap();
    let hits = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    assert_eq!(evaluate_phase(&m, &s, &ds, 2).unwrap(), hits as f64 / y.len() as f64);
    assert!(evaluate_phase(&m, &s, &ds, 3).is_err());
}

#[test]
fn average_incremental_examples() {
    assert_eq!(average_incremental(&[1.0]).unwrap(), 1.0);
    assert!((average_incremental(&[0.5, 0.7, 0.9]).unwrap() - 0.7).abs() < 1e-15);
    assert!(average_incremental(&[]).is_err());
    assert!(average_incremental(&[1.2]).is_err());
}

#[test]
fn aggregation_uses_sample_std() {
    let rows: Vec<RunReport> = [0.50, 0.52, 0.54]
        .iter()
        .enumerate()
        .map(|(i, &a)| report(i as u64, &[0.9, a], Ablation::default()))
        .collect();
    let agg = aggregate_runs(&rows).unwrap();
    assert_eq!(agg.last.percent(), "52.00 ± 2.00");
    assert_eq!(agg.runs, 3);
    assert_eq!(agg.seeds, vec![0, 1, 2]);
    let same = vec![report(0, &[0.5, 0.4], Ablation::default()); 3];
    assert_eq!(aggregate_runs(&same).unwrap().last.std, Some(0.0));
    let single = aggregate_runs(&rows[..1]).unwrap();
    assert_eq!(single.last.std, None);
    assert_eq!(single.last.percent(), "50.00");
    assert_eq!(MeanStd::of(&[0.1, 0.3]).unwrap().mean, 0.2);
}

#[test]
fn mixed_configurations_are_rejected_but_grouped() {
    let a = report(0, &[0.9, 0.5], Ablation::default());
    let b = report(
        0,
        &[0.9, 0.4],
        Ablation {
            no_rkd: true,
            ..Ablation::default()
        },
    );
    assert!(aggregate_runs(&[a.clone(), b.clone()]).is_err());
    let groups = aggregate_groups(&[a.clone(), b.clone(), a]).unwrap();
    assert_eq!(groups.len(), 2);
    let t = format_table(&groups);
    assert!(t.contains("full") && t.contains("no_rkd"));
}

#[test]
fn metrics_csv_appends_and_tolerates_a_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.csv");
    let row = |i: usize| MetricsRow {
        phase: i,
        n_learned_classes: 2 * i,
        accuracy: 0.5,
        average_accuracy: 0.75,
        timestamp: "1.000".into(),
    };
    append_metrics_row(&p, &row(1)).unwrap();
    append_metrics_row(&p, &row(2)).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "phase,n_learned_classes,accuracy,average_accuracy,timestamp");
    assert_eq!(text.lines().count(), 3);
    std::fs::write(&p, format!("{}3,6,0.", text)).unwrap();
    assert_eq!(read_metrics(&p).unwrap(), vec![row(1), row(2)]);
}
