//! Statistical checks on the samplers and a pre-registered accuracy band.

use ncbnn::dataset::{sample_behaviour_dataset_with_stats, sample_rhombus_dataset, ClassBalance};
use ncbnn::experiment::{self, test_data_seed, train_data_seed, ExperimentConfig, Task};
use ncbnn::mlp::{self, Architecture};

/// Exact volume fraction of `[-1,1]^10` whose table entries are all
/// non-negative.
const ACCEPTANCE_RATE: f64 = 31.0 / 2835.0;

#[test]
fn rejection_rate_matches_exact_volume() {
    let (_, stats) =
        sample_behaviour_dataset_with_stats(11_500, 17, ClassBalance::Natural).unwrap();
    assert!(stats.draws >= 1_000_000, "only {} draws", stats.draws);
    let se = (ACCEPTANCE_RATE * (1.0 - ACCEPTANCE_RATE) / stats.draws as f64).sqrt();
    let z = (stats.rate() - ACCEPTANCE_RATE) / se;
    assert!(z.abs() < 5.0, "rate {} z = {z:.2}", stats.rate());
}

#[test]
fn rhombus_classes_are_balanced() {
    let n = 200_000;
    let ds = sample_rhombus_dataset(n, None, 5).unwrap();
    let inside = ds.class_counts()[1] as f64 / n as f64;
    let se = (0.25 / n as f64).sqrt();
    assert!(
        ((inside - 0.5) / se).abs() < 5.0,
        "inside fraction {inside}"
    );
}

#[test]
fn baseline_accuracy_band() {
    let cfg = ExperimentConfig::default();
    let (arch, n) = cfg.task_model().unwrap();
    assert_eq!(arch, Architecture::new(10, vec![64, 32, 8, 2]).unwrap());
    assert_eq!(n, 500);
    let train =
        experiment::task_dataset(&cfg, Task::Kcbs, 500, train_data_seed(0, 500), None).unwrap();
    let test =
        experiment::task_dataset(&cfg, Task::Kcbs, 4000, test_data_seed(0, 4000), None).unwrap();
    let fitted = experiment::fit_models(&cfg, &arch, &train, 0, "band", false).unwrap();
    let acc = mlp::accuracy(&fitted.nn, &test).unwrap();
    assert!((0.92..=0.98).contains(&acc), "accuracy {acc}");
}

#[test]
fn rhombus_is_learnable_by_small_net() {
    let cfg = ExperimentConfig::default();
    let arch = Architecture::new(2, vec![8, 4, 2]).unwrap();
    let test = sample_rhombus_dataset(4000, None, test_data_seed(0, 4000)).unwrap();
    for base in 0..3 {
        let train = sample_rhombus_dataset(2000, None, train_data_seed(base, 2000)).unwrap();
        let (nn, _) = experiment::train_best_of(&cfg, &arch, &train, base).unwrap();
        let acc = mlp::accuracy(&nn, &test).unwrap();
        assert!(acc > 0.9, "base {base}: accuracy {acc}");
    }
}
