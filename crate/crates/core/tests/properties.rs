use ncbnn::bayes::{leapfrog, GaussianTarget, LogDensity, PosteriorEnsemble};
use ncbnn::dataset::{
    format_dataset, parse_dataset, rhombus_label, sample_balanced_behaviour_dataset,
    sample_rhombus_dataset, split,
};
use ncbnn::mlp::{entropy, softmax, Architecture, MlpParams};
use ncbnn::ncycle::{
    behaviour_to_table, is_nondisturbing, kcbs_label, max_odd_parity_sum, min_table_entry_flat,
    Behaviour, ContextualityLabel, DEFAULT_TOL,
};
use ncbnn::uncertainty::{decompose, decompose_probs, nn_uncertainty};
use proptest::prelude::*;
use std::path::Path;

fn unit() -> impl Strategy<Value = f64> {
    -1.0f64..=1.0
}

fn flat_behaviour(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(unit(), 2 * n)
}

fn probability_vector(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-12;
        v.iter().map(|x| (x + 1e-12 / v.len() as f64) / s).collect()
    })
}

/// Brute force over all `2^n` sign vectors with an odd number of `-1`.
fn brute_force_max(correlators: &[f64]) -> f64 {
    let n = correlators.len();
    (0u32..1 << n)
        .filter(|m| m.count_ones() % 2 == 1)
        .map(|m| {
            (0..n)
                .map(|j| {
                    if m >> j & 1 == 1 {
                        -correlators[j]
                    } else {
                        correlators[j]
                    }
                })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn table_columns_sum_to_one(x in flat_behaviour(5)) {
        let t = behaviour_to_table(&Behaviour::from_flat(&x).unwrap());
        for col in t.columns() {
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_min_entry_matches_table(x in flat_behaviour(5)) {
        let b = Behaviour::from_flat(&x).unwrap();
        prop_assert_eq!(min_table_entry_flat(&x), behaviour_to_table(&b).min_entry());
    }

    #[test]
    fn closed_form_max_matches_enumeration(n in 3usize..9, seed in prop::collection::vec(unit(), 8)) {
        let c = &seed[..n];
        let fast = max_odd_parity_sum(c);
        prop_assert!((fast.value - brute_force_max(c)).abs() < 1e-12);
        let odd = fast.gamma.iter().filter(|&&g| g < 0).count() % 2 == 1;
        prop_assert!(odd);
        let achieved: f64 = fast.gamma.iter().zip(c).map(|(&g, &v)| f64::from(g) * v).sum();
        prop_assert!((achieved - fast.value).abs() < 1e-12);
    }

    #[test]
    fn mixtures_of_vertices_are_noncontextual(
        raw in prop::collection::vec(0.0f64..1.0, 32),
    ) {
        let vertices = ncbnn::ncycle::noncontextual_vertices(5).unwrap();
        let s: f64 = raw.iter().sum::<f64>().max(1e-9);
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let b = Behaviour::mixture(&w, &vertices).unwrap();
        prop_assert!(is_nondisturbing(&b, DEFAULT_TOL));
        prop_assert_eq!(kcbs_label(&b).unwrap(), ContextualityLabel::NonContextual);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-700.0f64..700.0, 2..6)) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.5).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounded_by_log_classes(p in probability_vector(4)) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
    }

    #[test]
    fn decomposition_identity_and_jensen(
        members in prop::collection::vec(probability_vector(3), 1..12),
    ) {
        let d = decompose_probs(&members).unwrap();
        prop_assert!((d.total - d.aleatoric - d.epistemic).abs() <= 1e-12);
        prop_assert!(d.epistemic >= 0.0);
    }

    #[test]
    fn single_member_ensemble_is_point_estimate(seed in any::<u64>(), x in prop::collection::vec(unit(), 3)) {
        let arch = Architecture::new(3, vec![5, 2]).unwrap();
        let mut rng = ncbnn::dataset::rng_from_seed(seed);
        let p = MlpParams::random_init(arch, 1.0, &mut rng);
        let ens = PosteriorEnsemble::from_members(vec![p.clone()]).unwrap();
        let a = decompose(&ens, &x).unwrap();
        let b = nn_uncertainty(&p, &x).unwrap();
        prop_assert_eq!(&a.probs, &b.probs);
        prop_assert_eq!(a.predicted, b.predicted);
        prop_assert_eq!(a.total, b.total);
        prop_assert_eq!(a.epistemic, 0.0);
    }

    #[test]
    fn leapfrog_is_reversible(
        q in prop::collection::vec(-2.0f64..2.0, 2),
        r in prop::collection::vec(-2.0f64..2.0, 2),
        steps in 1usize..40,
    ) {
        let target = GaussianTarget {
            mean: vec![0.5, -1.0],
            precision: vec![2.0, 0.6, 0.6, 1.0],
        };
        let grad = |x: &[f64], g: &mut [f64]| target.log_density_grad(x, g);
        let (q1, r1) = leapfrog(&q, &r, 0.1, steps, grad).unwrap();
        let back: Vec<f64> = r1.iter().map(|v| -v).collect();
        let (q2, r2) = leapfrog(&q1, &back, 0.1, steps, grad).unwrap();
        for i in 0..2 {
            prop_assert!((q2[i] - q[i]).abs() < 1e-10);
            prop_assert!((r2[i] + r[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn split_partitions_rows(n in 2usize..60, f in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = sample_rhombus_dataset(n, None, seed).unwrap();
        let (a, b) = split(&ds, f, seed).unwrap();
        prop_assert_eq!(a.len(), (n as f64 * f).floor() as usize);
        prop_assert_eq!(a.len() + b.len(), n);
        let mut all: Vec<String> = a.iter().chain(b.iter()).map(|(x, y)| format!("{x:?}{y}")).collect();
        let mut orig: Vec<String> = ds.iter().map(|(x, y)| format!("{x:?}{y}")).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn rhombus_file_round_trip(n in 1usize..40, seed in any::<u64>()) {
        let ds = sample_rhombus_dataset(n, None, seed).unwrap();
        let text = format_dataset(&ds);
        let back = parse_dataset(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
        for (x, y) in ds.iter() {
            prop_assert_eq!(rhombus_label(x), y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn label_invariant_under_relabelling(seed in any::<u64>(), k in 0usize..5) {
        let ds = sample_balanced_behaviour_dataset(2, seed).unwrap();
        for (x, _) in ds.iter() {
            let b = Behaviour::from_flat(x).unwrap();
            let label = kcbs_label(&b).unwrap();
            prop_assert_eq!(kcbs_label(&b.rotated(k)).unwrap(), label);
            prop_assert_eq!(kcbs_label(&b.sign_flipped()).unwrap(), label);
        }
    }

    #[test]
    fn balanced_rows_are_valid_and_labelled(seed in any::<u64>()) {
        let ds = sample_balanced_behaviour_dataset(20, seed).unwrap();
        prop_assert_eq!(ds.class_counts(), vec![10, 10]);
        for (x, y) in ds.iter() {
            let b = Behaviour::from_flat(x).unwrap();
            prop_assert!(is_nondisturbing(&b, DEFAULT_TOL));
            prop_assert_eq!(kcbs_label(&b).unwrap().class_index(), y);
        }
    }
}
