//! Labelled datasets for the behaviour and rhombus tasks.
//!
//! All generators draw from ChaCha20 seeded with `seed_from_u64`, so a seed
//! reproduces the same rows on every platform.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ncycle::{
    format_real, kcbs_label, min_table_entry_flat, Behaviour, DEFAULT_TOL, KCBS_N,
};

/// Identifier of the generator behind every seeded stream in this crate.
pub const RNG_ALGORITHM: &str = "chacha20";

pub const TASK_KCBS: &str = "kcbs";
pub const TASK_RHOMBUS: &str = "rhombus";

/// Rejection sampling aborts when fewer than this fraction of draws survive.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-6;
const ACCEPTANCE_CHECK_AFTER: u64 = 1_000_000;

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: String,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub rng: String,
    /// Free-form generation parameters (kept out of the CSV header).
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        if let Some(f) = features.iter().find(|f| f.len() != meta.dim) {
            return Err(Error::DimensionMismatch {
                expected: meta.dim,
                got: f.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= meta.classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                meta.classes
            )));
        }
        Ok(Self {
            features,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn classes(&self) -> usize {
        self.meta.classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Concatenation of two datasets with the same shape.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.dim() != self.dim() || other.classes() != self.classes() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut out = self.clone();
        out.features.extend(other.features.iter().cloned());
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Per-class counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Draw statistics of the rejection sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectionStats {
    pub draws: u64,
    pub accepted: u64,
}

impl RejectionStats {
    pub fn rate(&self) -> f64 {
        self.accepted as f64 / self.draws as f64
    }
}

/// Class composition of a generated behaviour dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassBalance {
    /// Labels as they fall out of uniform sampling (about 0.7% contextual).
    Natural,
    /// Same uniform draws, but each class is filled to a quota of half the
    /// rows; surplus draws of a full class are discarded.
    #[default]
    Balanced,
}

impl ClassBalance {
    pub fn name(self) -> &'static str {
        match self {
            ClassBalance::Natural => "natural",
            ClassBalance::Balanced => "balanced",
        }
    }
}

/// Uniform draws from `[-1, 1]^10` kept iff non-disturbing, labelled by the
/// KCBS inequalities.
pub fn sample_behaviour_dataset(n_samples: usize, seed: u64) -> Result<LabeledDataset> {
    sample_behaviour_dataset_with_stats(n_samples, seed, ClassBalance::Natural).map(|(ds, _)| ds)
}

/// Like [`sample_behaviour_dataset`], with `ceil(n/2)` non-contextual and
/// `floor(n/2)` contextual rows in shuffled order.
pub fn sample_balanced_behaviour_dataset(n_samples: usize, seed: u64) -> Result<LabeledDataset> {
    sample_behaviour_dataset_with_stats(n_samples, seed, ClassBalance::Balanced).map(|(ds, _)| ds)
}

pub fn sample_behaviours(
    n_samples: usize,
    seed: u64,
    balance: ClassBalance,
) -> Result<LabeledDataset> {
    sample_behaviour_dataset_with_stats(n_samples, seed, balance).map(|(ds, _)| ds)
}

/// The rejection sampler behind the behaviour generators. `stats` counts
/// every uniform draw and every non-disturbing one, whether or not a class
/// quota kept it.
pub fn sample_behaviour_dataset_with_stats(
    n_samples: usize,
    seed: u64,
    balance: ClassBalance,
) -> Result<(LabeledDataset, RejectionStats)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let dim = 2 * KCBS_N;
    let quota = match balance {
        ClassBalance::Natural => [n_samples, n_samples],
        ClassBalance::Balanced => [n_samples - n_samples / 2, n_samples / 2],
    };
    let mut filled = [0usize; 2];
    let mut features = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    let mut stats = RejectionStats {
        draws: 0,
        accepted: 0,
    };
    let mut x = vec![0.0; dim];
    while features.len() < n_samples {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        stats.draws += 1;
        if min_table_entry_flat(&x) >= -DEFAULT_TOL {
            stats.accepted += 1;
            let label = kcbs_label(&Behaviour::from_flat(&x)?)?.class_index();
            if filled[label] < quota[label] {
                filled[label] += 1;
                labels.push(label);
                features.push(x.clone());
            }
        } else if stats.draws >= ACCEPTANCE_CHECK_AFTER && stats.rate() < MIN_ACCEPTANCE_RATE {
            return Err(Error::AcceptanceCollapse {
                rate: stats.rate(),
                draws: stats.draws,
            });
        }
    }
    if balance == ClassBalance::Balanced {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        features = order.iter().map(|&i| features[i].clone()).collect();
        labels = order.iter().map(|&i| labels[i]).collect();
    }
    let meta = DatasetMeta {
        task: TASK_KCBS.into(),
        dim,
        classes: 2,
        seed,
        rng: RNG_ALGORITHM.into(),
        params: BTreeMap::from([
            ("domain".into(), "[-1,1]^10".into()),
            ("balance".into(), balance.name().into()),
            ("n".into(), n_samples.to_string()),
            ("draws".into(), stats.draws.to_string()),
            ("nondisturbing".into(), stats.accepted.to_string()),
        ]),
    };
    Ok((LabeledDataset::new(features, labels, meta)?, stats))
}

/// Axis-aligned box `[lo, hi]` with a relative sampling density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Density inside the box relative to the density outside it.
    pub density_ratio: f64,
}

impl BiasSpec {
    /// The lower-left quadrant sampled 50 times more sparsely than the rest.
    pub fn lower_left_sparse() -> Self {
        Self {
            lo: [-1.0, -1.0],
            hi: [0.0, 0.0],
            density_ratio: 1.0 / 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density_ratio > 0.0 && self.density_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "density ratio must be positive, got {}",
                self.density_ratio
            )));
        }
        for k in 0..2 {
            if !(-1.0 <= self.lo[k] && self.lo[k] < self.hi[k] && self.hi[k] <= 1.0) {
                return Err(Error::InvalidArgument(
                    "bias box must be a non-empty box inside [-1,1]^2".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|k| self.lo[k] <= p[k] && p[k] <= self.hi[k])
    }

    /// Probability that one biased draw lands in the box.
    pub fn inside_probability(&self) -> f64 {
        let inside = self.area() * self.density_ratio;
        inside / (inside + (4.0 - self.area()))
    }

    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    /// The complement of the box in `[-1,1]^2` as up to four disjoint
    /// rectangles `(lo, hi)`.
    fn complement(&self) -> Vec<([f64; 2], [f64; 2])> {
        let [x0, y0] = self.lo;
        let [x1, y1] = self.hi;
        [
            ([-1.0, -1.0], [x0, 1.0]),
            ([x1, -1.0], [1.0, 1.0]),
            ([x0, -1.0], [x1, y0]),
            ([x0, y1], [x1, 1.0]),
        ]
        .into_iter()
        .filter(|(lo, hi)| hi[0] > lo[0] && hi[1] > lo[1])
        .collect()
    }
}

/// Class 0 inside the rhombus `|x| + |y| <= 1`, class 1 outside.
pub fn rhombus_label(p: &[f64]) -> usize {
    usize::from(p[0].abs() + p[1].abs() > 1.0)
}

pub fn sample_rhombus_dataset(
    n_samples: usize,
    bias: Option<&BiasSpec>,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    if let Some(b) = bias {
        b.validate()?;
    }
    let mut rng = rng_from_seed(seed);
    let uniform_in = |rng: &mut ChaCha20Rng, lo: [f64; 2], hi: [f64; 2]| {
        vec![
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
        ]
    };

    let mut features = Vec::with_capacity(n_samples);
    match bias {
        None => {
            for _ in 0..n_samples {
                features.push(uniform_in(&mut rng, [-1.0, -1.0], [1.0, 1.0]));
            }
        }
        Some(b) => {
            let p_inside = b.inside_probability();
            let pieces = b.complement();
            let areas: Vec<f64> = pieces
                .iter()
                .map(|(lo, hi)| (hi[0] - lo[0]) * (hi[1] - lo[1]))
                .collect();
            let outside_area: f64 = areas.iter().sum();
            for _ in 0..n_samples {
                let p = if rng.random::<f64>() < p_inside || pieces.is_empty() {
                    uniform_in(&mut rng, b.lo, b.hi)
                } else {
                    let mut u = rng.random::<f64>() * outside_area;
                    let mut k = 0;
                    while k + 1 < pieces.len() && u >= areas[k] {
                        u -= areas[k];
                        k += 1;
                    }
                    uniform_in(&mut rng, pieces[k].0, pieces[k].1)
                };
                features.push(p);
            }
        }
    }
    let labels = features.iter().map(|p| rhombus_label(p)).collect();
    let mut params = BTreeMap::from([("n".to_string(), n_samples.to_string())]);
    if let Some(b) = bias {
        params.insert(
            "bias".into(),
            format!(
                "box=[{},{}]x[{},{}] ratio={}",
                b.lo[0], b.hi[0], b.lo[1], b.hi[1], b.density_ratio
            ),
        );
    }
    let meta = DatasetMeta {
        task: TASK_RHOMBUS.into(),
        dim: 2,
        classes: 2,
        seed,
        rng: RNG_ALGORITHM.into(),
        params,
    };
    LabeledDataset::new(features, labels, meta)
}

/// Shuffled split into `floor(N f)` and `N - floor(N f)` rows.
pub fn split(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot split an empty dataset".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_train = (ds.len() as f64 * train_fraction).floor() as usize;
    Ok((ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..])))
}

pub fn format_dataset(ds: &LabeledDataset) -> String {
    let mut out = format!(
        "# task={} d={} C={} seed={} n={}\n",
        ds.meta.task,
        ds.dim(),
        ds.classes(),
        ds.meta.seed,
        ds.len()
    );
    for (x, y) in ds.iter() {
        for v in x {
            out.push_str(&format_real(*v));
            out.push(',');
        }
        writeln!(out, "{y}").unwrap();
    }
    out
}

pub fn write_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_dataset(ds)).map_err(|e| Error::io(path, e))
}

/// Sidecar JSON with the full metadata, including the generator identifier.
pub fn write_meta_json(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut meta = serde_json::to_value(&ds.meta).expect("meta serializes");
    meta["n"] = ds.len().into();
    meta["class_counts"] = serde_json::to_value(ds.class_counts()).expect("counts serialize");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<LabeledDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return LabeledDataset::new(
            Vec::new(),
            Vec::new(),
            DatasetMeta {
                task: String::new(),
                dim: 0,
                classes: 0,
                seed: 0,
                rng: RNG_ALGORITHM.into(),
                params: BTreeMap::new(),
            },
        );
    };
    let fields: BTreeMap<&str, &str> = header
        .strip_prefix('#')
        .ok_or_else(|| err(1, "missing '#' header".into()))?
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| err(1, format!("header lacks {key}=")))
    };
    let parse_num = |key: &str| -> Result<u64> {
        get(key)?
            .parse::<u64>()
            .map_err(|e| err(1, format!("bad {key}: {e}")))
    };
    let dim = parse_num("d")? as usize;
    let classes = parse_num("C")? as usize;
    let expected_n = parse_num("n")? as usize;
    let meta = DatasetMeta {
        task: get("task")?.to_string(),
        dim,
        classes,
        seed: parse_num("seed")?,
        rng: RNG_ALGORITHM.into(),
        params: BTreeMap::new(),
    };

    let mut features = Vec::with_capacity(expected_n);
    let mut labels = Vec::with_capacity(expected_n);
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 1 {
            return Err(err(
                lineno,
                format!("expected {} fields, found {}", dim + 1, parts.len()),
            ));
        }
        let x = parts[..dim]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| err(lineno, format!("bad real {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let y = parts[dim]
            .trim()
            .parse::<usize>()
            .map_err(|e| err(lineno, format!("bad label {:?}: {e}", parts[dim])))?;
        if y >= classes {
            return Err(err(lineno, format!("label {y} >= C={classes}")));
        }
        features.push(x);
        labels.push(y);
    }
    if features.len() != expected_n {
        return Err(err(
            1,
            format!(
                "header says n={expected_n} but found {} rows",
                features.len()
            ),
        ));
    }
    LabeledDataset::new(features, labels, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncycle::is_nondisturbing;

    #[test]
    fn balanced_rows_split_evenly() {
        let ds = sample_balanced_behaviour_dataset(41, 2).unwrap();
        assert_eq!(ds.class_counts(), vec![21, 20]);
        for (x, y) in ds.iter() {
            let b = Behaviour::from_flat(x).unwrap();
            assert!(is_nondisturbing(&b, DEFAULT_TOL));
            assert_eq!(kcbs_label(&b).unwrap().class_index(), y);
        }
    }

    #[test]
    fn behaviour_rows_are_feasible_and_correctly_labelled() {
        let ds = sample_behaviour_dataset(300, 11).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.dim(), 10);
        for (x, y) in ds.iter() {
            let b = Behaviour::from_flat(x).unwrap();
            assert!(is_nondisturbing(&b, DEFAULT_TOL));
            assert_eq!(kcbs_label(&b).unwrap().class_index(), y);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = sample_behaviour_dataset(50, 3).unwrap();
        let b = sample_behaviour_dataset(50, 3).unwrap();
        assert_eq!(format_dataset(&a), format_dataset(&b));
        let c = sample_behaviour_dataset(50, 4).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_behaviour_dataset(0, 1).is_err());
        assert!(sample_rhombus_dataset(0, None, 1).is_err());
    }

    #[test]
    fn rhombus_labels() {
        assert_eq!(rhombus_label(&[0.0, 0.0]), 0);
        assert_eq!(rhombus_label(&[0.9, 0.9]), 1);
        assert_eq!(rhombus_label(&[0.5, -0.5]), 0);
        assert_eq!(rhombus_label(&[-1.0, 0.0]), 0);
    }

    #[test]
    fn bias_inside_probability_matches_weighted_area() {
        let b = BiasSpec::lower_left_sparse();
        let expected = (1.0 / 50.0) / (3.0 + 1.0 / 50.0);
        assert!((b.inside_probability() - expected).abs() < 1e-15);
        assert!((expected - 0.0066).abs() < 1e-4);
    }

    #[test]
    fn bias_validation() {
        let mut b = BiasSpec::lower_left_sparse();
        b.density_ratio = 0.0;
        assert!(b.validate().is_err());
        let mut b = BiasSpec::lower_left_sparse();
        b.hi = [-1.0, 0.0];
        assert!(b.validate().is_err());
    }

    #[test]
    fn complement_tiles_the_square() {
        let b = BiasSpec {
            lo: [-0.3, 0.1],
            hi: [0.4, 0.9],
            density_ratio: 2.0,
        };
        let area: f64 = b
            .complement()
            .iter()
            .map(|(lo, hi)| (hi[0] - lo[0]) * (hi[1] - lo[1]))
            .sum();
        assert!((area + b.area() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = sample_rhombus_dataset(10, None, 5).unwrap();
        let (a, b) = split(&ds, 0.8, 9).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<Vec<f64>> = a.features().iter().chain(b.features()).cloned().collect();
        let mut orig = ds.features().to_vec();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        orig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, orig);
        let (a2, _) = split(&ds, 0.8, 9).unwrap();
        assert_eq!(a, a2);
        assert!(split(&ds, 1.0, 9).is_err());
        assert!(split(&ds, 0.0, 9).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "# task=kcbs d=10 C=2 seed=1 n=2\n\
                    0,0,0,0,0,0,0,0,0,0,0\n\
                    0,0,0,0,0,0,0,0,0,1\n";
        match parse_dataset(text, Path::new("x.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_dataset("", Path::new("empty.csv")).unwrap();
        assert!(ds.is_empty());
    }
}
