//! Predictive uncertainty: entropy of the posterior predictive split into an
//! aleatoric part (mean member entropy) and an epistemic remainder, plus the
//! misclassification-versus-uncertainty statistics built on top of it.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bayes::{member_probs_batch, PosteriorEnsemble};
use crate::error::{Error, Result};
use crate::mlp::{argmax, entropy, probs_batch, MlpParams};

/// Slack allowed on the Jensen inequality before clipping epistemic to 0.
pub const EPISTEMIC_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveOutput {
    pub probs: Vec<f64>,
    pub predicted: usize,
    /// Entropy of `probs`, nats.
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    /// False for a point-estimate network, whose entropy cannot be split.
    pub decomposed: bool,
}

impl PredictiveOutput {
    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// `value / ln C`, in `[0, 1]`.
    pub fn normalized(&self, measure: UncertaintyMeasure) -> f64 {
        let v = match measure {
            UncertaintyMeasure::Total => self.total,
            UncertaintyMeasure::Aleatoric => self.aleatoric,
            UncertaintyMeasure::Epistemic => self.epistemic,
        };
        v / (self.classes() as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMeasure {
    Total,
    Aleatoric,
    Epistemic,
}

impl UncertaintyMeasure {
    pub fn name(self) -> &'static str {
        match self {
            Self::Total => "total",
            Self::Aleatoric => "aleatoric",
            Self::Epistemic => "epistemic",
        }
    }
}

/// Decomposition from the members' class-probability vectors.
pub fn decompose_probs(member_probs: &[Vec<f64>]) -> Result<PredictiveOutput> {
    let m = member_probs.len();
    if m == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let c = member_probs[0].len();
    if let Some(p) = member_probs.iter().find(|p| p.len() != c) {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: p.len(),
        });
    }
    let mut mean = vec![0.0; c];
    let mut aleatoric = 0.0;
    for p in member_probs {
        for (acc, v) in mean.iter_mut().zip(p) {
            *acc += v;
        }
        aleatoric += entropy(p);
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    aleatoric /= m as f64;
    Ok(assemble(mean, aleatoric))
}

fn assemble(probs: Vec<f64>, aleatoric: f64) -> PredictiveOutput {
    let total = entropy(&probs);
    let mut epistemic = total - aleatoric;
    let mut aleatoric = aleatoric;
    if epistemic < 0.0 && epistemic > -EPISTEMIC_CLIP {
        // Keep total = aleatoric + epistemic exact after clipping.
        epistemic = 0.0;
        aleatoric = total;
    }
    PredictiveOutput {
        predicted: argmax(&probs),
        probs,
        total,
        aleatoric,
        epistemic,
        decomposed: true,
    }
}

pub fn decompose(ens: &PosteriorEnsemble, x: &[f64]) -> Result<PredictiveOutput> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(decompose_batch(ens, view)?.remove(0))
}

/// [`decompose`] for every row of `x`.
pub fn decompose_batch(
    ens: &PosteriorEnsemble,
    x: ArrayView2<f64>,
) -> Result<Vec<PredictiveOutput>> {
    if ens.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let per_member: Vec<Array2<f64>> = member_probs_batch(ens, x)?;
    let m = per_member.len() as f64;
    let c = per_member[0].ncols();
    Ok((0..x.nrows())
        .map(|i| {
            let mut mean = vec![0.0; c];
            let mut aleatoric = 0.0;
            for p in &per_member {
                let row = p.row(i);
                for (acc, v) in mean.iter_mut().zip(row.iter()) {
                    *acc += v;
                }
                aleatoric += entropy(row.as_slice().expect("row-major"));
            }
            mean.iter_mut().for_each(|v| *v /= m);
            assemble(mean, aleatoric / m)
        })
        .collect())
}

/// Output entropy of a single network. The split is undefined for a point
/// estimate, so the whole entropy is reported as aleatoric and
/// `decomposed` is false.
pub fn nn_uncertainty(p: &MlpParams, x: &[f64]) -> Result<PredictiveOutput> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(nn_uncertainty_batch(p, view)?.remove(0))
}

pub fn nn_uncertainty_batch(p: &MlpParams, x: ArrayView2<f64>) -> Result<Vec<PredictiveOutput>> {
    let probs = probs_batch(p, x)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let probs = row.to_vec();
            let total = entropy(&probs);
            PredictiveOutput {
                predicted: argmax(&probs),
                probs,
                total,
                aleatoric: total,
                epistemic: 0.0,
                decomposed: false,
            }
        })
        .collect())
}

/// Empirical `P(M | U > a)` and `P(M | U < a)` over a grid of thresholds,
/// with `U` the normalised uncertainty. `None` marks an empty condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub measure: UncertaintyMeasure,
    pub alphas: Vec<f64>,
    pub p_mis_high: Vec<Option<f64>>,
    pub n_high: Vec<usize>,
    pub p_mis_low: Vec<Option<f64>>,
    pub n_low: Vec<usize>,
    /// Samples with `U == a` exactly, in neither condition.
    pub n_equal: Vec<usize>,
}

pub fn misclassification_curve(
    outputs: &[PredictiveOutput],
    labels: &[usize],
    alphas: &[f64],
    measure: UncertaintyMeasure,
) -> Result<CalibrationCurve> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: outputs.len(),
            got: labels.len(),
        });
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    let points: Vec<(f64, bool)> = outputs
        .iter()
        .zip(labels)
        .map(|(o, &y)| (o.normalized(measure), o.predicted != y))
        .collect();

    let ratio = |wrong: usize, n: usize| (n > 0).then(|| wrong as f64 / n as f64);
    let mut curve = CalibrationCurve {
        measure,
        alphas: alphas.clone(),
        p_mis_high: Vec::new(),
        n_high: Vec::new(),
        p_mis_low: Vec::new(),
        n_low: Vec::new(),
        n_equal: Vec::new(),
    };
    for &a in &alphas {
        let (mut nh, mut wh, mut nl, mut wl, mut ne) = (0, 0, 0, 0, 0);
        for &(u, wrong) in &points {
            if u > a {
                nh += 1;
                wh += usize::from(wrong);
            } else if u < a {
                nl += 1;
                wl += usize::from(wrong);
            } else {
                ne += 1;
            }
        }
        curve.p_mis_high.push(ratio(wh, nh));
        curve.n_high.push(nh);
        curve.p_mis_low.push(ratio(wl, nl));
        curve.n_low.push(nl);
        curve.n_equal.push(ne);
    }
    Ok(curve)
}

/// `k + 1` evenly spaced thresholds on `[0, 1]`.
pub fn alpha_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2);
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[0, ln C]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Fixed-width histogram of total entropy over `[0, ln C]` for the outputs
/// selected by `predicate`. The top edge is inclusive.
pub fn uncertainty_histogram<F>(
    outputs: &[PredictiveOutput],
    classes: usize,
    bins: usize,
    mut predicate: F,
) -> Histogram
where
    F: FnMut(usize, &PredictiveOutput) -> bool,
{
    assert!(bins > 0 && classes >= 2);
    let top = (classes as f64).ln();
    let width = top / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for (i, o) in outputs.iter().enumerate() {
        if predicate(i, o) {
            let k = ((o.total / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    Histogram { edges, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn output(total: f64, predicted: usize) -> PredictiveOutput {
        PredictiveOutput {
            probs: vec![0.5, 0.5],
            predicted,
            total: total * LN2,
            aleatoric: total * LN2,
            epistemic: 0.0,
            decomposed: false,
        }
    }

    #[test]
    fn closed_form_decompositions() {
        let d = decompose_probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!((d.total, d.aleatoric, d.epistemic), (LN2, 0.0, LN2));

        let d = decompose_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!((d.total, d.aleatoric, d.epistemic), (LN2, LN2, 0.0));

        let d = decompose_probs(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!((d.total, d.aleatoric, d.epistemic), (0.0, 0.0, 0.0));
        assert!(decompose_probs(&[]).is_err());
    }

    #[test]
    fn point_estimate_entropies() {
        use crate::mlp::{Architecture, MlpParams};
        // Bias-only nets produce fixed outputs.
        let arch = Architecture::new(1, vec![2]).unwrap();
        for (bias, expected) in [
            ((0.0, 0.0), LN2),
            ((900.0, 0.0), 0.0),
            ((0.0, -(9f64).ln()), 0.325_082_973_391_448_2),
        ] {
            let p = MlpParams::new(arch.clone(), vec![0.0, 0.0, bias.0, bias.1]).unwrap();
            let o = nn_uncertainty(&p, &[1.0]).unwrap();
            assert!(
                (o.total - expected).abs() < 1e-12,
                "{} vs {expected}",
                o.total
            );
            assert!(!o.decomposed);
            assert_eq!(o.aleatoric, o.total);
        }
    }

    #[test]
    fn all_correct_curve_is_zero() {
        let outs: Vec<_> = [0.1, 0.4, 0.8].iter().map(|&u| output(u, 0)).collect();
        let c = misclassification_curve(
            &outs,
            &[0, 0, 0],
            &alpha_grid(11),
            UncertaintyMeasure::Total,
        )
        .unwrap();
        for v in c.p_mis_high.iter().chain(&c.p_mis_low).flatten() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn all_wrong_constant_uncertainty() {
        let u0 = 0.5;
        let outs: Vec<_> = (0..4).map(|_| output(u0, 1)).collect();
        let c = misclassification_curve(
            &outs,
            &[0; 4],
            &[0.25, 0.5, 0.75],
            UncertaintyMeasure::Total,
        )
        .unwrap();
        assert_eq!(c.p_mis_low, vec![None, None, Some(1.0)]);
        assert_eq!(c.p_mis_high, vec![Some(1.0), None, None]);
        assert_eq!(c.n_equal, vec![0, 4, 0]);
    }

    #[test]
    fn four_sample_fixture() {
        let outs = vec![
            output(0.6, 1),
            output(0.6, 1),
            output(0.1, 0),
            output(0.1, 0),
        ];
        let c = misclassification_curve(&outs, &[0, 0, 0, 0], &[0.3], UncertaintyMeasure::Total)
            .unwrap();
        assert_eq!(c.p_mis_high, vec![Some(1.0)]);
        assert_eq!(c.p_mis_low, vec![Some(0.0)]);
        assert_eq!((c.n_high[0], c.n_low[0]), (2, 2));
    }

    #[test]
    fn curve_endpoints_and_errors() {
        let outs = vec![output(0.0, 0), output(1.0, 1)];
        let c = misclassification_curve(&outs, &[0, 0], &[0.0, 1.0], UncertaintyMeasure::Total)
            .unwrap();
        assert_eq!(c.p_mis_low[0], None);
        assert_eq!(c.p_mis_high[1], None);
        assert!(misclassification_curve(&[], &[], &[0.5], UncertaintyMeasure::Total).is_err());
        assert!(misclassification_curve(&outs, &[0], &[0.5], UncertaintyMeasure::Total).is_err());
    }

    #[test]
    fn histogram_edges_and_totals() {
        let empty = uncertainty_histogram(&[], 2, 10, |_, _| true);
        assert_eq!(empty.counts, vec![0; 10]);

        let top = uncertainty_histogram(&[output(1.0, 0)], 2, 10, |_, _| true);
        assert_eq!(top.counts[9], 1);
        assert_eq!(top.total(), 1);
        assert!((top.edges[10] - LN2).abs() < 1e-15);

        let outs: Vec<_> = (0..50).map(|i| output(i as f64 / 49.0, i % 2)).collect();
        let wrong = uncertainty_histogram(&outs, 2, 7, |_, o| o.predicted != 0);
        assert_eq!(wrong.total(), 25);
    }
}
