//! n-cycle behaviours.
//!
//! A behaviour on the n-cycle is fixed by the n single-observable
//! expectations `<B_j>` and the n neighbour correlators `<B_j B_{j+1}>`
//! (indices mod n). Each context `(B_j, B_{j+1})` has four outcome
//! probabilities, recovered by
//!
//! ```text
//! 4 p(s, t) = 1 + s <B_j> + t <B_{j+1}> + s t <B_j B_{j+1}>,   s, t in {+1, -1}
//! ```
//!
//! A behaviour is non-disturbing when all of these are non-negative. It is
//! non-contextual when, in addition, every odd-parity cycle inequality
//! `sum_j g_j <B_j B_{j+1}> <= n - 2` holds (`g in {-1, 1}^n` with an odd
//! number of `-1` entries). For n = 5 these are the 16 KCBS inequalities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cycle length of the KCBS scenario.
pub const KCBS_N: usize = 5;

/// Tolerance on table entries and on the cycle-inequality bound.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Largest cycle for which [`noncontextual_vertices`] will enumerate.
pub const MAX_VERTEX_N: usize = 16;

/// Outcome rows of a context, in table order `(++, +-, -+, --)`.
pub const OUTCOME_SIGNS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behaviour {
    singles: Vec<f64>,
    correlators: Vec<f64>,
}

impl Behaviour {
    pub fn new(singles: Vec<f64>, correlators: Vec<f64>) -> Result<Self> {
        if singles.len() != correlators.len() {
            return Err(Error::DimensionMismatch {
                expected: singles.len(),
                got: correlators.len(),
            });
        }
        if singles.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "cycle length must be at least 3, got {}",
                singles.len()
            )));
        }
        if let Some(v) = singles
            .iter()
            .chain(&correlators)
            .find(|v| !(v.is_finite() && (-1.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidArgument(format!(
                "expectation {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            singles,
            correlators,
        })
    }

    /// Builds a behaviour from the flattened layout
    /// `<B_0>..<B_{n-1}>, <B_0B_1>..<B_{n-1}B_0>`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flattened behaviour needs an even length, got {}",
                values.len()
            )));
        }
        let n = values.len() / 2;
        Self::new(values[..n].to_vec(), values[n..].to_vec())
    }

    /// The behaviour with all expectations zero (uniform outcome tables).
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![0.0; n], vec![0.0; n])
    }

    /// Deterministic assignment `B_j = signs[j]`, with `<B_j B_{j+1}> = s_j s_{j+1}`.
    pub fn deterministic(signs: &[bool]) -> Result<Self> {
        let n = signs.len();
        let singles: Vec<f64> = signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
        let correlators = (0..n).map(|j| singles[j] * singles[(j + 1) % n]).collect();
        Self::new(singles, correlators)
    }

    /// Convex combination `sum_i w_i b_i`. Weights must be non-negative and
    /// sum to one; results are clamped to `[-1, 1]` against rounding.
    pub fn mixture(weights: &[f64], parts: &[Behaviour]) -> Result<Self> {
        if weights.len() != parts.len() || parts.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: parts.len(),
                got: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "mixture weights must be non-negative and sum to 1".into(),
            ));
        }
        let n = parts[0].n();
        let mut flat = vec![0.0; 2 * n];
        for (w, b) in weights.iter().zip(parts) {
            if b.n() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: b.n(),
                });
            }
            for (acc, v) in flat.iter_mut().zip(b.to_flat()) {
                *acc += w * v;
            }
        }
        for v in &mut flat {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::from_flat(&flat)
    }

    pub fn n(&self) -> usize {
        self.singles.len()
    }

    pub fn singles(&self) -> &[f64] {
        &self.singles
    }

    pub fn correlators(&self) -> &[f64] {
        &self.correlators
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.singles.clone();
        v.extend_from_slice(&self.correlators);
        v
    }

    /// Relabels observable `j` as `j + k (mod n)`.
    pub fn rotated(&self, k: usize) -> Self {
        let n = self.n();
        let mut singles = vec![0.0; n];
        let mut correlators = vec![0.0; n];
        for j in 0..n {
            singles[(j + k) % n] = self.singles[j];
            correlators[(j + k) % n] = self.correlators[j];
        }
        Self {
            singles,
            correlators,
        }
    }

    /// Flips the sign of every observable: singles negate, correlators stay.
    pub fn sign_flipped(&self) -> Self {
        Self {
            singles: self.singles.iter().map(|v| -v).collect(),
            correlators: self.correlators.clone(),
        }
    }
}

/// Outcome probabilities per context: `columns[j][row]` with rows ordered
/// `(++, +-, -+, --)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    columns: Vec<[f64; 4]>,
}

impl ProbabilityTable {
    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, context: usize) -> f64 {
        self.columns[context][row]
    }

    pub fn columns(&self) -> &[[f64; 4]] {
        &self.columns
    }

    pub fn min_entry(&self) -> f64 {
        self.columns
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn behaviour_to_table(b: &Behaviour) -> ProbabilityTable {
    let n = b.n();
    let columns = (0..n)
        .map(|j| {
            let (x, y, c) = (b.singles[j], b.singles[(j + 1) % n], b.correlators[j]);
            OUTCOME_SIGNS.map(|(s, t)| 0.25 * (1.0 + s * x + t * y + s * t * c))
        })
        .collect();
    ProbabilityTable { columns }
}

/// Smallest table entry of a flattened behaviour, without building the
/// table. Same value as `behaviour_to_table(b).min_entry()`.
pub fn min_table_entry_flat(values: &[f64]) -> f64 {
    let n = values.len() / 2;
    let (singles, correlators) = values.split_at(n);
    let mut min = f64::INFINITY;
    for j in 0..n {
        let (x, y, c) = (singles[j], singles[(j + 1) % n], correlators[j]);
        for (s, t) in OUTCOME_SIGNS {
            min = min.min(0.25 * (1.0 + s * x + t * y + s * t * c));
        }
    }
    min
}

pub fn is_nondisturbing(b: &Behaviour, tol: f64) -> bool {
    behaviour_to_table(b).min_entry() >= -tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ContextualityLabel {
    NonContextual = 0,
    Contextual = 1,
}

impl ContextualityLabel {
    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::NonContextual),
            1 => Some(Self::Contextual),
            _ => None,
        }
    }
}

impl fmt::Display for ContextualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonContextual => f.write_str("non-contextual"),
            Self::Contextual => f.write_str("contextual"),
        }
    }
}

/// Right-hand side of the odd-parity cycle inequalities.
pub fn noncontextual_bound(n: usize) -> f64 {
    n as f64 - 2.0
}

/// The most violated odd-parity cycle inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleInequality {
    /// Sign vector with an odd number of `-1` entries.
    pub gamma: Vec<i8>,
    /// `sum_j gamma_j <B_j B_{j+1}>`.
    pub value: f64,
}

/// Maximises `sum_j g_j c_j` over sign vectors with an odd number of `-1`.
///
/// The unconstrained maximiser is `g_j = sign(c_j)`; if its parity is even,
/// flipping the entry with the smallest `|c_j|` is the cheapest repair.
pub fn max_odd_parity_sum(correlators: &[f64]) -> CycleInequality {
    let mut gamma: Vec<i8> = correlators
        .iter()
        .map(|&c| if c < 0.0 { -1 } else { 1 })
        .collect();
    let mut value: f64 = correlators.iter().map(|c| c.abs()).sum();
    let negatives = gamma.iter().filter(|&&g| g < 0).count();
    if negatives % 2 == 0 {
        let (j, smallest) = correlators.iter().map(|c| c.abs()).enumerate().fold(
            (0, f64::INFINITY),
            |best, (j, a)| {
                if a < best.1 {
                    (j, a)
                } else {
                    best
                }
            },
        );
        gamma[j] = -gamma[j];
        value -= 2.0 * smallest;
    }
    CycleInequality { gamma, value }
}

/// Labels a non-disturbing behaviour. Behaviours on a facet (within
/// [`DEFAULT_TOL`]) are non-contextual.
pub fn kcbs_label(b: &Behaviour) -> Result<ContextualityLabel> {
    let min_entry = behaviour_to_table(b).min_entry();
    if min_entry < -DEFAULT_TOL {
        return Err(Error::Disturbing { min_entry });
    }
    let worst = max_odd_parity_sum(&b.correlators);
    Ok(if worst.value <= noncontextual_bound(b.n()) + DEFAULT_TOL {
        ContextualityLabel::NonContextual
    } else {
        ContextualityLabel::Contextual
    })
}

/// All `2^n` deterministic behaviours, the vertices of the non-contextual
/// polytope. Vertex `k` assigns `B_j = -1` iff bit `j` of `k` is set.
pub fn noncontextual_vertices(n: usize) -> Result<Vec<Behaviour>> {
    if !(3..=MAX_VERTEX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "vertex enumeration supports 3 <= n <= {MAX_VERTEX_N}, got {n}"
        )));
    }
    (0..1u32 << n)
        .map(|mask| {
            let signs: Vec<bool> = (0..n).map(|j| mask & (1 << j) == 0).collect();
            Behaviour::deterministic(&signs)
        })
        .collect()
}

/// One behaviour per line: the flattened values, comma separated, with an
/// optional trailing class label.
pub fn format_behaviour_line(b: &Behaviour, label: Option<ContextualityLabel>) -> String {
    let mut fields: Vec<String> = b.to_flat().iter().map(|v| format_real(*v)).collect();
    if let Some(l) = label {
        fields.push(l.class_index().to_string());
    }
    fields.join(",")
}

pub fn parse_behaviour_line(
    line: &str,
    n: usize,
) -> Result<(Behaviour, Option<ContextualityLabel>)> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 2 * n && fields.len() != 2 * n + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} or {} fields, got {}",
            2 * n,
            2 * n + 1,
            fields.len()
        )));
    }
    let values = fields[..2 * n]
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad real {f:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let label = match fields.get(2 * n) {
        None => None,
        Some(f) => Some(
            f.parse::<usize>()
                .ok()
                .and_then(ContextualityLabel::from_class_index)
                .ok_or_else(|| Error::InvalidArgument(format!("bad label {f:?}")))?,
        ),
    };
    Ok((Behaviour::from_flat(&values)?, label))
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}
