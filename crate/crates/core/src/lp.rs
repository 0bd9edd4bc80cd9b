//! Polytope membership by linear feasibility.
//!
//! A behaviour is non-contextual iff it is a convex combination of the
//! deterministic vertices, i.e. iff `V w = b, 1^T w = 1, w >= 0` has a
//! solution. This module decides that with a dense phase-one simplex and is
//! independent of the closed-form inequality test in [`crate::ncycle`].

use crate::error::{Error, Result};
use crate::ncycle::{noncontextual_vertices, Behaviour, ContextualityLabel};

const PIVOT_EPS: f64 = 1e-12;
const MAX_ITERATIONS: usize = 50_000;

/// Residuals at or above `INFEASIBLE_FACTOR * tol` are infeasible; between
/// `tol` and that value the oracle declines to decide.
pub const INFEASIBLE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct Feasibility {
    /// Basic solution found by phase one (`x >= 0`).
    pub x: Vec<f64>,
    /// `||A x - b||_1`, zero up to rounding iff the system is feasible.
    pub residual: f64,
    pub iterations: usize,
}

/// Phase-one simplex for `A x = b, x >= 0`.
///
/// `a` is row-major with `rows` rows. Returns `None` when the iteration cap
/// is hit. Bland's rule is used for both entering and leaving variables, so
/// the method cannot cycle.
pub fn phase_one(a: &[f64], rows: usize, b: &[f64]) -> Option<Feasibility> {
    assert_eq!(b.len(), rows);
    assert_eq!(a.len() % rows.max(1), 0);
    let cols = a.len() / rows;
    let width = cols + rows + 1;
    let rhs = width - 1;

    // Tableau with one artificial per row; rows with negative rhs are negated.
    let mut t = vec![0.0; rows * width];
    for i in 0..rows {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..cols {
            t[i * width + j] = sign * a[i * cols + j];
        }
        t[i * width + cols + i] = 1.0;
        t[i * width + rhs] = sign * b[i];
    }
    let mut basis: Vec<usize> = (cols..cols + rows).collect();

    // Reduced costs of the phase-one objective (sum of artificials).
    let mut cost = vec![0.0; width];
    for i in 0..rows {
        for j in 0..cols {
            cost[j] -= t[i * width + j];
        }
        cost[rhs] -= t[i * width + rhs];
    }

    let mut iterations = 0;
    loop {
        let Some(enter) = (0..cols + rows).find(|&j| cost[j] < -PIVOT_EPS) else {
            break;
        };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..rows {
            let p = t[i * width + enter];
            if p > PIVOT_EPS {
                let ratio = t[i * width + rhs] / p;
                let better = ratio < best - PIVOT_EPS
                    || (ratio <= best + PIVOT_EPS && leave.is_some_and(|l| basis[i] < basis[l]));
                if leave.is_none() || better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        // Phase one is bounded below by zero, so an unbounded ray cannot occur.
        let r = leave?;
        pivot(&mut t, &mut cost, width, rows, r, enter);
        basis[r] = enter;
        iterations += 1;
        if iterations >= MAX_ITERATIONS {
            return None;
        }
    }

    let mut x = vec![0.0; cols];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < cols {
            x[bv] = t[i * width + rhs].max(0.0);
        }
    }
    let residual = (0..rows)
        .map(|i| {
            let ax: f64 = (0..cols).map(|j| a[i * cols + j] * x[j]).sum();
            (ax - b[i]).abs()
        })
        .sum();
    Some(Feasibility {
        x,
        residual,
        iterations,
    })
}

fn pivot(t: &mut [f64], cost: &mut [f64], width: usize, rows: usize, r: usize, c: usize) {
    let p = t[r * width + c];
    for v in &mut t[r * width..(r + 1) * width] {
        *v /= p;
    }
    let pivot_row: Vec<f64> = t[r * width..(r + 1) * width].to_vec();
    for i in 0..rows {
        if i == r {
            continue;
        }
        let f = t[i * width + c];
        if f != 0.0 {
            for (v, pr) in t[i * width..(i + 1) * width].iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
        }
    }
    let f = cost[c];
    if f != 0.0 {
        for (v, pr) in cost.iter_mut().zip(&pivot_row) {
            *v -= f * pr;
        }
    }
}

/// Result of the membership search with the mixture weights it found.
#[derive(Debug, Clone)]
pub struct Membership {
    pub label: ContextualityLabel,
    pub residual: f64,
    /// Weights over [`noncontextual_vertices`] (meaningful when non-contextual).
    pub weights: Vec<f64>,
}

/// Decides contextuality as (non-)membership in the convex hull of the
/// deterministic vertices.
///
/// Residual `<= tol` is non-contextual, `>= INFEASIBLE_FACTOR * tol` is
/// contextual, anything in between is reported as
/// [`Error::LpInconclusive`].
pub fn lp_membership(b: &Behaviour, tol: f64) -> Result<Membership> {
    let n = b.n();
    let vertices = noncontextual_vertices(n)?;
    let rows = 2 * n + 1;
    let cols = vertices.len();
    let mut a = vec![0.0; rows * cols];
    for (j, v) in vertices.iter().enumerate() {
        for (i, value) in v.to_flat().into_iter().enumerate() {
            a[i * cols + j] = value;
        }
        a[(rows - 1) * cols + j] = 1.0;
    }
    let mut rhs = b.to_flat();
    rhs.push(1.0);

    let sol = phase_one(&a, rows, &rhs).ok_or(Error::LpInconclusive { residual: f64::NAN })?;
    let label = if sol.residual <= tol {
        ContextualityLabel::NonContextual
    } else if sol.residual >= INFEASIBLE_FACTOR * tol {
        ContextualityLabel::Contextual
    } else {
        return Err(Error::LpInconclusive {
            residual: sol.residual,
        });
    };
    Ok(Membership {
        label,
        residual: sol.residual,
        weights: sol.x,
    })
}

pub fn lp_membership_oracle(b: &Behaviour, tol: f64) -> Result<ContextualityLabel> {
    lp_membership(b, tol).map(|m| m.label)
}
