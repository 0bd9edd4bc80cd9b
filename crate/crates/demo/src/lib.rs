//! Browser bindings for three small interactive operations.
//!
//! Every export takes plain numbers or a JSON string and returns a JSON
//! string, so the page needs no generated glue beyond `wasm-bindgen`'s.
//! The `*_json` functions are the native entry points used by the exports
//! and by the tests.

use ncbnn::bayes::{hmc_sample_from, HmcConfig, PriorSpec};
use ncbnn::dataset::{sample_balanced_behaviour_dataset, sample_rhombus_dataset, BiasSpec};
use ncbnn::lp::lp_membership;
use ncbnn::mlp::{self, Architecture, TrainConfig};
use ncbnn::ncycle::{
    behaviour_to_table, is_nondisturbing, kcbs_label, max_odd_parity_sum, noncontextual_bound,
    Behaviour, ContextualityLabel, DEFAULT_TOL,
};
use ncbnn::uncertainty::{decompose, decompose_probs, nn_uncertainty};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct BehaviourReport {
    singles: Vec<f64>,
    correlators: Vec<f64>,
    /// `table[context][row]`, rows ordered (+,+), (+,-), (-,+), (-,-).
    table: Vec<[f64; 4]>,
    nondisturbing: bool,
    label: Option<&'static str>,
    gamma: Vec<i8>,
    cycle_value: f64,
    bound: f64,
    lp_label: Option<&'static str>,
    lp_residual: Option<f64>,
    error: Option<String>,
}

fn label_name(l: ContextualityLabel) -> &'static str {
    match l {
        ContextualityLabel::NonContextual => "non-contextual",
        ContextualityLabel::Contextual => "contextual",
    }
}

/// Table, closed-form label and LP cross-check for a flat behaviour
/// `[<B_0>..<B_{n-1}>, <B_0B_1>..<B_{n-1}B_0>]`.
pub fn classify_behaviour_json(flat: &[f64]) -> Result<String, String> {
    let b = Behaviour::from_flat(flat).map_err(|e| e.to_string())?;
    let inequality = max_odd_parity_sum(b.correlators());
    let mut report = BehaviourReport {
        singles: b.singles().to_vec(),
        correlators: b.correlators().to_vec(),
        table: behaviour_to_table(&b).columns().to_vec(),
        nondisturbing: is_nondisturbing(&b, DEFAULT_TOL),
        label: None,
        gamma: inequality.gamma,
        cycle_value: inequality.value,
        bound: noncontextual_bound(b.n()),
        lp_label: None,
        lp_residual: None,
        error: None,
    };
    if report.nondisturbing {
        match kcbs_label(&b) {
            Ok(l) => report.label = Some(label_name(l)),
            Err(e) => report.error = Some(e.to_string()),
        }
        match lp_membership(&b, DEFAULT_TOL) {
            Ok(m) => {
                report.lp_label = Some(label_name(m.label));
                report.lp_residual = Some(m.residual);
            }
            Err(e) => report.error = Some(e.to_string()),
        }
    } else {
        report.error = Some("some table entry is negative".into());
    }
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// A random valid 5-cycle behaviour of the requested class.
pub fn random_behaviour(seed: u64, contextual: bool) -> Result<Vec<f64>, String> {
    let ds = sample_balanced_behaviour_dataset(2, seed).map_err(|e| e.to_string())?;
    let want = usize::from(contextual);
    let row = ds.iter().find(|&(_, y)| y == want).map(|(x, _)| x.to_vec());
    row.ok_or_else(|| "sampler returned no row of that class".into())
}

#[derive(Serialize)]
struct RhombusReport {
    resolution: usize,
    /// Training points as `[x, y, label]`.
    train: Vec<[f64; 3]>,
    /// Row-major from the lower-left cell, normalised total entropy.
    nn_u: Vec<f64>,
    bnn_u: Vec<f64>,
    bnn_epistemic: Vec<f64>,
    nn_pred: Vec<usize>,
    bnn_pred: Vec<usize>,
    acceptance_rate: f64,
    members: usize,
}

/// Trains a point-estimate net and a short warm-started HMC chain on the
/// rhombus task, then evaluates both on a `resolution x resolution` grid.
pub fn rhombus_maps_json(
    n_train: usize,
    biased: bool,
    seed: u64,
    resolution: usize,
) -> Result<String, String> {
    if resolution == 0 || resolution > 200 {
        return Err("resolution must be in 1..=200".into());
    }
    let bias = BiasSpec::lower_left_sparse();
    let ds = sample_rhombus_dataset(n_train, biased.then_some(&bias), seed)
        .map_err(|e| e.to_string())?;
    let arch = Architecture::new(2, vec![8, 4, 2]).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 100,
        min_steps: 1500,
        seed,
        ..TrainConfig::default()
    };
    let nn = mlp::train(&arch, &ds, &train_cfg).map_err(|e| e.to_string())?;
    let hmc_cfg = HmcConfig {
        samples: 40,
        burn_in: 150,
        thinning: 2,
        seed: seed.wrapping_add(1),
        ..HmcConfig::default()
    };
    let ens =
        hmc_sample_from(&nn, &ds, &PriorSpec::default(), &hmc_cfg).map_err(|e| e.to_string())?;

    let ln_c = 2f64.ln();
    let cells = resolution * resolution;
    let mut report = RhombusReport {
        resolution,
        train: ds.iter().map(|(x, y)| [x[0], x[1], y as f64]).collect(),
        nn_u: Vec::with_capacity(cells),
        bnn_u: Vec::with_capacity(cells),
        bnn_epistemic: Vec::with_capacity(cells),
        nn_pred: Vec::with_capacity(cells),
        bnn_pred: Vec::with_capacity(cells),
        acceptance_rate: ens.acceptance_rate,
        members: ens.len(),
    };
    let step = 2.0 / resolution as f64;
    for row in 0..resolution {
        for col in 0..resolution {
            let p = [
                -1.0 + (col as f64 + 0.5) * step,
                -1.0 + (row as f64 + 0.5) * step,
            ];
            let a = nn_uncertainty(&nn, &p).map_err(|e| e.to_string())?;
            let b = decompose(&ens, &p).map_err(|e| e.to_string())?;
            report.nn_u.push(a.total / ln_c);
            report.nn_pred.push(a.predicted);
            report.bnn_u.push(b.total / ln_c);
            report.bnn_epistemic.push(b.epistemic / ln_c);
            report.bnn_pred.push(b.predicted);
        }
    }
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// Entropy decomposition of member probability vectors given as a JSON
/// array of arrays.
pub fn decompose_members_json(members: &str) -> Result<String, String> {
    let probs: Vec<Vec<f64>> = serde_json::from_str(members).map_err(|e| e.to_string())?;
    let out = decompose_probs(&probs).map_err(|e| e.to_string())?;
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn classify_behaviour(flat: Vec<f64>) -> Result<String, JsError> {
    classify_behaviour_json(&flat).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sample_behaviour(seed: u32, contextual: bool) -> Result<Vec<f64>, JsError> {
    random_behaviour(u64::from(seed), contextual).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rhombus_maps(
    n_train: usize,
    biased: bool,
    seed: u32,
    resolution: usize,
) -> Result<String, JsError> {
    rhombus_maps_json(n_train, biased, u64::from(seed), resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn decompose_members(members: &str) -> Result<String, JsError> {
    decompose_members_json(members).map_err(|e| JsError::new(&e))
}
