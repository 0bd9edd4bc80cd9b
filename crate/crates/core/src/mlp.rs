//! Feed-forward classifier with exact backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` occupies `out_l * in_l`
//! weights (row-major, `W[o][i]`) followed by `out_l` biases; layers are
//! stored in order. The activation is applied after every layer but the
//! last, whose outputs are the logits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{
    linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{rng_from_seed, LabeledDataset};
use crate::error::{Error, Result};
use crate::ncycle::format_real;

/// Probabilities below this are clipped before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of every layer, the last one being the class count.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, layer_sizes: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        match layer_sizes.last() {
            None => return Err(Error::InvalidArgument("layer list is empty".into())),
            Some(&c) if c < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "output layer needs at least 2 classes, got {c}"
                )))
            }
            _ => {}
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        Ok(Self {
            input_dim,
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// `(fan_in, fan_out, offset)` per layer.
    pub fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        self.layer_sizes
            .iter()
            .map(|&out| {
                let entry = (fan_in, out, offset);
                offset += out * fan_in + out;
                fan_in = out;
                entry
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers()
            .last()
            .map(|&(i, o, off)| off + o * i + o)
            .unwrap_or(0)
    }

    /// Dash-joined layer widths, e.g. `64-32-8-2`.
    pub fn label(&self) -> String {
        self.layer_sizes
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.n_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.n_params(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite parameter".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let theta = vec![0.0; arch.n_params()];
        Self { arch, theta }
    }

    /// Weights uniform in `[-s, s]` with `s = init_scale / sqrt(fan_in)`;
    /// biases zero.
    pub fn random_init(arch: Architecture, init_scale: f64, rng: &mut impl Rng) -> Self {
        let mut theta = vec![0.0; arch.n_params()];
        for (fan_in, out, off) in arch.layers() {
            let s = init_scale / (fan_in as f64).sqrt();
            for w in &mut theta[off..off + out * fan_in] {
                *w = rng.random_range(-s..=s);
            }
        }
        Self { arch, theta }
    }
}

/// Rows of a dataset as a dense `N x d` matrix.
pub fn feature_matrix(ds: &LabeledDataset) -> Array2<f64> {
    let mut m = Array2::zeros((ds.len(), ds.dim()));
    for (mut row, x) in m.rows_mut().into_iter().zip(ds.features()) {
        row.assign(&ArrayView1::from(x.as_slice()));
    }
    m
}

fn layer_views<'a>(
    theta: &'a [f64],
    (fan_in, out, off): (usize, usize, usize),
) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let w = ArrayView2::from_shape((out, fan_in), &theta[off..off + out * fan_in])
        .expect("layer slice matches shape");
    let b = ArrayView1::from(&theta[off + out * fan_in..off + out * fan_in + out]);
    (w, b)
}

/// Forward pass for a batch. Returns the hidden activations (post
/// nonlinearity, one matrix per hidden layer) and the logits.
fn forward_all(
    arch: &Architecture,
    theta: &[f64],
    x: ArrayView2<f64>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let layers = arch.layers();
    let n = x.nrows();
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers.len() - 1);
    for (l, &shape) in layers.iter().enumerate() {
        let (w, b) = layer_views(theta, shape);
        let mut z = Array2::zeros((n, shape.1));
        {
            let input = if l == 0 { x } else { hidden[l - 1].view() };
            general_mat_mul(1.0, &input, &w.t(), 0.0, &mut z);
        }
        z += &b;
        if l + 1 < layers.len() {
            let act = arch.activation;
            z.mapv_inplace(|v| act.apply(v));
            hidden.push(z);
        } else {
            return (hidden, z);
        }
    }
    unreachable!("architecture has at least one layer")
}

/// Logits for every row of `x`.
pub fn logits_batch(p: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != p.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: p.arch.input_dim,
            got: x.ncols(),
        });
    }
    Ok(forward_all(&p.arch, &p.theta, x).1)
}

/// Softmax of every row of `x`.
pub fn probs_batch(p: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut z = logits_batch(p, x)?;
    for mut row in z.rows_mut() {
        let pr = softmax(row.as_slice().expect("row-major logits"));
        row.assign(&Array1::from(pr));
    }
    Ok(z)
}

pub fn forward_logits(p: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(logits_batch(p, view)?.into_raw_vec_and_offset().0)
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: ArrayView1<f64>, k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Summed cross-entropy of a batch and, if `grad` is given, its gradient
/// (overwritten, not accumulated).
pub fn loss_and_gradient(
    arch: &Architecture,
    theta: &[f64],
    x: ArrayView2<f64>,
    y: &[usize],
    grad: Option<&mut [f64]>,
) -> f64 {
    let (hidden, logits) = forward_all(arch, theta, x);
    let log_floor = PROB_FLOOR.ln();
    let loss: f64 = logits
        .rows()
        .into_iter()
        .zip(y)
        .map(|(z, &k)| -log_softmax_at(z, k).max(log_floor))
        .sum();
    let Some(grad) = grad else {
        return loss;
    };

    // dL/dz at the output: softmax minus one-hot.
    let mut delta = logits;
    for (mut row, &k) in delta.rows_mut().into_iter().zip(y) {
        let p = softmax(row.as_slice().expect("row-major logits"));
        row.assign(&Array1::from(p));
        row[k] -= 1.0;
    }
    let layers = arch.layers();
    for l in (0..layers.len()).rev() {
        let (fan_in, out, off) = layers[l];
        let input = if l == 0 { x } else { hidden[l - 1].view() };
        {
            let mut gw =
                ArrayViewMut2::from_shape((out, fan_in), &mut grad[off..off + out * fan_in])
                    .expect("gradient slice matches shape");
            general_mat_mul(1.0, &delta.t(), &input, 0.0, &mut gw);
        }
        let gb = delta.sum_axis(Axis(0));
        grad[off + out * fan_in..off + out * fan_in + out]
            .copy_from_slice(gb.as_slice().expect("contiguous"));
        if l > 0 {
            let (w, _) = layer_views(theta, layers[l]);
            let mut back = Array2::zeros((x.nrows(), fan_in));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut back);
            let act = arch.activation;
            back.zip_mut_with(&hidden[l - 1], |d, &a| *d *= act.derivative_from_output(a));
            delta = back;
        }
    }
    loss
}

/// `-sum_i log softmax(f(x_i))_{y_i}` over the whole dataset.
pub fn cross_entropy_loss(p: &MlpParams, ds: &LabeledDataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    loss_and_gradient(
        &p.arch,
        &p.theta,
        feature_matrix(ds).view(),
        ds.labels(),
        None,
    )
}

pub fn backprop_gradient(p: &MlpParams, ds: &LabeledDataset) -> Vec<f64> {
    let mut g = vec![0.0; p.theta.len()];
    if !ds.is_empty() {
        loss_and_gradient(
            &p.arch,
            &p.theta,
            feature_matrix(ds).view(),
            ds.labels(),
            Some(&mut g),
        );
    }
    g
}

/// On/off pattern of every hidden rectifier for input `x`, flattened layer
/// by layer. Two parameter vectors with the same pattern on all inputs lie
/// in the same linear region of the loss.
pub fn activation_pattern(p: &MlpParams, x: &[f64]) -> Vec<bool> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    let (hidden, _) = forward_all(&p.arch, &p.theta, view);
    hidden
        .iter()
        .flat_map(|h| h.iter().map(|&a| a > 0.0).collect::<Vec<_>>())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Extra epochs are run until at least this many parameter updates have
    /// happened, so small training sets are not left underfitted.
    #[serde(default)]
    pub min_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            init_scale: 1.0,
            seed: 0,
            min_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::InvalidArgument("init scale must be positive".into()));
        }
        Ok(())
    }

    /// Epochs actually run on `n` rows.
    pub fn effective_epochs(&self, n: usize) -> usize {
        let batches = n.div_ceil(self.batch_size).max(1);
        self.epochs.max(self.min_steps.div_ceil(batches))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: MlpParams,
    /// Mean per-sample loss of each epoch, accumulated over its mini-batches.
    pub epoch_losses: Vec<f64>,
}

pub fn train(arch: &Architecture, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<MlpParams> {
    train_with_history(arch, ds, cfg).map(|r| r.params)
}

/// Mini-batch gradient descent on the mean cross-entropy of each batch.
pub fn train_with_history(
    arch: &Architecture,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if ds.dim() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim,
            got: ds.dim(),
        });
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut params = MlpParams::random_init(arch.clone(), cfg.init_scale, &mut rng);
    let x = feature_matrix(ds);
    let y = ds.labels();
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.theta.len()];
    let epochs = cfg.effective_epochs(n);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut batch_x = Array2::zeros((cfg.batch_size.min(n), ds.dim()));
    let mut batch_y = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if batch_x.nrows() != chunk.len() {
                batch_x = Array2::zeros((chunk.len(), ds.dim()));
            }
            batch_y.clear();
            for (r, &i) in chunk.iter().enumerate() {
                batch_x.row_mut(r).assign(&x.row(i));
                batch_y.push(y[i]);
            }
            let loss = loss_and_gradient(
                arch,
                &params.theta,
                batch_x.view(),
                &batch_y,
                Some(&mut grad),
            );
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss during epoch {epoch}"
                )));
            }
            total += loss;
            let step = cfg.learning_rate / chunk.len() as f64;
            for (t, g) in params.theta.iter_mut().zip(&grad) {
                *t -= step * g;
            }
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(TrainReport {
        params,
        epoch_losses,
    })
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
    /// Output entropy in nats.
    pub entropy: f64,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        Self {
            class: argmax(&probs),
            entropy: entropy(&probs),
            probs,
        }
    }
}

pub fn predict(p: &MlpParams, x: &[f64]) -> Result<Prediction> {
    Ok(Prediction::from_probs(softmax(&forward_logits(p, x)?)))
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(p: &MlpParams, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    let z = logits_batch(p, feature_matrix(ds).view())?;
    let correct = z
        .rows()
        .into_iter()
        .zip(ds.labels())
        .filter(|(row, &y)| argmax(row.as_slice().expect("row-major")) == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

pub fn format_checkpoint(p: &MlpParams, seed: u64) -> String {
    let mut out = format!(
        "# mlp input_dim={} layers={} activation={} seed={} n_params={}\n",
        p.arch.input_dim,
        p.arch.label().replace('-', ","),
        p.arch.activation.name(),
        seed,
        p.theta.len()
    );
    for v in &p.theta {
        writeln!(out, "{}", format_real(*v)).unwrap();
    }
    out
}

pub fn write_checkpoint(p: &MlpParams, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(p, seed)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(MlpParams, u64)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let out = parse_checkpoint(&mut lines, path)?;
    Ok(out)
}

/// Header `key=value` pairs after a `# <kind>` marker.
pub(crate) fn parse_header<'a>(
    line: &'a str,
    kind: &str,
) -> Option<std::collections::BTreeMap<&'a str, &'a str>> {
    let rest = line.strip_prefix('#')?.trim_start();
    let rest = rest.strip_prefix(kind)?;
    Some(
        rest.split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect(),
    )
}

/// Reads one checkpoint block from a line iterator of `(line_number, text)`.
pub(crate) fn parse_checkpoint<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    path: &Path,
) -> Result<(MlpParams, u64)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (hl, header) = lines
        .next()
        .ok_or_else(|| err(0, "missing checkpoint header".into()))?;
    let fields =
        parse_header(header, "mlp").ok_or_else(|| err(hl, "expected '# mlp' header".into()))?;
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| err(hl, format!("header lacks {k}=")))
    };
    let input_dim: usize = get("input_dim")?
        .parse()
        .map_err(|e| err(hl, format!("bad input_dim: {e}")))?;
    let layers = get("layers")?
        .split(',')
        .map(|w| {
            w.parse::<usize>()
                .map_err(|e| err(hl, format!("bad layers: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let activation = Activation::parse(get("activation")?)
        .ok_or_else(|| err(hl, "unknown activation".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|e| err(hl, format!("bad seed: {e}")))?;
    let n_params: usize = get("n_params")?
        .parse()
        .map_err(|e| err(hl, format!("bad n_params: {e}")))?;
    let arch = Architecture::new(input_dim, layers)
        .map_err(|e| err(hl, e.to_string()))?
        .with_activation(activation);
    if arch.n_params() != n_params {
        return Err(err(
            hl,
            format!(
                "architecture has {} parameters, header says {n_params}",
                arch.n_params()
            ),
        ));
    }
    let mut theta = Vec::with_capacity(n_params);
    while theta.len() < n_params {
        let (ln, line) = lines.next().ok_or_else(|| {
            err(
                hl,
                format!("expected {n_params} values, found {}", theta.len()),
            )
        })?;
        theta.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| err(ln, format!("bad real {line:?}: {e}")))?,
        );
    }
    let params = MlpParams::new(arch, theta).map_err(|e| err(hl, e.to_string()))?;
    Ok((params, seed))
}
