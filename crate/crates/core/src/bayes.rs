//! Bayesian posterior over network weights, sampled with Hamiltonian Monte
//! Carlo.
//!
//! The unnormalised log posterior is `-L(theta | D) - |theta|^2 / (2 s^2)`
//! with `L` the summed cross-entropy and `s^2` the prior variance. The
//! evidence `p(D)` never appears: the Metropolis test only uses differences
//! of the Hamiltonian `H = -log p(theta | D) + |r|^2 / 2`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{rng_from_seed, LabeledDataset};
use crate::error::{Error, Result};
use crate::mlp::{
    self, feature_matrix, format_checkpoint, loss_and_gradient, parse_checkpoint, parse_header,
    Architecture, MlpParams,
};

/// Acceptance band targeted by burn-in step-size adaptation.
pub const TARGET_ACCEPTANCE: (f64, f64) = (0.65, 0.85);

/// Post-burn-in acceptance below this triggers a warning.
pub const LOW_ACCEPTANCE_WARNING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Shared diagonal variance of the zero-mean Gaussian prior.
    pub variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { variance: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variance > 0.0 && !self.variance.is_nan() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "prior variance must be positive, got {}",
                self.variance
            )))
        }
    }
}

/// A differentiable unnormalised log density.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns `log p(x)` up to a constant and writes its gradient.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Posterior of an MLP's weights given a dataset and a Gaussian prior.
pub struct PosteriorTarget {
    arch: Architecture,
    x: Array2<f64>,
    y: Vec<usize>,
    prior: PriorSpec,
}

impl PosteriorTarget {
    pub fn new(arch: Architecture, ds: &LabeledDataset, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        if ds.dim() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim,
                got: ds.dim(),
            });
        }
        Ok(Self {
            arch,
            x: feature_matrix(ds),
            y: ds.labels().to_vec(),
            prior,
        })
    }

    fn features(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }
}

impl LogDensity for PosteriorTarget {
    fn dim(&self) -> usize {
        self.arch.n_params()
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let loss = if self.y.is_empty() {
            grad.fill(0.0);
            0.0
        } else {
            loss_and_gradient(&self.arch, theta, self.features(), &self.y, Some(grad))
        };
        let inv_var = 1.0 / self.prior.variance;
        let mut sq = 0.0;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = -*g - t * inv_var;
            sq += t * t;
        }
        -loss - 0.5 * sq * inv_var
    }
}

/// Gaussian `N(mean, cov)` given by its precision matrix.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    /// Row-major `d x d` inverse covariance.
    pub precision: Vec<f64>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        let mut precision = vec![0.0; dim * dim];
        for i in 0..dim {
            precision[i * dim + i] = 1.0;
        }
        Self {
            mean: vec![0.0; dim],
            precision,
        }
    }
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let pd: f64 = row.iter().zip(&diff).map(|(p, v)| p * v).sum();
            grad[i] = -pd;
            quad += diff[i] * pd;
        }
        -0.5 * quad
    }
}

pub fn log_posterior_unnorm(p: &MlpParams, ds: &LabeledDataset, prior: &PriorSpec) -> Result<f64> {
    let target = PosteriorTarget::new(p.arch.clone(), ds, *prior)?;
    let mut g = vec![0.0; p.theta.len()];
    Ok(target.log_density_grad(&p.theta, &mut g))
}

pub fn log_posterior_gradient(
    p: &MlpParams,
    ds: &LabeledDataset,
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    let target = PosteriorTarget::new(p.arch.clone(), ds, *prior)?;
    let mut g = vec![0.0; p.theta.len()];
    target.log_density_grad(&p.theta, &mut g);
    Ok(g)
}

/// Leapfrog integration of `L` steps for `H = -log p(theta) + |r|^2 / 2`.
///
/// `grad_fn` returns `log p` at its argument and writes the gradient of
/// `log p`. A non-finite state anywhere along the path is a divergence.
pub fn leapfrog<F>(
    theta: &[f64],
    momentum: &[f64],
    step_size: f64,
    steps: usize,
    mut grad_fn: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if theta.len() != momentum.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: momentum.len(),
        });
    }
    let mut q = theta.to_vec();
    let mut r = momentum.to_vec();
    if steps == 0 {
        return Ok((q, r));
    }
    let mut g = vec![0.0; q.len()];
    grad_fn(&q, &mut g);
    integrate(&mut q, &mut r, &mut g, step_size, steps, &mut grad_fn)
        .ok_or_else(|| Error::Divergence("leapfrog produced a non-finite state".into()))?;
    Ok((q, r))
}

/// In-place leapfrog. `g` must hold the gradient at `q` on entry and holds
/// the gradient at the final `q` on exit. Returns `log p` at the end point.
fn integrate<F>(
    q: &mut [f64],
    r: &mut [f64],
    g: &mut [f64],
    eps: f64,
    steps: usize,
    grad_fn: &mut F,
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut logp = f64::NAN;
    for (ri, gi) in r.iter_mut().zip(g.iter()) {
        *ri += 0.5 * eps * gi;
    }
    for step in 0..steps {
        for (qi, ri) in q.iter_mut().zip(r.iter()) {
            *qi += eps * ri;
        }
        logp = grad_fn(q, g);
        if !logp.is_finite() {
            return None;
        }
        let scale = if step + 1 == steps { 0.5 } else { 1.0 };
        for (ri, gi) in r.iter_mut().zip(g.iter()) {
            *ri += scale * eps * gi;
        }
    }
    if q.iter().chain(r.iter()).all(|v| v.is_finite()) {
        Some(logp)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Retained samples after burn-in and thinning.
    pub samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Adapt the step size during burn-in.
    pub adapt: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            leapfrog_steps: 10,
            samples: 200,
            burn_in: 500,
            thinning: 5,
            seed: 0,
            adapt: true,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if self.leapfrog_steps == 0 || self.samples == 0 || self.thinning == 0 {
            return Err(Error::InvalidArgument(
                "leapfrog steps, samples and thinning must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.samples * self.thinning
    }
}

/// Raw output of one HMC chain.
#[derive(Debug, Clone)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    /// Accepted fraction of post-burn-in proposals.
    pub acceptance_rate: f64,
    /// Hamiltonian of the chain state after every post-burn-in iteration.
    pub energies: Vec<f64>,
    /// Step size used after burn-in.
    pub step_size: f64,
    pub divergences: usize,
    pub warnings: Vec<String>,
}

/// Runs one HMC chain from `init`.
///
/// Momenta are redrawn from `N(0, I)` every iteration and proposals are
/// accepted with probability `min(1, exp(H_old - H_new))`. With `adapt`,
/// the burn-in phase nudges `log eps` by `k_t (a_t - 0.75)` after every
/// proposal (`a_t` its acceptance probability) and the post-burn-in step is
/// the geometric mean over the second half of burn-in.
pub fn run_hmc<T: LogDensity + ?Sized>(
    target: &T,
    init: Vec<f64>,
    cfg: &HmcConfig,
) -> Result<Chain> {
    cfg.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut q = init;
    let mut g = vec![0.0; d];
    let mut logp = target.log_density_grad(&q, &mut g);
    if !logp.is_finite() {
        return Err(Error::Divergence(
            "initial state has non-finite log density".into(),
        ));
    }

    let target_accept = 0.5 * (TARGET_ACCEPTANCE.0 + TARGET_ACCEPTANCE.1);
    let mut log_eps = cfg.step_size.ln();
    let mut log_eps_sum = 0.0;
    let mut log_eps_count = 0usize;
    let mut eps = cfg.step_size;

    let mut q_new = vec![0.0; d];
    let mut g_new = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut energies = Vec::with_capacity(cfg.samples * cfg.thinning);
    let mut accepted = 0usize;
    let mut divergences = 0usize;
    let mut grad_fn = |x: &[f64], out: &mut [f64]| target.log_density_grad(x, out);

    for it in 0..cfg.total_iterations() {
        let burning = it < cfg.burn_in;
        for ri in r.iter_mut() {
            *ri = rng.sample(StandardNormal);
        }
        let h_old = -logp + 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        q_new.copy_from_slice(&q);
        g_new.copy_from_slice(&g);
        let end = integrate(
            &mut q_new,
            &mut r,
            &mut g_new,
            eps,
            cfg.leapfrog_steps,
            &mut grad_fn,
        );
        let (accept_prob, h_new) = match end {
            Some(lp) => {
                let h_new = -lp + 0.5 * r.iter().map(|v| v * v).sum::<f64>();
                let a = if h_new.is_finite() {
                    (h_old - h_new).exp().min(1.0)
                } else {
                    0.0
                };
                (a, h_new)
            }
            None => {
                divergences += 1;
                (0.0, f64::INFINITY)
            }
        };
        let u: f64 = rng.random();
        let accept = u < accept_prob;
        if accept {
            std::mem::swap(&mut q, &mut q_new);
            std::mem::swap(&mut g, &mut g_new);
            logp = -h_new + 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        }

        if burning {
            if cfg.adapt {
                let rate = 0.3 / (1.0 + it as f64 / 50.0).sqrt();
                log_eps += rate * (accept_prob - target_accept);
                eps = log_eps.exp();
                if 2 * it >= cfg.burn_in {
                    log_eps_sum += log_eps;
                    log_eps_count += 1;
                }
                if it + 1 == cfg.burn_in && log_eps_count > 0 {
                    eps = (log_eps_sum / log_eps_count as f64).exp();
                }
            }
            continue;
        }
        if accept {
            accepted += 1;
        }
        energies.push(if accept { h_new } else { h_old });
        if (it - cfg.burn_in + 1) % cfg.thinning == 0 {
            samples.push(q.clone());
        }
    }

    let post = cfg.samples * cfg.thinning;
    let acceptance_rate = accepted as f64 / post as f64;
    let mut warnings = Vec::new();
    if acceptance_rate < LOW_ACCEPTANCE_WARNING {
        let msg = format!(
            "HMC acceptance rate {acceptance_rate:.3} below {LOW_ACCEPTANCE_WARNING} (step size {eps:.3e} too large?)"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Chain {
        samples,
        acceptance_rate,
        energies,
        step_size: eps,
        divergences,
        warnings,
    })
}

/// Posterior samples of an MLP with chain diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub members: Vec<MlpParams>,
    pub acceptance_rate: f64,
    pub energies: Vec<f64>,
    pub prior: PriorSpec,
    pub config: HmcConfig,
    /// Step size after adaptation.
    pub step_size: f64,
    pub warnings: Vec<String>,
}

impl PosteriorEnsemble {
    pub fn arch(&self) -> &Architecture {
        &self.members[0].arch
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Ensemble of explicit members, e.g. independently trained networks.
    pub fn from_members(members: Vec<MlpParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one member".into(),
            ));
        }
        if members.iter().any(|m| m.arch != members[0].arch) {
            return Err(Error::InvalidArgument(
                "ensemble members differ in architecture".into(),
            ));
        }
        Ok(Self {
            members,
            acceptance_rate: f64::NAN,
            energies: Vec::new(),
            prior: PriorSpec::default(),
            config: HmcConfig::default(),
            step_size: f64::NAN,
            warnings: Vec::new(),
        })
    }

    /// Pools chains run with independent seeds. The acceptance rate is the
    /// member-weighted mean.
    pub fn merge(chains: Vec<PosteriorEnsemble>) -> Result<Self> {
        let mut it = chains.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
        let mut weighted = out.acceptance_rate * out.len() as f64;
        for c in it {
            if c.arch() != out.arch() {
                return Err(Error::InvalidArgument(
                    "cannot merge different architectures".into(),
                ));
            }
            weighted += c.acceptance_rate * c.len() as f64;
            out.members.extend(c.members);
            out.energies.extend(c.energies);
            out.warnings.extend(c.warnings);
        }
        out.acceptance_rate = weighted / out.len() as f64;
        Ok(out)
    }
}

/// HMC from a seeded random initialisation (unit init scale).
pub fn hmc_sample(
    arch: &Architecture,
    ds: &LabeledDataset,
    prior: &PriorSpec,
    cfg: &HmcConfig,
) -> Result<PosteriorEnsemble> {
    let mut rng = rng_from_seed(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let init = MlpParams::random_init(arch.clone(), 1.0, &mut rng);
    hmc_sample_from(&init, ds, prior, cfg)
}

/// HMC started at `init`, e.g. a gradient-descent solution.
pub fn hmc_sample_from(
    init: &MlpParams,
    ds: &LabeledDataset,
    prior: &PriorSpec,
    cfg: &HmcConfig,
) -> Result<PosteriorEnsemble> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "HMC needs a non-empty dataset".into(),
        ));
    }
    let target = PosteriorTarget::new(init.arch.clone(), ds, *prior)?;
    let chain = run_hmc(&target, init.theta.clone(), cfg)?;
    let members = chain
        .samples
        .into_iter()
        .map(|theta| MlpParams {
            arch: init.arch.clone(),
            theta,
        })
        .collect();
    Ok(PosteriorEnsemble {
        members,
        acceptance_rate: chain.acceptance_rate,
        energies: chain.energies,
        prior: *prior,
        config: cfg.clone(),
        step_size: chain.step_size,
        warnings: chain.warnings,
    })
}

/// Softmax outputs of every member on every row: `out[i]` is `N x C` for
/// member `i`.
pub fn member_probs_batch(ens: &PosteriorEnsemble, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    ens.members.iter().map(|m| mlp::probs_batch(m, x)).collect()
}

/// Posterior predictive `(1/m) sum_i softmax(f(x; w_i))` for every row.
pub fn predictive_batch(ens: &PosteriorEnsemble, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let probs = member_probs_batch(ens, x)?;
    let mut mean = Array2::zeros(probs[0].raw_dim());
    for p in &probs {
        mean += p;
    }
    Ok(mean / probs.len() as f64)
}

pub fn predictive(ens: &PosteriorEnsemble, x: &[f64]) -> Result<Vec<f64>> {
    if ens.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(predictive_batch(ens, view)?.into_raw_vec_and_offset().0)
}

pub fn format_ensemble(ens: &PosteriorEnsemble) -> String {
    let a = ens.arch();
    let c = &ens.config;
    let mut out = String::new();
    writeln!(
        out,
        "# ensemble input_dim={} layers={} activation={} prior_variance={} step_size={} \
         leapfrog_steps={} samples={} burn_in={} thinning={} seed={} adapt={} \
         adapted_step_size={} acceptance_rate={} members={}",
        a.input_dim,
        a.label().replace('-', ","),
        a.activation.name(),
        ens.prior.variance,
        c.step_size,
        c.leapfrog_steps,
        c.samples,
        c.burn_in,
        c.thinning,
        c.seed,
        c.adapt,
        ens.step_size,
        ens.acceptance_rate,
        ens.len()
    )
    .unwrap();
    for m in &ens.members {
        out.push_str(&format_checkpoint(m, c.seed));
    }
    out
}

pub fn write_ensemble(ens: &PosteriorEnsemble, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ensemble(ens)).map_err(|e| Error::io(path, e))
}

pub fn read_ensemble(path: impl AsRef<Path>) -> Result<PosteriorEnsemble> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ensemble(&text, path)
}

pub fn parse_ensemble(text: &str, path: &Path) -> Result<PosteriorEnsemble> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hl, header) = lines
        .next()
        .ok_or_else(|| err(0, "empty ensemble file".into()))?;
    let f = parse_header(header, "ensemble")
        .ok_or_else(|| err(hl, "expected '# ensemble' header".into()))?;
    macro_rules! field {
        ($key:literal) => {
            f.get($key)
                .ok_or_else(|| err(hl, format!("header lacks {}=", $key)))?
                .parse()
                .map_err(|e| err(hl, format!("bad {}: {e}", $key)))?
        };
    }
    let prior = PriorSpec {
        variance: field!("prior_variance"),
    };
    let config = HmcConfig {
        step_size: field!("step_size"),
        leapfrog_steps: field!("leapfrog_steps"),
        samples: field!("samples"),
        burn_in: field!("burn_in"),
        thinning: field!("thinning"),
        seed: field!("seed"),
        adapt: field!("adapt"),
    };
    let step_size: f64 = field!("adapted_step_size");
    let acceptance_rate: f64 = field!("acceptance_rate");
    let count: usize = field!("members");
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        members.push(parse_checkpoint(&mut lines, path)?.0);
    }
    if count == 0 {
        return Err(err(hl, "ensemble has no members".into()));
    }
    Ok(PosteriorEnsemble {
        members,
        acceptance_rate,
        energies: Vec::new(),
        prior,
        config,
        step_size,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_rhombus_dataset;
    use crate::mlp::{cross_entropy_loss, softmax};

    #[test]
    fn zero_steps_is_identity() {
        let (q, r) = leapfrog(&[0.3, -1.0], &[0.5, 0.2], 0.1, 0, |_, g| {
            g.fill(0.0);
            0.0
        })
        .unwrap();
        assert_eq!(q, vec![0.3, -1.0]);
        assert_eq!(r, vec![0.5, 0.2]);
    }

    #[test]
    fn leapfrog_reports_divergence() {
        let res = leapfrog(&[1.0], &[1.0], 1.0, 3, |x, g| {
            g[0] = 1e308 * x[0];
            f64::INFINITY
        });
        assert!(matches!(res, Err(Error::Divergence(_))));
    }

    #[test]
    fn gaussian_energy_drift_is_small() {
        let target = GaussianTarget::standard(1);
        let (q0, r0) = (vec![0.7], vec![-0.4]);
        let h = |q: &[f64], r: &[f64]| 0.5 * q[0] * q[0] + 0.5 * r[0] * r[0];
        let (q, r) = leapfrog(&q0, &r0, 0.01, 100, |x, g| target.log_density_grad(x, g)).unwrap();
        assert!((h(&q, &r) - h(&q0, &r0)).abs() < 1e-3);
    }

    #[test]
    fn prior_term_vanishes_at_origin_and_for_flat_prior() {
        let ds = sample_rhombus_dataset(20, None, 1).unwrap();
        let arch = Architecture::new(2, vec![4, 2]).unwrap();
        let zero = MlpParams::zeros(arch.clone());
        let prior = PriorSpec::default();
        let lp = log_posterior_unnorm(&zero, &ds, &prior).unwrap();
        assert_eq!(lp, -cross_entropy_loss(&zero, &ds));

        let p = MlpParams::random_init(arch, 1.0, &mut rng_from_seed(2));
        let flat = PriorSpec { variance: 1e12 };
        let lp = log_posterior_unnorm(&p, &ds, &flat).unwrap();
        assert!((lp + cross_entropy_loss(&p, &ds)).abs() < 1e-6);
        assert!(log_posterior_unnorm(&p, &ds, &PriorSpec { variance: 0.0 }).is_err());
    }

    #[test]
    fn tiny_step_is_almost_always_accepted() {
        let cfg = HmcConfig {
            step_size: 1e-6,
            leapfrog_steps: 1,
            samples: 500,
            burn_in: 0,
            thinning: 1,
            seed: 3,
            adapt: false,
        };
        let chain = run_hmc(&GaussianTarget::standard(3), vec![0.5, -0.5, 2.0], &cfg).unwrap();
        assert!(chain.acceptance_rate > 0.99);
        assert_eq!(chain.samples.len(), 500);
        assert_eq!(chain.energies.len(), 500);
    }

    #[test]
    fn huge_step_warns() {
        let cfg = HmcConfig {
            step_size: 50.0,
            leapfrog_steps: 5,
            samples: 100,
            burn_in: 0,
            thinning: 1,
            seed: 1,
            adapt: false,
        };
        let mut target = GaussianTarget::standard(4);
        target.precision.iter_mut().for_each(|v| *v *= 100.0);
        let chain = run_hmc(&target, vec![0.1; 4], &cfg).unwrap();
        assert!(chain.acceptance_rate < LOW_ACCEPTANCE_WARNING);
        assert_eq!(chain.warnings.len(), 1);
    }

    #[test]
    fn adaptation_lands_in_band() {
        let cfg = HmcConfig {
            step_size: 1e-3,
            leapfrog_steps: 10,
            samples: 1000,
            burn_in: 500,
            thinning: 1,
            seed: 5,
            adapt: true,
        };
        let chain = run_hmc(&GaussianTarget::standard(20), vec![0.0; 20], &cfg).unwrap();
        assert!(
            (0.55..=0.95).contains(&chain.acceptance_rate),
            "acceptance {}",
            chain.acceptance_rate
        );
    }

    fn member(arch: &Architecture, theta: Vec<f64>) -> MlpParams {
        MlpParams::new(arch.clone(), theta).unwrap()
    }

    #[test]
    fn predictive_averages_members() {
        // One-layer nets on a 1-d input with zero weights: output = softmax(bias).
        let arch = Architecture::new(1, vec![2]).unwrap();
        let a = member(&arch, vec![0.0, 0.0, 800.0, 0.0]);
        let b = member(&arch, vec![0.0, 0.0, 0.0, 800.0]);
        let ens = PosteriorEnsemble::from_members(vec![a.clone(), b]).unwrap();
        let p = predictive(&ens, &[0.3]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        let single = PosteriorEnsemble::from_members(vec![a.clone()]).unwrap();
        let direct = softmax(&mlp::forward_logits(&a, &[0.3]).unwrap());
        assert_eq!(predictive(&single, &[0.3]).unwrap(), direct);

        let c = member(&arch, vec![0.2, -0.1, 0.3, 0.0]);
        let same = PosteriorEnsemble::from_members(vec![c.clone(), c.clone(), c.clone()]).unwrap();
        let direct = softmax(&mlp::forward_logits(&c, &[0.7]).unwrap());
        for (x, y) in predictive(&same, &[0.7]).unwrap().iter().zip(&direct) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_file_round_trip_and_merge() {
        let ds = sample_rhombus_dataset(30, None, 4).unwrap();
        let arch = Architecture::new(2, vec![3, 2]).unwrap();
        let cfg = HmcConfig {
            samples: 4,
            burn_in: 10,
            thinning: 2,
            leapfrog_steps: 5,
            step_size: 0.05,
            seed: 9,
            adapt: true,
        };
        let ens = hmc_sample(&arch, &ds, &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(ens.len(), 4);
        let back = parse_ensemble(&format_ensemble(&ens), Path::new("mem")).unwrap();
        assert_eq!(back.members, ens.members);
        assert_eq!(back.config, ens.config);
        assert_eq!(
            back.acceptance_rate.to_bits(),
            ens.acceptance_rate.to_bits()
        );

        let merged = PosteriorEnsemble::merge(vec![ens.clone(), back]).unwrap();
        assert_eq!(merged.len(), 8);
        assert!((merged.acceptance_rate - ens.acceptance_rate).abs() < 1e-15);
    }

    #[test]
    fn hmc_is_deterministic() {
        let ds = sample_rhombus_dataset(30, None, 4).unwrap();
        let arch = Architecture::new(2, vec![3, 2]).unwrap();
        let cfg = HmcConfig {
            samples: 5,
            burn_in: 5,
            thinning: 1,
            ..HmcConfig::default()
        };
        let a = hmc_sample(&arch, &ds, &PriorSpec::default(), &cfg).unwrap();
        let b = hmc_sample(&arch, &ds, &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
