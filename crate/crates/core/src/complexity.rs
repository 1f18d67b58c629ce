//! Rademacher complexity bounds, a Monte-Carlo estimator, the
//! standard-deviation surrogate and the explicit generalization bound.
//!
//! All logarithms are natural.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid_input, invalid_param, Result};
use crate::kernel::{pnorm_unchecked, population_std, root_q, Activation, SeededRng};
use crate::loss::margin_error;
use crate::network::{AdaNetModel, EvalCache, Source};

/// Where the per-depth complexities `r_k` come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComplexityProvenance {
    #[serde(rename = "explicit-bound")]
    ExplicitBound,
    #[serde(rename = "sd-surrogate")]
    SdSurrogate,
    #[serde(rename = "user-supplied")]
    UserSupplied,
}

impl std::str::FromStr for ComplexityProvenance {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" | "explicit-bound" => Ok(Self::ExplicitBound),
            "sd" | "sd-surrogate" => Ok(Self::SdSurrogate),
            "user" | "user-supplied" => Ok(Self::UserSupplied),
            other => Err(invalid_param(format!("unknown complexity kind `{other}`"))),
        }
    }
}

/// Per-depth complexity values, `values[k - 1] = r_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySchedule {
    pub values: Vec<f64>,
    pub provenance: ComplexityProvenance,
}

impl ComplexitySchedule {
    pub fn user(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid_param("complexity values must be finite and >= 0"));
        }
        Ok(Self {
            values,
            provenance: ComplexityProvenance::UserSupplied,
        })
    }

    /// `r_k`; depths past the end reuse the last value.
    pub fn at(&self, k: usize) -> f64 {
        self.values
            .get(k - 1)
            .or(self.values.last())
            .copied()
            .unwrap_or(0.0)
    }
}

fn check_nonneg(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(invalid_input(format!("{name} must be non-negative")));
    }
    Ok(())
}

/// Layer bound in terms of the layers below:
/// `2 * sum_s Lambda_{k,s} * n_s^(1/q) * R_s`.
pub fn rademacher_recursive(
    bounds_below: &[f64],
    norm_bounds: &[f64],
    layer_sizes: &[f64],
    q: f64,
) -> Result<f64> {
    if bounds_below.len() != norm_bounds.len() || bounds_below.len() != layer_sizes.len() {
        return Err(invalid_input(
            "recursive bound inputs must be aligned over s",
        ));
    }
    check_nonneg("bounds", bounds_below)?;
    check_nonneg("norm bounds", norm_bounds)?;
    check_nonneg("layer sizes", layer_sizes)?;
    Ok(2.0
        * bounds_below
            .iter()
            .zip(norm_bounds)
            .zip(layer_sizes)
            .map(|((r, lam), n)| lam * root_q(*n, q) * r)
            .sum::<f64>())
}

/// `prod_{s<=k} factor * Lambda_{s,s-1} * n_{s-1}^(1/q)`.
fn layered_capacity(
    k: usize,
    norm_bounds: &[f64],
    layer_sizes: &[usize],
    q: f64,
    factor: f64,
) -> f64 {
    (0..k)
        .map(|s| factor * norm_bounds[s] * root_q(layer_sizes[s] as f64, q))
        .product()
}

fn check_layers(k: usize, norm_bounds: &[f64], layer_sizes: &[usize]) -> Result<()> {
    if k == 0 {
        return Err(invalid_input("depth k must be >= 1"));
    }
    if norm_bounds.len() < k || layer_sizes.len() < k {
        return Err(invalid_input(format!(
            "depth {k} needs {k} norm bounds and layer sizes n_0..n_{}",
            k - 1
        )));
    }
    if layer_sizes[0] < 1 {
        return Err(invalid_input("n0 must be >= 1"));
    }
    check_nonneg("norm bounds", norm_bounds)
}

/// Explicit bound on the empirical Rademacher complexity of layer-k units
/// connected only to the layer below:
/// `r_inf * Lambda_k * N_k^(1/q) * sqrt(log(2 n0) / (2m))` with
/// `Lambda_k = prod 2 Lambda_{s,s-1}`, `N_k = prod n_{s-1}`.
///
/// `norm_bounds[s - 1] = Lambda_{s,s-1}` and `layer_sizes[s] = n_s`.
pub fn rademacher_explicit(
    k: usize,
    norm_bounds: &[f64],
    layer_sizes: &[usize],
    q: f64,
    m: usize,
    r_inf: f64,
) -> Result<f64> {
    check_layers(k, norm_bounds, layer_sizes)?;
    if m == 0 || !(r_inf >= 0.0) {
        return Err(invalid_input("m must be >= 1 and r_inf >= 0"));
    }
    let n0 = layer_sizes[0] as f64;
    Ok(r_inf
        * layered_capacity(k, norm_bounds, layer_sizes, q, 2.0)
        * ((2.0 * n0).ln() / (2.0 * m as f64)).sqrt())
}

/// Monte-Carlo estimate of the empirical Rademacher complexity of a family:
/// `n_trials` members are drawn from `sample_member` (each returns its
/// values on the m sample points), then the sup over those members of
/// `(1/m) sum_i sigma_i h(x_i)` is averaged over `n_sigma` sign draws.
/// Finite sampling of the sup makes this a lower estimate.
pub fn rademacher_mc_estimate<F>(
    mut sample_member: F,
    m: usize,
    n_trials: usize,
    n_sigma: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut SeededRng) -> Vec<f64>,
{
    if n_trials == 0 || n_sigma == 0 || m == 0 {
        return Err(invalid_input("n_trials, n_sigma and m must be >= 1"));
    }
    let mut rng = SeededRng::derive(seed, &[0]);
    let members: Vec<Vec<f64>> = (0..n_trials).map(|_| sample_member(&mut rng)).collect();
    if members.iter().any(|h| h.len() != m) {
        return Err(invalid_input("family member values must have length m"));
    }
    let sups: Vec<f64> = (0..n_sigma)
        .into_par_iter()
        .map(|draw| {
            let mut rng = SeededRng::derive(seed, &[1, draw as u64]);
            let sigma: Vec<f64> = (0..m).map(|_| rng.sign()).collect();
            members
                .iter()
                .map(|h| crate::kernel::dot(&sigma, h) / m as f64)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(sups.iter().sum::<f64>() / n_sigma as f64)
}

/// Sampler over first-layer units `x -> u . x` with `||u||_p = Lambda`.
pub fn first_layer_sampler(
    d: &Dataset,
    p: f64,
    norm_bound: f64,
) -> impl FnMut(&mut SeededRng) -> Vec<f64> + '_ {
    move |rng| {
        let mut u: Vec<f64> = (0..d.dim()).map(|_| rng.normal()).collect();
        let norm = pnorm_unchecked(&u, p);
        u.iter_mut().for_each(|v| *v *= norm_bound / norm);
        (0..d.len())
            .map(|i| crate::kernel::dot(&u, d.x(i)))
            .collect()
    }
}

/// Standard-deviation surrogate for the complexity of a depth-k candidate:
/// mean per-unit population stdev of the activated outputs of the model's
/// layer k-1 on the sample; for k = 1, the mean feature stdev. A depth whose
/// input layer does not exist yet extrapolates from the deepest existing
/// layer by a factor `2 * norm_bound` per missing layer.
pub fn sd_surrogate(
    model: &AdaNetModel,
    d: &Dataset,
    k: usize,
    activation: Activation,
    norm_bound: f64,
) -> Result<f64> {
    let mut cache = EvalCache::new(d.features());
    cache.sync(model)?;
    sd_surrogate_cached(model, &mut cache, k, activation, norm_bound)
}

pub fn sd_surrogate_cached(
    model: &AdaNetModel,
    cache: &mut EvalCache,
    k: usize,
    activation: Activation,
    norm_bound: f64,
) -> Result<f64> {
    if cache.rows() == 0 {
        return Err(invalid_input("sd surrogate of an empty dataset"));
    }
    if k == 0 {
        return Err(invalid_input("depth k must be >= 1"));
    }
    let depth = model.depth();
    if k - 1 > depth {
        let base = sd_surrogate_cached(model, cache, depth + 1, activation, norm_bound)?;
        return Ok(base * (2.0 * norm_bound).powi((k - 1 - depth) as i32));
    }
    if k == 1 {
        let n = model.input_dim();
        if n == 0 {
            return Err(invalid_input("no features"));
        }
        return Ok((0..n)
            .map(|j| population_std(cache.feature(j)))
            .sum::<f64>()
            / n as f64);
    }
    let units = model.layer_units(k - 1);
    let mut total = 0.0;
    for id in &units {
        let idx = model.unit_index(*id).expect("layer unit is indexed");
        total += population_std(cache.activated(idx, activation));
    }
    Ok(total / units.len() as f64)
}

/// Margin `rho` and confidence `delta` for the explicit bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub rho: f64,
    pub delta: f64,
}

/// Everything the explicit bound needs, detached from any model.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub margin_error: f64,
    /// `||w_k||_1` for k = 1..l.
    pub weight_norms: Vec<f64>,
    /// `n_0..n_l`.
    pub layer_sizes: Vec<usize>,
    /// `Lambda_{s,s-1}` for s = 1..l.
    pub norm_bounds: Vec<f64>,
    pub q: f64,
    pub m: usize,
    /// Sample r_inf, plugged in for its expectation.
    pub r_inf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub margin_error: f64,
    pub weighted_complexity: f64,
    pub log_l: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rho: f64,
    pub delta: f64,
    pub terms: BoundTerms,
    pub total: f64,
    pub vacuous: bool,
    /// Depth l used for the log-l terms.
    pub depth: usize,
    /// r_inf is the sample value, not its expectation.
    pub r_inf_plug_in: bool,
    /// The log-l terms vanish because l <= 1.
    pub log_l_vanishes: bool,
    /// `rho^2 m < log l`: the ceiling argument was clamped at 0.
    pub ceiling_clamped: bool,
}

/// Explicit margin bound:
/// `R_rho + (2/rho) sum_k ||w_k||_1 r_inf Lambda_k N_k^(1/q) sqrt(2 log(2 n0)/m)
///  + (2/rho) sqrt(log l / m) + C(rho, l, m, delta)`
/// with `Lambda_k = prod 4 Lambda_{s,s-1}`.
pub fn bound_from_inputs(inputs: &BoundInputs, cfg: BoundConfig) -> Result<BoundReport> {
    let BoundConfig { rho, delta } = cfg;
    if !(rho > 0.0) {
        return Err(invalid_param(format!("rho must be > 0, got {rho}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid_param(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    if inputs.m == 0 {
        return Err(invalid_input("m must be >= 1"));
    }
    let l = inputs.weight_norms.len();
    if inputs.layer_sizes.len() < l.max(1) || inputs.norm_bounds.len() < l {
        return Err(invalid_input(format!(
            "depth {l} needs layer sizes n_0..n_{l} and {l} norm bounds"
        )));
    }
    if inputs.layer_sizes[0] < 1 {
        return Err(invalid_input("n0 must be >= 1"));
    }
    check_nonneg("weight norms", &inputs.weight_norms)?;
    check_nonneg("norm bounds", &inputs.norm_bounds)?;
    let m = inputs.m as f64;
    let n0 = inputs.layer_sizes[0] as f64;
    let base = (2.0 * (2.0 * n0).ln() / m).sqrt();

    let weighted_sum: f64 = (1..=l)
        .map(|k| {
            inputs.weight_norms[k - 1]
                * inputs.r_inf
                * layered_capacity(k, &inputs.norm_bounds, &inputs.layer_sizes, inputs.q, 4.0)
                * base
        })
        .sum();
    let weighted_complexity = 2.0 / rho * weighted_sum;

    let log_l = if l >= 2 { (l as f64).ln() } else { 0.0 };
    let log_l_term = 2.0 / rho * (log_l / m).sqrt();
    let mut ceiling_clamped = false;
    let ceiling = if log_l > 0.0 {
        let arg = 4.0 / (rho * rho) * (rho * rho * m / log_l).ln();
        if arg < 0.0 {
            ceiling_clamped = true;
            0.0
        } else {
            arg.ceil()
        }
    } else {
        0.0
    };
    let c = (ceiling * log_l / m + (2.0 / delta).ln() / (2.0 * m)).sqrt();
    let total = inputs.margin_error + weighted_complexity + log_l_term + c;
    Ok(BoundReport {
        rho,
        delta,
        terms: BoundTerms {
            margin_error: inputs.margin_error,
            weighted_complexity,
            log_l: log_l_term,
            c,
        },
        total,
        vacuous: total > 1.0,
        depth: l,
        r_inf_plug_in: true,
        log_l_vanishes: l <= 1,
        ceiling_clamped,
    })
}

/// Evaluates the explicit bound for a trained model on a prepared sample.
/// `norm_bounds[s - 1] = Lambda_{s,s-1}`; missing entries repeat the last.
pub fn generalization_bound(
    model: &AdaNetModel,
    d: &Dataset,
    cfg: BoundConfig,
    norm_bounds: &[f64],
    q: f64,
) -> Result<BoundReport> {
    let scores = model.scores(d)?;
    let rho_error = margin_error(&scores, d.labels(), cfg.rho)?;
    let uses_bias = model
        .subnetworks()
        .iter()
        .flat_map(|s| s.layers.iter().flatten())
        .any(|u| u.sources.contains(&Source::Bias));
    let mut r_inf = crate::data::r_infinity(d);
    let mut n0 = model.input_dim();
    if uses_bias {
        r_inf = r_inf.max(1.0);
        n0 += 1;
    }
    let counts = model.layer_counts();
    let mut layer_sizes = vec![n0];
    layer_sizes.extend(&counts);
    let l = counts.len();
    let last = norm_bounds.last().copied().unwrap_or(1.0);
    let bounds: Vec<f64> = (0..l)
        .map(|s| norm_bounds.get(s).copied().unwrap_or(last))
        .collect();
    let inputs = BoundInputs {
        margin_error: rho_error,
        weight_norms: model.output_weight_norms_by_layer(),
        layer_sizes,
        norm_bounds: bounds,
        q,
        m: d.len(),
        r_inf,
    };
    bound_from_inputs(&inputs, cfg)
}
