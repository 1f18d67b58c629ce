//! Comparison models stored in the same document format: l1-regularized
//! logistic regression and fixed-architecture relu networks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid_param, Error, Result};
use crate::kernel::{Activation, Matrix, SeededRng};
use crate::loss::SurrogateLoss;
use crate::network::{AdaNetModel, ConnectionPolicy, Source, Subnetwork, Unit};
use crate::solver::{prox_solve, ObjectiveSpec, SolveOptions, SolveReport};
use crate::weaklearner::{CandidateNet, NetProblem, Regularizer, SgdConfig, TrainSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegConfig {
    /// First trial step of the proximal gradient search.
    pub learning_rate: f64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lambda: 1e-4,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegFit {
    pub model: AdaNetModel,
    pub report: SolveReport,
}

/// Minimizes `(1/m) sum_i log(1 + exp(-y_i (w . x_i + b))) + lambda ||w||_1`.
/// The model is a single layer-1 unit reading the features and the
/// constant input, with output weight 1.
pub fn train_logreg(d: &Dataset, cfg: &LogRegConfig) -> Result<LogRegFit> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(invalid_param("lambda must be finite and >= 0"));
    }
    let n = d.dim();
    let m = d.len();
    let mut data = Vec::with_capacity(m * (n + 1));
    for i in 0..m {
        data.extend_from_slice(d.x(i));
        data.push(1.0);
    }
    let design = Matrix::new(m, n + 1, data)?;
    let mut penalties = vec![cfg.lambda; n];
    penalties.push(0.0);
    let spec = ObjectiveSpec::with_penalties(
        SurrogateLoss::Logistic,
        vec![0.0; m],
        d.labels(),
        &design,
        penalties,
    )?;
    let opts = SolveOptions {
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        initial_step: cfg.learning_rate,
    };
    let report = prox_solve(&spec, &vec![0.0; n + 1], opts)?;
    if !report.value.is_finite() {
        return Err(Error::TrainingDiverged {
            iteration: report.iterations,
        });
    }
    let mut sources: Vec<Source> = (0..n).map(Source::Feature).collect();
    sources.push(Source::Bias);
    let sub = Subnetwork {
        round: 1,
        depth: 1,
        gamma: 0.0,
        layers: vec![vec![Unit {
            sources,
            u: report.w.clone(),
            activation: Activation::Identity,
        }]],
    };
    let hyper = serde_json::to_value(cfg).map_err(|e| Error::Numeric(e.to_string()))?;
    let model = AdaNetModel::empty(n, SurrogateLoss::Logistic)
        .with_hyperparams(hyper)
        .attach_subnetwork(sub, &[1.0], ConnectionPolicy::Full)?;
    Ok(LogRegFit { model, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedNetConfig {
    /// Hidden layers l.
    pub layers: usize,
    /// Units per hidden layer.
    pub units: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Use a squared l2 penalty instead of l1.
    pub l2: bool,
    pub batch_size: usize,
    pub iterations: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for FixedNetConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            units: 10,
            learning_rate: 0.01,
            lambda: 0.0,
            l2: false,
            batch_size: 100,
            iterations: 10_000,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedNetFit {
    pub model: AdaNetModel,
    pub summary: TrainSummary,
}

/// Trains an `l`-hidden-layer network on the logistic loss by mini-batch
/// SGD. The result is one subnetwork of depth `l + 1` whose single top unit
/// combines the last hidden layer, with output weight 1 and a trained
/// output bias.
pub fn train_fixed_nn(d: &Dataset, cfg: &FixedNetConfig) -> Result<FixedNetFit> {
    if cfg.layers == 0 || cfg.units == 0 {
        return Err(invalid_param("layers and units must be >= 1"));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(invalid_param("lambda must be finite and >= 0"));
    }
    let problem = NetProblem::new(
        d.features(),
        d.labels(),
        vec![0.0; d.len()],
        SurrogateLoss::Logistic,
    )?;
    let mut widths = vec![cfg.units; cfg.layers];
    widths.push(1);
    let mut rng = SeededRng::derive(cfg.seed, &[0]);
    let mut net = CandidateNet::init(&problem, &widths, cfg.activation, true, &mut rng)?
        .with_fixed_output(vec![1.0])?
        .with_output_bias();
    let reg = if cfg.l2 {
        Regularizer {
            weight_l2: cfg.lambda,
            ..Regularizer::default()
        }
    } else {
        Regularizer {
            weight_l1: cfg.lambda,
            ..Regularizer::default()
        }
    };
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        iterations: cfg.iterations,
        dropout_rate: 0.0,
        seed: cfg.seed,
    };
    let summary = net.train(&problem, &sgd, &reg, None, 1)?;
    let hyper = serde_json::to_value(cfg).map_err(|e| Error::Numeric(e.to_string()))?;
    let model = AdaNetModel::empty(d.dim(), SurrogateLoss::Logistic)
        .with_hyperparams(hyper)
        .attach_subnetwork(
            net.to_subnetwork(&problem, 1, 0.0)?,
            &[1.0],
            ConnectionPolicy::Full,
        )?
        .with_bias(net.output_bias());
    Ok(FixedNetFit { model, summary })
}
