//! Fitting by algorithm name, evaluation reports, and the 10-fold rotation
//! protocol with grid selection on validation accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{train_fixed_nn, train_logreg, FixedNetConfig, LogRegConfig};
use crate::data::{make_folds, standardize, Dataset, NUM_FOLDS};
use crate::driver::{train_adanet, RoundRecord, TrainConfig, WeakLearnerKind};
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::loss::{accuracy, margin_error};
use crate::network::AdaNetModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Adanet,
    AdanetCvx,
    Logreg,
    Nn,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adanet" => Ok(Algorithm::Adanet),
            "adanet-cvx" => Ok(Algorithm::AdanetCvx),
            "logreg" => Ok(Algorithm::Logreg),
            "nn" => Ok(Algorithm::Nn),
            other => Err(invalid_param(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Adanet => "adanet",
            Algorithm::AdanetCvx => "adanet-cvx",
            Algorithm::Logreg => "logreg",
            Algorithm::Nn => "nn",
        })
    }
}

fn parse_config<T: serde::de::DeserializeOwned>(config: &Value) -> Result<T> {
    serde_json::from_value(config.clone()).map_err(|e| invalid_param(format!("config: {e}")))
}

/// Checks that `config` parses for `algo`.
pub fn validate_config(algo: Algorithm, config: &Value) -> Result<()> {
    match algo {
        Algorithm::Adanet | Algorithm::AdanetCvx => parse_config::<TrainConfig>(config)?.validate(),
        Algorithm::Logreg => parse_config::<LogRegConfig>(config).map(|_| ()),
        Algorithm::Nn => parse_config::<FixedNetConfig>(config).map(|_| ()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fitted {
    pub model: AdaNetModel,
    /// Boosting rounds; empty for the baselines.
    pub records: Vec<RoundRecord>,
}

/// Standardizes features on `train`, fits `algo`, and stores the
/// standardization in the model so it applies to raw inputs.
pub fn fit(algo: Algorithm, config: &Value, train: &Dataset) -> Result<Fitted> {
    let (prepared, stats) = standardize(train)?;
    let (model, records) = match algo {
        Algorithm::Adanet | Algorithm::AdanetCvx => {
            let mut cfg: TrainConfig = parse_config(config)?;
            if algo == Algorithm::AdanetCvx {
                cfg.weak_learner = WeakLearnerKind::Cvx;
            }
            let out = train_adanet(&prepared, &cfg)?;
            (out.model, out.records)
        }
        Algorithm::Logreg => (
            train_logreg(&prepared, &parse_config(config)?)?.model,
            Vec::new(),
        ),
        Algorithm::Nn => (
            train_fixed_nn(&prepared, &parse_config(config)?)?.model,
            Vec::new(),
        ),
    };
    Ok(Fitted {
        model: model.with_input_transform(Some(stats)),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub margin_errors: BTreeMap<String, f64>,
    pub m: usize,
}

/// Accuracy and margin errors of `model` on raw (untransformed) data.
pub fn evaluate(model: &AdaNetModel, d: &Dataset, rhos: &[f64]) -> Result<EvalReport> {
    let prepared = model.prepare_inputs(d)?;
    let scores = model.scores(&prepared)?;
    let mut margin_errors = BTreeMap::new();
    for &rho in rhos {
        margin_errors.insert(rho.to_string(), margin_error(&scores, d.labels(), rho)?);
    }
    Ok(EvalReport {
        accuracy: accuracy(&scores, d.labels())?,
        margin_errors,
        m: d.len(),
    })
}

/// Deep-merges `overrides` into `base`. Keys containing dots address
/// nested objects, so `{"sgd.learning_rate": 0.1}` sets one field of `sgd`.
pub fn merge_config(base: &Value, overrides: &Value) -> Value {
    let mut out = base.clone();
    if let Value::Object(map) = overrides {
        for (key, value) in map {
            let path: Vec<&str> = key.split('.').collect();
            set_path(&mut out, &path, value);
        }
    }
    out
}

fn set_path(target: &mut Value, path: &[&str], value: &Value) {
    if !target.is_object() {
        *target = Value::Object(Map::new());
    }
    let map = target.as_object_mut().expect("object");
    if path.len() == 1 {
        match (map.get_mut(path[0]), value) {
            (Some(existing @ Value::Object(_)), Value::Object(_)) => {
                *existing = merge_config(existing, value);
            }
            _ => {
                map.insert(path[0].to_string(), value.clone());
            }
        }
    } else {
        let child = map.entry(path[0].to_string()).or_insert(Value::Null);
        set_path(child, &path[1..], value);
    }
}

/// Cartesian product of the axes `{name: [values...]}`, in key order with
/// the last key varying fastest.
pub fn expand_grid(axes: &Value) -> Result<Vec<Value>> {
    let map = axes
        .as_object()
        .ok_or_else(|| invalid_param("grid must be an object of value lists"))?;
    let mut points = vec![Map::new()];
    for (key, values) in map {
        let values = values
            .as_array()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| invalid_param(format!("grid axis `{key}` must be a non-empty list")))?;
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(points.into_iter().map(Value::Object).collect())
}

/// Default search ranges over lambda, units, learning rate and norm bound.
pub fn default_grid(algo: Algorithm) -> Value {
    let lambda = serde_json::json!([0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4]);
    let eta = serde_json::json!([1e-4, 1e-3, 1e-2, 1e-1]);
    let units = serde_json::json!([100, 150, 250]);
    let bounds = serde_json::json!([[1.0], [1.005], [1.01], [1.1], [1.2]]);
    match algo {
        Algorithm::Adanet => serde_json::json!({
            "lambda": lambda, "units": units, "sgd.learning_rate": eta, "norm_bounds": bounds,
        }),
        Algorithm::AdanetCvx => serde_json::json!({ "lambda": lambda, "norm_bounds": bounds }),
        Algorithm::Logreg => serde_json::json!({ "learning_rate": eta, "lambda": lambda }),
        Algorithm::Nn => serde_json::json!({
            "layers": [1, 2, 3], "units": units, "learning_rate": eta, "lambda": lambda,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub test_fold: usize,
    pub validation_fold: usize,
    pub train_folds: Vec<usize>,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub params: Value,
    pub validation: Vec<f64>,
    pub test: Vec<f64>,
    pub validation_mean: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub algo: Algorithm,
    pub seed: u64,
    pub config: Value,
    pub rotations: Vec<Rotation>,
    /// Times each example served as a test example across rotations.
    pub test_uses: Vec<usize>,
    pub grid: Vec<GridResult>,
    pub selected: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub summary: String,
}

/// Sample (n - 1) standard deviation.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = crate::kernel::mean(v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

/// Runs all 10 rotations (fold i tests, fold i+1 validates, the other eight
/// train) for every grid point, selects the point with the highest mean
/// validation accuracy (first on ties) and reports its test accuracy.
pub fn cross_validate(
    d: &Dataset,
    algo: Algorithm,
    config: &Value,
    grid: &[Value],
    seed: u64,
) -> Result<CvReport> {
    if d.len() < NUM_FOLDS {
        return Err(invalid_input(format!(
            "cross-validation needs at least {NUM_FOLDS} examples"
        )));
    }
    if grid.is_empty() {
        return Err(invalid_param("empty grid"));
    }
    let configs: Vec<Value> = grid.iter().map(|g| merge_config(config, g)).collect();
    for c in &configs {
        validate_config(algo, c)?;
    }
    let folds = (0..NUM_FOLDS)
        .map(|i| make_folds(d, i, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut test_uses = vec![0; d.len()];
    let rotations: Vec<Rotation> = folds
        .iter()
        .map(|f| {
            let test = f.test_indices();
            for &i in &test {
                test_uses[i] += 1;
            }
            Rotation {
                test_fold: f.test_fold,
                validation_fold: f.validation_fold,
                train_folds: f.train_folds(),
                train_size: f.train_indices().len(),
                validation_size: f.validation_indices().len(),
                test_size: test.len(),
            }
        })
        .collect();

    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|g| (0..NUM_FOLDS).map(move |i| (g, i)))
        .collect();
    let scores = tasks
        .par_iter()
        .map(|&(g, i)| {
            let f = &folds[i];
            let fitted = fit(algo, &configs[g], &d.subset(&f.train_indices()))?;
            let val = evaluate(&fitted.model, &d.subset(&f.validation_indices()), &[])?;
            let test = evaluate(&fitted.model, &d.subset(&f.test_indices()), &[])?;
            Ok((val.accuracy, test.accuracy))
        })
        .collect::<Result<Vec<_>>>()?;

    let grid_results: Vec<GridResult> = configs
        .iter()
        .zip(grid)
        .enumerate()
        .map(|(g, (_, params))| {
            let rows = &scores[g * NUM_FOLDS..(g + 1) * NUM_FOLDS];
            let validation: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let test: Vec<f64> = rows.iter().map(|r| r.1).collect();
            GridResult {
                params: params.clone(),
                validation_mean: crate::kernel::mean(&validation),
                test_mean: crate::kernel::mean(&test),
                test_std: sample_std(&test),
                validation,
                test,
            }
        })
        .collect();
    let mut selected = 0;
    for (g, r) in grid_results.iter().enumerate() {
        if r.validation_mean > grid_results[selected].validation_mean {
            selected = g;
        }
    }
    let best = &grid_results[selected];
    Ok(CvReport {
        algo,
        seed,
        config: config.clone(),
        rotations,
        test_uses,
        test_mean: best.test_mean,
        test_std: best.test_std,
        summary: format_mean_std(best.test_mean, best.test_std),
        selected,
        grid: grid_results,
    })
}
