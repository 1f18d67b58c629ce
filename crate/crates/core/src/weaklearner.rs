//! Candidate subnetworks: stochastic-gradient training of a layered block
//! on the boosting objective, and the closed-form dual-norm unit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::kernel::{
    dual_exponent, pnorm_unchecked, project_to_ball, Activation, Matrix, SeededRng,
};
use crate::loss::{boosting_distribution, SurrogateLoss};
use crate::network::{AdaNetModel, ConnectionPolicy, EvalCache, Source, Subnetwork, Unit, UnitId};

/// Extra penalty on the candidate's temporary output weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    None,
    /// `Gamma_h ||w||_1`.
    AdanetR,
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PenaltyMode::None),
            "adanet-r" => Ok(PenaltyMode::AdanetR),
            other => Err(invalid_param(format!("unknown penalty mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 100,
            iterations: 10_000,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_param("learning rate must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid_param("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid_param("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

/// A candidate of `depth` layers with `units` units each.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSpec {
    pub round: u32,
    pub depth: usize,
    pub units: usize,
    pub policy: ConnectionPolicy,
    pub activation: Activation,
    /// Layer-1 units read a constant-1 input.
    pub input_bias: bool,
    /// Project each unit's weights onto the `(p, Lambda)` ball after every step.
    pub projection: Option<(f64, f64)>,
    pub penalty: PenaltyMode,
    /// `Gamma_h`, used by [`PenaltyMode::AdanetR`].
    pub gamma: f64,
    pub sgd: SgdConfig,
}

impl CandidateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.units == 0 {
            return Err(invalid_param("candidate depth and width must be >= 1"));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid_param("gamma must be >= 0"));
        }
        if let Some((p, lambda)) = self.projection {
            if p.is_nan() || p < 1.0 || !(lambda > 0.0) {
                return Err(invalid_param("projection needs p >= 1 and Lambda > 0"));
            }
        }
        self.sgd.validate()
    }
}

/// Activated outputs of existing units a candidate layer may read.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBlock {
    pub ids: Vec<UnitId>,
    /// m x ids.len(), row-major.
    values: Vec<f64>,
}

impl PriorBlock {
    fn empty() -> Self {
        Self {
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.ids.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        let p = self.width();
        &self.values[i * p..(i + 1) * p]
    }
}

/// A training problem for a layered network:
/// `(1/m) sum_i Phi(a_i - y_i f(x_i))` plus a regularizer.
#[derive(Clone, Debug)]
pub struct NetProblem<'a> {
    features: &'a Matrix,
    labels: &'a [f64],
    offsets: Vec<f64>,
    loss: SurrogateLoss,
    /// `priors[k - 1]` feeds layer k; always empty for k = 1.
    priors: Vec<PriorBlock>,
}

impl<'a> NetProblem<'a> {
    /// A plain problem without existing units.
    pub fn new(
        features: &'a Matrix,
        labels: &'a [f64],
        offsets: Vec<f64>,
        loss: SurrogateLoss,
    ) -> Result<Self> {
        if labels.len() != features.rows() || offsets.len() != features.rows() {
            return Err(invalid_input(
                "labels and offsets must have one entry per row",
            ));
        }
        Ok(Self {
            features,
            labels,
            offsets,
            loss,
            priors: Vec::new(),
        })
    }

    /// The round objective for a depth-`depth` candidate: offsets
    /// `1 - y_i f_{t-1}(x_i)` and, for each layer k >= 2, the activated
    /// layer-(k-1) units of `model` permitted by `policy`.
    pub fn for_candidate(
        model: &AdaNetModel,
        cache: &mut EvalCache,
        features: &'a Matrix,
        labels: &'a [f64],
        depth: usize,
        policy: ConnectionPolicy,
        activation: Activation,
    ) -> Result<Self> {
        cache.sync(model)?;
        let scores = cache.scores(model);
        let offsets = scores
            .iter()
            .zip(labels)
            .map(|(f, y)| 1.0 - y * f)
            .collect();
        let mut problem = Self::new(features, labels, offsets, model.loss())?;
        problem.priors.push(PriorBlock::empty());
        for k in 2..=depth {
            let ids = match policy {
                ConnectionPolicy::Full | ConnectionPolicy::Dropout => model.layer_units(k - 1),
                ConnectionPolicy::Previous => model.previous_round_layer_units(k - 1),
            };
            let m = features.rows();
            let mut values = vec![0.0; m * ids.len()];
            for (c, id) in ids.iter().enumerate() {
                let idx = model.unit_index(*id).expect("listed unit is indexed");
                for (i, v) in cache.activated(idx, activation).iter().enumerate() {
                    values[i * ids.len() + c] = *v;
                }
            }
            problem.priors.push(PriorBlock { ids, values });
        }
        Ok(problem)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn prior(&self, k: usize) -> Option<&PriorBlock> {
        self.priors.get(k - 1).filter(|p| p.width() > 0)
    }

    /// Existing units feeding layer `k`.
    pub fn prior_ids(&self, k: usize) -> &[UnitId] {
        self.prior(k).map_or(&[], |p| &p.ids)
    }

    fn prior_width(&self, k: usize) -> usize {
        self.prior(k).map_or(0, PriorBlock::width)
    }
}

/// Penalties applied during network training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    /// l1 on the output weights.
    pub output_l1: f64,
    /// l1 on every inner weight.
    pub weight_l1: f64,
    /// Squared l2 on every inner weight.
    pub weight_l2: f64,
}

/// Multipliers on connections from prior units: `0` for dropped and
/// `1 / (1 - rate)` for kept, one row per candidate unit.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub prior: Vec<UnitId>,
    pub units: usize,
    pub scale: Vec<f64>,
}

impl DropoutMask {
    pub fn get(&self, unit: usize, prior: usize) -> f64 {
        self.scale[unit * self.prior.len() + prior]
    }
}

/// Bernoulli keep-mask over the connections from `units` candidate units to
/// the `prior` units of earlier subnetworks, drawn from a stream keyed by
/// seed, round, training step and layer.
pub fn dropout_mask(
    rate: f64,
    seed: u64,
    round: u32,
    step: u64,
    layer: usize,
    units: usize,
    prior: &[UnitId],
) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid_param("dropout rate must be in [0, 1)"));
    }
    let keep = 1.0 / (1.0 - rate);
    let n = units * prior.len();
    let scale = if rate == 0.0 {
        vec![1.0; n]
    } else {
        let mut rng = SeededRng::derive(seed, &[u64::from(round), step, layer as u64, 0xd0]);
        (0..n)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect()
    };
    Ok(DropoutMask {
        prior: prior.to_vec(),
        units,
        scale,
    })
}

/// A layered network trained by stochastic gradient. Layer 1 reads the
/// features (and the constant input when `input_bias` is set); layer k >= 2
/// reads the activated layer k-1 of this network followed by the prior
/// units supplied by the problem. The output is `w . h_top + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateNet {
    activation: Activation,
    input_bias: bool,
    widths: Vec<usize>,
    fan_ins: Vec<usize>,
    /// `weights[k - 1]`: widths[k-1] x fan_ins[k-1], row-major.
    weights: Vec<Vec<f64>>,
    output: Vec<f64>,
    output_bias: f64,
    train_output: bool,
    train_bias: bool,
}

/// Per-example activations kept for backpropagation.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl CandidateNet {
    /// Glorot-uniform initialization of inner and output weights.
    pub fn init(
        problem: &NetProblem<'_>,
        widths: &[usize],
        activation: Activation,
        input_bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid_param("layer widths must be >= 1"));
        }
        let n0 = problem.features.cols() + usize::from(input_bias);
        let fan_ins: Vec<usize> = (0..widths.len())
            .map(|k| {
                if k == 0 {
                    n0
                } else {
                    widths[k - 1] + problem.prior_width(k + 1)
                }
            })
            .collect();
        let mut weights = Vec::with_capacity(widths.len());
        for k in 0..widths.len() {
            let fan_out = widths.get(k + 1).copied().unwrap_or(1);
            let a = (6.0 / (fan_ins[k] + fan_out) as f64).sqrt();
            weights.push(
                (0..widths[k] * fan_ins[k])
                    .map(|_| rng.uniform_range(-a, a))
                    .collect(),
            );
        }
        let top = *widths.last().unwrap();
        let a = (6.0 / (top + 1) as f64).sqrt();
        let output = (0..top).map(|_| rng.uniform_range(-a, a)).collect();
        Ok(Self {
            activation,
            input_bias,
            widths: widths.to_vec(),
            fan_ins,
            weights,
            output,
            output_bias: 0.0,
            train_output: true,
            train_bias: false,
        })
    }

    /// Fixes the output weights instead of training them.
    pub fn with_fixed_output(mut self, output: Vec<f64>) -> Result<Self> {
        if output.len() != *self.widths.last().unwrap() {
            return Err(invalid_input("one output weight per top unit"));
        }
        self.output = output;
        self.train_output = false;
        Ok(self)
    }

    /// Trains an additive output bias, starting from 0.
    pub fn with_output_bias(mut self) -> Self {
        self.train_bias = true;
        self
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output
    }

    pub fn output_bias(&self) -> f64 {
        self.output_bias
    }

    /// Trainable parameters: inner weights layer by layer, then output
    /// weights and bias when trained.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.weights.iter().flatten().copied().collect();
        if self.train_output {
            p.extend(&self.output);
        }
        if self.train_bias {
            p.push(self.output_bias);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(invalid_input(format!(
                "{} parameters, expected {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.weights {
            layer.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        if self.train_output {
            self.output.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        if self.train_bias {
            self.output_bias = it.next().unwrap();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + if self.train_output {
                self.output.len()
            } else {
                0
            }
            + usize::from(self.train_bias)
    }

    fn check_problem(&self, problem: &NetProblem<'_>) -> Result<()> {
        let n0 = problem.features.cols() + usize::from(self.input_bias);
        if self.fan_ins[0] != n0 {
            return Err(invalid_input(
                "network input width does not match the problem",
            ));
        }
        for k in 2..=self.depth() {
            if self.fan_ins[k - 1] != self.widths[k - 2] + problem.prior_width(k) {
                return Err(invalid_input(format!(
                    "layer {k} prior width does not match the problem"
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, problem: &NetProblem<'_>, i: usize, masks: Option<&[DropoutMask]>) -> Trace {
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.depth());
        for k in 1..=self.depth() {
            let mut a = Vec::with_capacity(self.fan_ins[k - 1]);
            if k == 1 {
                a.extend_from_slice(problem.features.row(i));
                if self.input_bias {
                    a.push(1.0);
                }
            } else {
                a.extend(pre[k - 2].iter().map(|&h| self.activation.eval(h)));
                if let Some(p) = problem.prior(k) {
                    a.extend_from_slice(p.row(i));
                }
            }
            let own = if k == 1 { a.len() } else { self.widths[k - 2] };
            let w = &self.weights[k - 1];
            let fan = self.fan_ins[k - 1];
            let mask = masks
                .and_then(|m| m.get(k - 1))
                .filter(|m| !m.prior.is_empty());
            let h: Vec<f64> = (0..self.widths[k - 1])
                .map(|r| {
                    let row = &w[r * fan..(r + 1) * fan];
                    let mut s = 0.0;
                    for (c, (wv, av)) in row.iter().zip(&a).enumerate() {
                        let scale = match mask {
                            Some(mk) if c >= own => mk.get(r, c - own),
                            _ => 1.0,
                        };
                        s += wv * scale * av;
                    }
                    s
                })
                .collect();
            inputs.push(a);
            pre.push(h);
        }
        Trace { inputs, pre }
    }

    fn score_of(&self, t: &Trace) -> f64 {
        crate::kernel::dot(&self.output, t.pre.last().unwrap()) + self.output_bias
    }

    /// Top-layer outputs on every row (no dropout), m x top width.
    pub fn top_outputs(&self, problem: &NetProblem<'_>) -> Result<Matrix> {
        self.check_problem(problem)?;
        let top = *self.widths.last().unwrap();
        let mut data = Vec::with_capacity(problem.len() * top);
        for i in 0..problem.len() {
            data.extend(self.forward(problem, i, None).pre.pop().unwrap());
        }
        Matrix::new(problem.len(), top, data)
    }

    /// Network scores `w . h_top(x_i) + b` on every row.
    pub fn scores(&self, problem: &NetProblem<'_>) -> Result<Vec<f64>> {
        self.check_problem(problem)?;
        Ok((0..problem.len())
            .map(|i| self.score_of(&self.forward(problem, i, None)))
            .collect())
    }

    fn regularization(&self, reg: &Regularizer) -> f64 {
        let mut r = reg.output_l1 * self.output.iter().map(|w| w.abs()).sum::<f64>();
        if reg.weight_l1 > 0.0 || reg.weight_l2 > 0.0 {
            for w in self.weights.iter().flatten() {
                r += reg.weight_l1 * w.abs() + reg.weight_l2 * w * w;
            }
        }
        r
    }

    /// Objective on the given rows (mean loss plus regularizer).
    pub fn objective(
        &self,
        problem: &NetProblem<'_>,
        rows: &[usize],
        reg: &Regularizer,
    ) -> Result<f64> {
        self.check_problem(problem)?;
        let total: f64 = rows
            .iter()
            .map(|&i| {
                let t = self.forward(problem, i, None);
                problem
                    .loss
                    .value(problem.offsets[i] - problem.labels[i] * self.score_of(&t))
            })
            .sum();
        Ok(total / rows.len() as f64 + self.regularization(reg))
    }

    /// Objective and its (sub)gradient with respect to [`Self::params`].
    pub fn loss_and_grad(
        &self,
        problem: &NetProblem<'_>,
        rows: &[usize],
        reg: &Regularizer,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_problem(problem)?;
        Ok(self.batch_grad(problem, rows, reg, None))
    }

    fn batch_grad(
        &self,
        problem: &NetProblem<'_>,
        rows: &[usize],
        reg: &Regularizer,
        masks: Option<&[DropoutMask]>,
    ) -> (f64, Vec<f64>) {
        let d = self.depth();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gout = vec![0.0; self.output.len()];
        let mut gbias = 0.0;
        let mut total = 0.0;
        for &i in rows {
            let t = self.forward(problem, i, masks);
            let y = problem.labels[i];
            let z = problem.offsets[i] - y * self.score_of(&t);
            let (v, dv) = problem.loss.surrogate(z);
            total += v;
            let df = -y * dv;
            gbias += df;
            for (g, h) in gout.iter_mut().zip(&t.pre[d - 1]) {
                *g += df * h;
            }
            let mut g: Vec<f64> = self.output.iter().map(|w| df * w).collect();
            for k in (1..=d).rev() {
                let fan = self.fan_ins[k - 1];
                let own = if k == 1 { fan } else { self.widths[k - 2] };
                let mask = masks
                    .and_then(|m| m.get(k - 1))
                    .filter(|m| !m.prior.is_empty());
                let a = &t.inputs[k - 1];
                let w = &self.weights[k - 1];
                let mut back = vec![0.0; if k > 1 { own } else { 0 }];
                for (r, &gr) in g.iter().enumerate() {
                    if gr == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[k - 1][r * fan..(r + 1) * fan];
                    for c in 0..fan {
                        let scale = match mask {
                            Some(mk) if c >= own => mk.get(r, c - own),
                            _ => 1.0,
                        };
                        grow[c] += gr * scale * a[c];
                    }
                    for (c, b) in back.iter_mut().enumerate() {
                        *b += gr * w[r * fan + c];
                    }
                }
                if k > 1 {
                    g = back
                        .iter()
                        .zip(&t.pre[k - 2])
                        .map(|(b, h)| b * self.activation.derivative(*h))
                        .collect();
                }
            }
        }
        let n = rows.len() as f64;
        let mut grad: Vec<f64> = Vec::with_capacity(self.num_params());
        for (layer, glayer) in self.weights.iter().zip(&gw) {
            for (w, g) in layer.iter().zip(glayer) {
                grad.push(g / n + reg.weight_l1 * sign0(*w) + 2.0 * reg.weight_l2 * w);
            }
        }
        if self.train_output {
            for (w, g) in self.output.iter().zip(&gout) {
                grad.push(g / n + reg.output_l1 * sign0(*w));
            }
        }
        if self.train_bias {
            grad.push(gbias / n);
        }
        (total / n + self.regularization(reg), grad)
    }

    /// Mini-batch SGD with batches drawn with replacement. Connections to
    /// prior units get a fresh dropout mask each step when `dropout_rate > 0`.
    /// Returns the initial parameters if training ends with a larger
    /// full-sample objective.
    pub fn train(
        &mut self,
        problem: &NetProblem<'_>,
        cfg: &SgdConfig,
        reg: &Regularizer,
        projection: Option<(f64, f64)>,
        round: u32,
    ) -> Result<TrainSummary> {
        cfg.validate()?;
        self.check_problem(problem)?;
        let all: Vec<usize> = (0..problem.len()).collect();
        let initial_params = self.params();
        let initial = self.objective(problem, &all, reg)?;
        let mut rng = SeededRng::derive(cfg.seed, &[u64::from(round), self.depth() as u64, 1]);
        let mut batch = vec![0; cfg.batch_size];
        for step in 0..cfg.iterations {
            batch.iter_mut().for_each(|b| *b = rng.index(problem.len()));
            let masks = if cfg.dropout_rate > 0.0 {
                Some(
                    (1..=self.depth())
                        .map(|k| {
                            let prior = problem.prior(k).map_or(&[][..], |p| &p.ids);
                            dropout_mask(
                                cfg.dropout_rate,
                                cfg.seed,
                                round,
                                step as u64,
                                k,
                                self.widths[k - 1],
                                prior,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let (value, grad) = self.batch_grad(problem, &batch, reg, masks.as_deref());
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { iteration: step });
            }
            let mut p = self.params();
            p.iter_mut()
                .zip(&grad)
                .for_each(|(w, g)| *w -= cfg.learning_rate * g);
            self.set_params(&p)?;
            if let Some((pexp, lambda)) = projection {
                self.project(pexp, lambda);
            }
        }
        let mut final_value = self.objective(problem, &all, reg)?;
        if !final_value.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: cfg.iterations,
            });
        }
        let reverted = final_value > initial;
        if reverted {
            self.set_params(&initial_params)?;
            final_value = initial;
        }
        Ok(TrainSummary {
            initial_objective: initial,
            final_objective: final_value,
            reverted,
        })
    }

    fn project(&mut self, p: f64, lambda: f64) {
        for (k, layer) in self.weights.iter_mut().enumerate() {
            for row in layer.chunks_mut(self.fan_ins[k]) {
                project_to_ball(row, p, lambda);
            }
        }
    }

    /// The trained layers as a subnetwork of round `round`.
    pub fn to_subnetwork(
        &self,
        problem: &NetProblem<'_>,
        round: u32,
        gamma: f64,
    ) -> Result<Subnetwork> {
        self.check_problem(problem)?;
        let mut layers = Vec::with_capacity(self.depth());
        for k in 1..=self.depth() {
            let mut sources: Vec<Source> = if k == 1 {
                let mut s: Vec<Source> =
                    (0..problem.features.cols()).map(Source::Feature).collect();
                if self.input_bias {
                    s.push(Source::Bias);
                }
                s
            } else {
                (0..self.widths[k - 2])
                    .map(|j| Source::Unit(UnitId::new(round, k as u32 - 1, j as u32)))
                    .collect()
            };
            if let Some(p) = problem.prior(k) {
                sources.extend(p.ids.iter().map(|id| Source::Unit(*id)));
            }
            let fan = self.fan_ins[k - 1];
            layers.push(
                self.weights[k - 1]
                    .chunks(fan)
                    .map(|row| Unit {
                        sources: sources.clone(),
                        u: row.to_vec(),
                        activation: self.activation,
                    })
                    .collect(),
            );
        }
        Ok(Subnetwork {
            round,
            depth: self.depth(),
            gamma,
            layers,
        })
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub reverted: bool,
}

/// A trained candidate; the output weights used during training are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub subnetwork: Subnetwork,
    /// Top-unit outputs on the training rows, m x units.
    pub outputs: Matrix,
    pub summary: TrainSummary,
}

/// Trains a candidate subnetwork for the next round of `model` on the
/// prepared sample.
pub fn gen_candidate_sgd(
    model: &AdaNetModel,
    problem: &NetProblem<'_>,
    spec: &CandidateSpec,
) -> Result<Candidate> {
    spec.validate()?;
    if problem.priors.len() < spec.depth {
        return Err(invalid_input(format!(
            "problem prepared for depth {}, candidate has depth {}",
            problem.priors.len(),
            spec.depth
        )));
    }
    if spec.round < model.next_round() {
        return Err(invalid_input(
            "candidate round precedes the model's next round",
        ));
    }
    let widths = vec![spec.units; spec.depth];
    let mut init_rng = SeededRng::derive(
        spec.sgd.seed,
        &[u64::from(spec.round), spec.depth as u64, 0],
    );
    let mut net = CandidateNet::init(
        problem,
        &widths,
        spec.activation,
        spec.input_bias,
        &mut init_rng,
    )?;
    let reg = Regularizer {
        output_l1: match spec.penalty {
            PenaltyMode::None => 0.0,
            PenaltyMode::AdanetR => spec.gamma,
        },
        ..Regularizer::default()
    };
    let summary = net.train(problem, &spec.sgd, &reg, spec.projection, spec.round)?;
    Ok(Candidate {
        subnetwork: net.to_subnetwork(problem, spec.round, spec.gamma)?,
        outputs: net.top_outputs(problem)?,
        summary,
    })
}

/// Weighted correlations `E_{i~D}[y_i g_j(x_i)]` of candidate inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeVector {
    pub layer: usize,
    pub sources: Vec<Source>,
    pub values: Vec<f64>,
}

/// Edges of the inputs available to a new layer-`s` unit under the
/// boosting distribution of `model`: the features (and constant) for
/// s = 1, otherwise the activated layer s-1 units permitted by `policy`.
pub fn cvx_edges(
    model: &AdaNetModel,
    cache: &mut EvalCache,
    labels: &[f64],
    s: usize,
    policy: ConnectionPolicy,
    activation: Activation,
    input_bias: bool,
) -> Result<EdgeVector> {
    if s == 0 {
        return Err(invalid_input("layer index must be >= 1"));
    }
    cache.sync(model)?;
    if labels.len() != cache.rows() {
        return Err(invalid_input("one label per cached row"));
    }
    let scores = cache.scores(model);
    let dist = boosting_distribution(model.loss(), &scores, labels)?;
    let weighted: Vec<f64> = dist
        .weights
        .iter()
        .zip(labels)
        .map(|(d, y)| d * y)
        .collect();
    let mut sources = Vec::new();
    let mut values = Vec::new();
    if s == 1 {
        for j in 0..model.input_dim() {
            sources.push(Source::Feature(j));
            values.push(crate::kernel::dot(&weighted, cache.feature(j)));
        }
        if input_bias {
            sources.push(Source::Bias);
            values.push(weighted.iter().sum());
        }
    } else {
        let ids = match policy {
            ConnectionPolicy::Full | ConnectionPolicy::Dropout => model.layer_units(s - 1),
            ConnectionPolicy::Previous => model.previous_round_layer_units(s - 1),
        };
        for id in ids {
            let idx = model.unit_index(id).expect("layer unit is indexed");
            sources.push(Source::Unit(id));
            values.push(crate::kernel::dot(
                &weighted,
                cache.activated(idx, activation),
            ));
        }
    }
    Ok(EdgeVector {
        layer: s,
        sources,
        values,
    })
}

/// The `u` with `||u||_p <= Lambda` maximizing `u . eps`.
pub fn dual_unit(eps: &[f64], p: f64, lambda: f64) -> Result<Vec<f64>> {
    let q = dual_exponent(p)?;
    let norm = pnorm_unchecked(eps, q);
    if norm == 0.0 {
        return Ok(vec![0.0; eps.len()]);
    }
    Ok(if p == 1.0 {
        let mut best = 0;
        for (i, e) in eps.iter().enumerate() {
            if e.abs() > eps[best].abs() {
                best = i;
            }
        }
        let mut u = vec![0.0; eps.len()];
        u[best] = lambda * eps[best].signum();
        u
    } else if p.is_infinite() {
        eps.iter()
            .map(|e| if *e == 0.0 { 0.0 } else { lambda * e.signum() })
            .collect()
    } else {
        // Normalize by the norm first so the powers stay in range.
        eps.iter()
            .map(|e| e.signum() * lambda * (e.abs() / norm).powf(q - 1.0))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvxSelection {
    pub layer: usize,
    pub sources: Vec<Source>,
    pub u: Vec<f64>,
    pub dual_value: f64,
    /// `Lambda_s ||eps_s||_q` for s = 1, 2, ...
    pub dual_values: Vec<f64>,
}

impl CvxSelection {
    /// The single-unit subnetwork `u . (phi o h_{s-1})` of round `round`.
    pub fn to_subnetwork(&self, round: u32, gamma: f64, activation: Activation) -> Subnetwork {
        let mut layers = vec![Vec::new(); self.layer];
        layers[self.layer - 1].push(Unit {
            sources: self.sources.clone(),
            u: self.u.clone(),
            activation,
        });
        Subnetwork {
            round,
            depth: self.layer,
            gamma,
            layers,
        }
    }
}

/// Picks the layer whose dual-norm unit has the largest edge, over
/// s = 1..=l+1 (smallest s on ties). `norm_bounds[s - 1] = Lambda_s`, with
/// missing entries repeating the last. `None` when every edge is zero.
#[allow(clippy::too_many_arguments)]
pub fn cvx_select(
    model: &AdaNetModel,
    cache: &mut EvalCache,
    labels: &[f64],
    norm_bounds: &[f64],
    p: f64,
    policy: ConnectionPolicy,
    activation: Activation,
    input_bias: bool,
) -> Result<Option<CvxSelection>> {
    let q = dual_exponent(p)?;
    let last = *norm_bounds
        .last()
        .ok_or_else(|| invalid_param("at least one norm bound is required"))?;
    let mut best: Option<(EdgeVector, f64)> = None;
    let mut dual_values = Vec::new();
    for s in 1..=model.depth() + 1 {
        let lambda = norm_bounds.get(s - 1).copied().unwrap_or(last);
        let edges = cvx_edges(model, cache, labels, s, policy, activation, input_bias)?;
        let value = lambda * pnorm_unchecked(&edges.values, q);
        dual_values.push(value);
        if best.as_ref().is_none_or(|(_, v)| value > *v) {
            best = Some((edges, value));
        }
    }
    let (edges, value) = best.expect("at least one layer");
    if !(value > 0.0) {
        return Ok(None);
    }
    let lambda = norm_bounds.get(edges.layer - 1).copied().unwrap_or(last);
    Ok(Some(CvxSelection {
        layer: edges.layer,
        u: dual_unit(&edges.values, p, lambda)?,
        sources: edges.sources,
        dual_value: value,
        dual_values,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::kernel::pnorm;
    use proptest::prelude::*;

    fn label_feature_data(m: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..m {
            let y = rng.sign();
            rows.push(vec![y, rng.normal(), rng.normal()]);
            labels.push(y);
        }
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn spec(depth: usize, units: usize, iterations: usize) -> CandidateSpec {
        CandidateSpec {
            round: 1,
            depth,
            units,
            policy: ConnectionPolicy::Full,
            activation: Activation::Relu,
            input_bias: true,
            projection: None,
            penalty: PenaltyMode::None,
            gamma: 0.0,
            sgd: SgdConfig {
                learning_rate: 0.05,
                batch_size: 20,
                iterations,
                dropout_rate: 0.0,
                seed: 11,
            },
        }
    }

    fn problem_for<'a>(
        model: &AdaNetModel,
        d: &'a Dataset,
        depth: usize,
        policy: ConnectionPolicy,
    ) -> NetProblem<'a> {
        let mut cache = EvalCache::new(d.features());
        NetProblem::for_candidate(
            model,
            &mut cache,
            d.features(),
            d.labels(),
            depth,
            policy,
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn learns_the_label_feature() {
        let d = label_feature_data(200, 1);
        let model = AdaNetModel::empty(3, SurrogateLoss::Logistic);
        let problem = problem_for(&model, &d, 1, ConnectionPolicy::Full);
        let mut s = spec(1, 1, 3000);
        s.sgd.learning_rate = 0.1;
        let c = gen_candidate_sgd(&model, &problem, &s).unwrap();
        let u = &c.subnetwork.layers[0][0].u;
        assert!(u[0].abs() > 3.0 * u[1].abs().max(u[2].abs()), "{u:?}");
        // Orientation of a unit is arbitrary; the edge magnitude is what counts.
        let h = c.outputs.column(0);
        let scale = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let edge: f64 = h.iter().zip(d.labels()).map(|(h, y)| h * y).sum::<f64>() / (200.0 * scale);
        assert!(edge.abs() >= 0.9, "{edge}");
    }

    #[test]
    fn zero_iterations_is_initialization() {
        let d = label_feature_data(30, 2);
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        let a = gen_candidate_sgd(&model, &problem, &spec(2, 3, 0)).unwrap();
        let mut rng = SeededRng::derive(11, &[1, 2, 0]);
        let net = CandidateNet::init(&problem, &[3, 3], Activation::Relu, true, &mut rng).unwrap();
        assert_eq!(a.subnetwork, net.to_subnetwork(&problem, 1, 0.0).unwrap());
        assert_eq!(a.summary.initial_objective, a.summary.final_objective);
    }

    #[test]
    fn same_seed_same_candidate() {
        let d = label_feature_data(50, 3);
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        let a = gen_candidate_sgd(&model, &problem, &spec(2, 4, 200)).unwrap();
        let b = gen_candidate_sgd(&model, &problem, &spec(2, 4, 200)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(2, 4, 200);
        other.sgd.seed = 12;
        assert_ne!(
            a.subnetwork,
            gen_candidate_sgd(&model, &problem, &other)
                .unwrap()
                .subnetwork
        );
    }

    #[test]
    fn training_never_increases_the_objective() {
        let d = label_feature_data(40, 4);
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        for (lr, seed) in [(0.001, 1), (0.05, 2), (0.5, 3)] {
            let mut s = spec(2, 3, 300);
            s.sgd.learning_rate = lr;
            s.sgd.seed = seed;
            match gen_candidate_sgd(&model, &problem, &s) {
                Ok(c) => assert!(c.summary.final_objective <= c.summary.initial_objective),
                Err(e) => assert!(matches!(e, Error::TrainingDiverged { .. })),
            }
        }
    }

    #[test]
    fn divergence_reports_iteration() {
        let d = label_feature_data(40, 5);
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        let mut s = spec(2, 8, 500);
        s.sgd.learning_rate = 1e6;
        assert!(matches!(
            gen_candidate_sgd(&model, &problem, &s),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    fn grown_model(d: &Dataset) -> AdaNetModel {
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let problem = problem_for(&model, d, 2, ConnectionPolicy::Full);
        let c = gen_candidate_sgd(&model, &problem, &spec(2, 2, 50)).unwrap();
        model
            .attach_subnetwork(c.subnetwork, &[0.3, -0.2], ConnectionPolicy::Full)
            .unwrap()
    }

    #[test]
    fn candidates_read_prior_units_per_policy() {
        let d = label_feature_data(30, 6);
        let model = grown_model(&d);
        let full = problem_for(&model, &d, 3, ConnectionPolicy::Full);
        assert_eq!(full.prior_width(2), 2);
        assert_eq!(full.prior_width(3), 2);
        let mut s = spec(3, 2, 20);
        s.round = 2;
        let c = gen_candidate_sgd(&model, &full, &s).unwrap();
        let w = c.outputs.column(0).len();
        assert_eq!(w, 30);
        let attached = model
            .attach_subnetwork(c.subnetwork.clone(), &[0.0, 0.0], ConnectionPolicy::Full)
            .unwrap();
        assert_eq!(attached.scores(&d).unwrap(), model.scores(&d).unwrap());

        let prev = problem_for(&model, &d, 3, ConnectionPolicy::Previous);
        let c = gen_candidate_sgd(&model, &prev, &s).unwrap();
        model
            .attach_subnetwork(c.subnetwork, &[0.1, 0.1], ConnectionPolicy::Previous)
            .unwrap();
    }

    #[test]
    fn top_outputs_match_model_evaluation() {
        let d = label_feature_data(25, 7);
        let model = grown_model(&d);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        let mut s = spec(2, 2, 30);
        s.round = 2;
        let c = gen_candidate_sgd(&model, &problem, &s).unwrap();
        let next = model
            .attach_subnetwork(c.subnetwork, &[1.0, 0.0], ConnectionPolicy::Full)
            .unwrap();
        let base = model.scores(&d).unwrap();
        let grown = next.scores(&d).unwrap();
        for i in 0..25 {
            assert!((grown[i] - base[i] - c.outputs.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_masks() {
        let ids = vec![UnitId::new(1, 1, 0), UnitId::new(1, 1, 1)];
        let m = dropout_mask(0.0, 1, 2, 0, 2, 3, &ids).unwrap();
        assert!(m.scale.iter().all(|s| *s == 1.0));
        assert_eq!(m.scale.len(), 6);
        let a = dropout_mask(0.5, 1, 2, 7, 2, 50, &ids).unwrap();
        let b = dropout_mask(0.5, 1, 2, 7, 2, 50, &ids).unwrap();
        assert_eq!(a, b);
        assert!(a.scale.iter().all(|s| *s == 0.0 || *s == 2.0));
        assert!(a.scale.contains(&0.0) && a.scale.contains(&2.0));
        assert!(dropout_mask(1.0, 1, 2, 0, 2, 3, &ids).is_err());
        // Nothing to mask on a candidate's own connections.
        assert!(dropout_mask(0.5, 1, 2, 0, 1, 3, &[])
            .unwrap()
            .scale
            .is_empty());
    }

    #[test]
    fn dropout_training_is_deterministic() {
        let d = label_feature_data(30, 8);
        let model = grown_model(&d);
        let problem = problem_for(&model, &d, 3, ConnectionPolicy::Dropout);
        let mut s = spec(3, 2, 100);
        s.round = 2;
        s.policy = ConnectionPolicy::Dropout;
        s.sgd.dropout_rate = 0.3;
        let a = gen_candidate_sgd(&model, &problem, &s).unwrap();
        let b = gen_candidate_sgd(&model, &problem, &s).unwrap();
        assert_eq!(a, b);
        s.sgd.dropout_rate = 0.0;
        let c = gen_candidate_sgd(&model, &problem, &s).unwrap();
        assert_ne!(a.subnetwork, c.subnetwork);
    }

    #[test]
    fn projection_keeps_units_in_the_ball() {
        let d = label_feature_data(30, 9);
        let model = AdaNetModel::empty(3, SurrogateLoss::Logistic);
        let problem = problem_for(&model, &d, 2, ConnectionPolicy::Full);
        let mut s = spec(2, 3, 100);
        s.projection = Some((2.0, 0.5));
        let c = gen_candidate_sgd(&model, &problem, &s).unwrap();
        for unit in c.subnetwork.layers.iter().flatten() {
            assert!(pnorm(&unit.u, 2.0).unwrap() <= 0.5 + 1e-12);
        }
    }

    fn finite_difference_check(activation: Activation, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let d = label_feature_data(12, seed);
        let base = AdaNetModel::empty(3, SurrogateLoss::Logistic);
        let model = grown_model(&d);
        let (model, depth) = if seed.is_multiple_of(2) {
            (base, 2)
        } else {
            (model, 3)
        };
        let mut cache = EvalCache::new(d.features());
        let problem = NetProblem::for_candidate(
            &model,
            &mut cache,
            d.features(),
            d.labels(),
            depth,
            ConnectionPolicy::Full,
            activation,
        )
        .unwrap();
        let widths = vec![3; depth];
        let net = CandidateNet::init(&problem, &widths, activation, true, &mut rng).unwrap();
        let reg = Regularizer {
            weight_l2: 0.01,
            ..Regularizer::default()
        };
        let rows: Vec<usize> = (0..12).collect();
        let (_, g) = net.loss_and_grad(&problem, &rows, &reg).unwrap();
        let p = net.params();
        for j in 0..p.len() {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut q = p.clone();
                q[j] += delta;
                let mut n = net.clone();
                n.set_params(&q).unwrap();
                n.objective(&problem, &rows, &reg).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1e-3),
                "param {j}: {fd} vs {}",
                g[j]
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..6 {
            finite_difference_check(Activation::Sigmoid, seed);
        }
    }

    #[test]
    fn edges_examples() {
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![1.0]]).unwrap();
        let y = vec![1.0, -1.0, 1.0, -1.0];
        let d = Dataset::new(x, y).unwrap();
        let model = AdaNetModel::empty(1, SurrogateLoss::Exponential);
        let mut cache = EvalCache::new(d.features());
        let e = cvx_edges(
            &model,
            &mut cache,
            d.labels(),
            1,
            ConnectionPolicy::Full,
            Activation::Relu,
            false,
        )
        .unwrap();
        assert!((e.values[0] - 0.5).abs() < 1e-15);

        let d = Dataset::new(
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap();
        let mut cache = EvalCache::new(d.features());
        let e = cvx_edges(
            &model,
            &mut cache,
            d.labels(),
            1,
            ConnectionPolicy::Full,
            Activation::Relu,
            true,
        )
        .unwrap();
        assert_eq!(e.values, vec![1.0, 0.0]);
        assert_eq!(e.sources, vec![Source::Feature(0), Source::Bias]);
    }

    #[test]
    fn dual_unit_examples() {
        let u = dual_unit(&[0.3, -0.4], 2.0, 1.0).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] + 0.8).abs() < 1e-15);
        let u = dual_unit(&[0.2, -0.7], 1.0, 2.0).unwrap();
        assert_eq!(u, vec![0.0, -2.0]);
        let u = dual_unit(&[0.5, -0.5, 0.1], 1.0, 1.0).unwrap();
        assert_eq!(u, vec![1.0, 0.0, 0.0]);
        let u = dual_unit(&[0.2, -0.1, 0.0], f64::INFINITY, 1.5).unwrap();
        assert_eq!(u, vec![1.5, -1.5, 0.0]);
    }

    #[test]
    fn select_prefers_largest_dual_value_then_shallower() {
        let d = label_feature_data(40, 10);
        let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
        let mut cache = EvalCache::new(d.features());
        let sel = cvx_select(
            &model,
            &mut cache,
            d.labels(),
            &[1.0],
            2.0,
            ConnectionPolicy::Full,
            Activation::Relu,
            false,
        )
        .unwrap()
        .unwrap();
        assert_eq!(sel.layer, 1);
        assert_eq!(sel.dual_values.len(), 1);
        assert!((sel.dual_value - 1.0 * pnorm(&[1.0, 0.0], 2.0).unwrap()).abs() < 0.3);

        let sub = sel.to_subnetwork(1, 0.0, Activation::Relu);
        let grown = model
            .attach_subnetwork(sub, &[0.5], ConnectionPolicy::Full)
            .unwrap();
        let sel = cvx_select(
            &grown,
            &mut cache,
            d.labels(),
            &[1.0],
            2.0,
            ConnectionPolicy::Full,
            Activation::Relu,
            false,
        )
        .unwrap()
        .unwrap();
        assert_eq!(sel.dual_values.len(), 2);
        let best = sel.dual_values.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(sel.dual_value, best);
        assert_eq!(
            sel.layer,
            sel.dual_values.iter().position(|v| *v == best).unwrap() + 1
        );
    }

    #[test]
    fn zero_edges_signal_no_descent() {
        let d = Dataset::new(
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap();
        let model = AdaNetModel::empty(1, SurrogateLoss::Exponential);
        let mut cache = EvalCache::new(d.features());
        assert!(cvx_select(
            &model,
            &mut cache,
            d.labels(),
            &[1.0],
            2.0,
            ConnectionPolicy::Full,
            Activation::Relu,
            false
        )
        .unwrap()
        .is_none());
    }

    fn exponent() -> impl Strategy<Value = f64> {
        prop_oneof![
            Just(1.0),
            Just(1.5),
            Just(2.0),
            Just(3.0),
            Just(f64::INFINITY)
        ]
    }

    proptest! {
        #[test]
        fn dual_attainment(eps in prop::collection::vec(-2.0f64..2.0, 1..9), p in exponent(), lambda in 0.1f64..3.0) {
            let u = dual_unit(&eps, p, lambda).unwrap();
            let q = dual_exponent(p).unwrap();
            prop_assert!(pnorm(&u, p).unwrap() <= lambda * (1.0 + 1e-12));
            let target = lambda * pnorm(&eps, q).unwrap();
            prop_assert!((crate::kernel::dot(&u, &eps) - target).abs() <= 1e-9);
        }

        #[test]
        fn edges_bounded_by_max_output(seed in any::<u64>()) {
            let d = label_feature_data(20, seed);
            let model = AdaNetModel::empty(3, SurrogateLoss::Exponential);
            let mut cache = EvalCache::new(d.features());
            let e = cvx_edges(&model, &mut cache, d.labels(), 1, ConnectionPolicy::Full, Activation::Relu, false).unwrap();
            for (j, v) in e.values.iter().enumerate() {
                let col = d.features().column(j);
                let max = col.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                prop_assert!(v.abs() <= max + 1e-12);
                let plain: f64 = col.iter().zip(d.labels()).map(|(x, y)| x * y).sum::<f64>() / 20.0;
                prop_assert!((v - plain).abs() < 1e-12);
            }
        }
    }
}
