//! The boosting loops that grow a model one subnetwork per round.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::complexity::{rademacher_explicit, sd_surrogate_cached, ComplexityProvenance};
use crate::data::{r_infinity, Dataset};
use crate::error::{invalid_param, Error, Result};
use crate::kernel::{mix_seed, Activation, Matrix};
use crate::loss::SurrogateLoss;
use crate::network::{AdaNetModel, ConnectionPolicy, EvalCache};
use crate::solver::{bisect_1d, objective_from_scores, prox_solve, ObjectiveSpec, SolveOptions};
use crate::weaklearner::{
    cvx_select, gen_candidate_sgd, CandidateSpec, NetProblem, PenaltyMode, SgdConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakLearnerKind {
    Sgd,
    Cvx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum number of rounds T.
    pub rounds: usize,
    /// Units per layer B of each SGD candidate.
    pub units: usize,
    pub lambda: f64,
    pub beta: f64,
    /// `Lambda_k` per layer; missing layers repeat the last entry.
    pub norm_bounds: Vec<f64>,
    pub p: f64,
    pub loss: SurrogateLoss,
    pub complexity: ComplexityProvenance,
    /// `r_k` when `complexity` is user-supplied.
    pub complexity_values: Vec<f64>,
    pub policy: ConnectionPolicy,
    pub weak_learner: WeakLearnerKind,
    pub penalty: PenaltyMode,
    pub activation: Activation,
    pub input_bias: bool,
    /// Project unit weights onto the `(p, Lambda_k)` ball during SGD.
    pub project_weights: bool,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub solver: SolveOptions,
    pub accept_tol: f64,
    /// Fresh-seed attempts after a rejected round before stopping.
    pub retries: usize,
    pub record_timings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            units: 10,
            lambda: 1e-4,
            beta: 0.0,
            norm_bounds: vec![1.0],
            p: 2.0,
            loss: SurrogateLoss::Exponential,
            complexity: ComplexityProvenance::ExplicitBound,
            complexity_values: Vec::new(),
            policy: ConnectionPolicy::Full,
            weak_learner: WeakLearnerKind::Sgd,
            penalty: PenaltyMode::None,
            activation: Activation::Relu,
            input_bias: true,
            project_weights: false,
            sgd: SgdConfig::default(),
            seed: 0,
            solver: SolveOptions::default(),
            accept_tol: 1e-10,
            retries: 0,
            record_timings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid_param("rounds must be >= 1"));
        }
        if self.units == 0 {
            return Err(invalid_param("units must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0)
            || !self.lambda.is_finite()
            || !self.beta.is_finite()
        {
            return Err(invalid_param("lambda and beta must be finite and >= 0"));
        }
        if self.norm_bounds.is_empty()
            || self
                .norm_bounds
                .iter()
                .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(invalid_param("norm bounds must be finite and > 0"));
        }
        if self.p.is_nan() || self.p < 1.0 {
            return Err(invalid_param("p must be >= 1"));
        }
        if self.complexity == ComplexityProvenance::UserSupplied {
            crate::complexity::ComplexitySchedule::user(self.complexity_values.clone())?;
            if self.complexity_values.is_empty() {
                return Err(invalid_param("user-supplied complexity needs values"));
            }
        }
        if !(self.accept_tol >= 0.0) {
            return Err(invalid_param("accept_tol must be >= 0"));
        }
        if !(self.solver.tol > 0.0) {
            return Err(invalid_param("solver tol must be > 0"));
        }
        self.sgd.validate()
    }

    pub fn norm_bound(&self, k: usize) -> f64 {
        self.norm_bounds
            .get(k - 1)
            .or(self.norm_bounds.last())
            .copied()
            .unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub depth: usize,
    pub gamma: f64,
    /// Solved round objective; null when the candidate failed.
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u32,
    pub candidates: Vec<CandidateRecord>,
    pub winner_depth: Option<usize>,
    pub accepted: bool,
    /// Full objective after the round.
    #[serde(rename = "F")]
    pub f: f64,
    pub seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub model: AdaNetModel,
    pub records: Vec<RoundRecord>,
}

/// One JSON object per line.
pub fn round_report(records: &[RoundRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// State shared by both loops.
struct Run<'a> {
    d: &'a Dataset,
    cfg: &'a TrainConfig,
    model: AdaNetModel,
    cache: EvalCache,
    value: f64,
    n0: usize,
    r_inf: f64,
}

impl<'a> Run<'a> {
    fn new(d: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let hyper = serde_json::to_value(cfg).map_err(|e| Error::Numeric(e.to_string()))?;
        let model = AdaNetModel::empty(d.dim(), cfg.loss).with_hyperparams(hyper);
        let mut cache = EvalCache::new(d.features());
        cache.sync(&model)?;
        let value =
            objective_from_scores(&model, &cache.scores(&model), d.labels(), cfg.loss, &[])?;
        let mut r_inf = r_infinity(d);
        if cfg.input_bias {
            r_inf = r_inf.max(1.0);
        }
        Ok(Self {
            d,
            cfg,
            model,
            cache,
            value,
            n0: d.dim() + usize::from(cfg.input_bias),
            r_inf,
        })
    }

    /// `r_k` for a depth-k candidate; `fan_ins[s - 1]` is the fan-in of
    /// its layer s.
    fn complexity(&mut self, k: usize, fan_ins: &[usize]) -> Result<f64> {
        let cfg = self.cfg;
        match cfg.complexity {
            ComplexityProvenance::ExplicitBound => {
                let bounds: Vec<f64> = (1..=k).map(|s| cfg.norm_bound(s)).collect();
                let q = crate::kernel::dual_exponent(cfg.p)?;
                rademacher_explicit(k, &bounds, fan_ins, q, self.d.len(), self.r_inf)
            }
            ComplexityProvenance::SdSurrogate => sd_surrogate_cached(
                &self.model,
                &mut self.cache,
                k,
                cfg.activation,
                cfg.norm_bound(k),
            ),
            ComplexityProvenance::UserSupplied => Ok(cfg
                .complexity_values
                .get(k - 1)
                .or(cfg.complexity_values.last())
                .copied()
                .unwrap_or(0.0)),
        }
    }

    fn gamma(&mut self, k: usize, fan_ins: &[usize]) -> Result<f64> {
        Ok(self.cfg.lambda * self.complexity(k, fan_ins)? + self.cfg.beta)
    }

    /// Full objective of `model`, syncing the cache.
    fn evaluate(&mut self, model: &AdaNetModel) -> Result<f64> {
        self.cache.sync(model)?;
        objective_from_scores(
            model,
            &self.cache.scores(model),
            self.d.labels(),
            self.cfg.loss,
            model.output_gammas(),
        )
    }

    fn offsets(&self) -> Vec<f64> {
        self.cache
            .scores(&self.model)
            .iter()
            .zip(self.d.labels())
            .map(|(f, y)| 1.0 - y * f)
            .collect()
    }

    fn timer(&self) -> Option<Instant> {
        self.cfg.record_timings.then(Instant::now)
    }
}

fn elapsed(start: Option<Instant>) -> Option<f64> {
    start.map(|s| s.elapsed().as_secs_f64())
}

struct Solved {
    depth: usize,
    subnetwork: crate::network::Subnetwork,
    w: Vec<f64>,
    objective: f64,
}

fn solve_candidate(
    model: &AdaNetModel,
    problem: &NetProblem<'_>,
    spec: &CandidateSpec,
    offsets: &[f64],
    labels: &[f64],
    solver: SolveOptions,
) -> Result<Solved> {
    let candidate = gen_candidate_sgd(model, problem, spec)?;
    let objective = ObjectiveSpec::new(
        model.loss(),
        offsets.to_vec(),
        labels,
        &candidate.outputs,
        spec.gamma,
    )?;
    let report = prox_solve(&objective, &vec![0.0; spec.units], solver)?;
    Ok(Solved {
        depth: spec.depth,
        subnetwork: candidate.subnetwork,
        w: report.w,
        objective: report.value,
    })
}

/// Grows a model by trained candidates of depth `l` and `l + 1` per round,
/// keeping the one with the smaller solved round objective while it lowers
/// the full objective.
pub fn train_adanet(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    if cfg.weak_learner == WeakLearnerKind::Cvx {
        return train_adanet_cvx(d, cfg);
    }
    let mut run = Run::new(d, cfg)?;
    let mut records = Vec::new();

    for _ in 0..cfg.rounds {
        let start = run.timer();
        let round = run.model.next_round();
        let l = run.model.depth().max(1);
        let offsets = run.offsets();
        let mut attempt = 0;
        loop {
            let mut specs = Vec::with_capacity(2);
            let mut problems = Vec::with_capacity(2);
            for depth in [l, l + 1] {
                let problem = NetProblem::for_candidate(
                    &run.model,
                    &mut run.cache,
                    d.features(),
                    d.labels(),
                    depth,
                    cfg.policy,
                    cfg.activation,
                )?;
                let mut fan_ins = vec![run.n0];
                fan_ins.extend((2..=depth).map(|k| cfg.units + problem.prior_ids(k).len()));
                let gamma = run.gamma(depth, &fan_ins)?;
                let mut sgd = cfg.sgd.clone();
                sgd.seed = if attempt == 0 {
                    cfg.seed
                } else {
                    mix_seed(cfg.seed, &[attempt as u64])
                };
                specs.push(CandidateSpec {
                    round,
                    depth,
                    units: cfg.units,
                    policy: cfg.policy,
                    activation: cfg.activation,
                    input_bias: cfg.input_bias,
                    projection: cfg.project_weights.then(|| (cfg.p, cfg.norm_bound(depth))),
                    penalty: cfg.penalty,
                    gamma,
                    sgd,
                });
                problems.push(problem);
            }
            let model = &run.model;
            let (a, b) = rayon::join(
                || {
                    solve_candidate(
                        model,
                        &problems[0],
                        &specs[0],
                        &offsets,
                        d.labels(),
                        cfg.solver,
                    )
                },
                || {
                    solve_candidate(
                        model,
                        &problems[1],
                        &specs[1],
                        &offsets,
                        d.labels(),
                        cfg.solver,
                    )
                },
            );
            let results = [a, b];
            let candidates: Vec<CandidateRecord> = results
                .iter()
                .zip(&specs)
                .map(|(r, s)| CandidateRecord {
                    depth: s.depth,
                    gamma: s.gamma,
                    objective: r.as_ref().ok().map(|x| x.objective),
                    error: r.as_ref().err().map(ToString::to_string),
                })
                .collect();
            // Smaller solved objective wins; the shallower one on ties.
            let winner = results.into_iter().flatten().reduce(|best, c| {
                if c.objective < best.objective {
                    c
                } else {
                    best
                }
            });
            let Some(winner) = winner else {
                records.push(RoundRecord {
                    t: round,
                    candidates,
                    winner_depth: None,
                    accepted: false,
                    f: run.value,
                    seconds: elapsed(start),
                    dual_value: None,
                    note: Some("every candidate failed".into()),
                });
                return Ok(TrainOutput {
                    model: run.model,
                    records,
                });
            };
            let next = run
                .model
                .attach_subnetwork(winner.subnetwork, &winner.w, cfg.policy)?;
            let value = run.evaluate(&next)?;
            let accepted = value < run.value - cfg.accept_tol;
            if accepted {
                run.model = next;
                run.value = value;
            }
            records.push(RoundRecord {
                t: round,
                candidates,
                winner_depth: Some(winner.depth),
                accepted,
                f: run.value,
                seconds: elapsed(start),
                dual_value: None,
                note: None,
            });
            if accepted {
                break;
            }
            attempt += 1;
            if attempt > cfg.retries {
                return Ok(TrainOutput {
                    model: run.model,
                    records,
                });
            }
        }
    }
    Ok(TrainOutput {
        model: run.model,
        records,
    })
}

/// Grows a model by one closed-form dual-norm unit per round, stepping
/// along it with an exact line search.
pub fn train_adanet_cvx(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut run = Run::new(d, cfg)?;
    let mut records = Vec::new();
    for _ in 0..cfg.rounds {
        let start = run.timer();
        let round = run.model.next_round();
        let selection = cvx_select(
            &run.model,
            &mut run.cache,
            d.labels(),
            &cfg.norm_bounds,
            cfg.p,
            cfg.policy,
            cfg.activation,
            cfg.input_bias,
        )?;
        let Some(sel) = selection else {
            records.push(RoundRecord {
                t: round,
                candidates: Vec::new(),
                winner_depth: None,
                accepted: false,
                f: run.value,
                seconds: elapsed(start),
                dual_value: Some(0.0),
                note: Some("zero dual value".into()),
            });
            break;
        };
        let s = sel.layer;
        let mut fan_ins = vec![run.n0];
        fan_ins.extend(run.model.layer_counts().iter().take(s.saturating_sub(1)));
        let gamma = run.gamma(s, &fan_ins)?;
        let subnet = sel.to_subnetwork(round, gamma, cfg.activation);

        // Attach with a zero step to read the unit's outputs off the cache.
        let probe = run
            .model
            .attach_subnetwork(subnet.clone(), &[0.0], cfg.policy)?;
        run.cache.sync(&probe)?;
        let column = run.cache.unit(probe.num_units() - 1).to_vec();
        let outputs = Matrix::new(d.len(), 1, column)?;
        let spec = ObjectiveSpec::new(cfg.loss, run.offsets(), d.labels(), &outputs, gamma)?;
        let mut candidate = CandidateRecord {
            depth: s,
            gamma,
            objective: None,
            error: None,
        };
        let step = match bisect_1d(&spec, cfg.solver.tol) {
            Ok(r) => {
                candidate.objective = Some(r.value);
                r.w[0]
            }
            Err(e) => {
                candidate.error = Some(e.to_string());
                records.push(RoundRecord {
                    t: round,
                    candidates: vec![candidate],
                    winner_depth: None,
                    accepted: false,
                    f: run.value,
                    seconds: elapsed(start),
                    dual_value: Some(sel.dual_value),
                    note: Some("line search failed".into()),
                });
                break;
            }
        };
        let (accepted, note) = if step == 0.0 {
            (false, Some("zero step".to_string()))
        } else {
            let next = run.model.attach_subnetwork(subnet, &[step], cfg.policy)?;
            let value = run.evaluate(&next)?;
            let ok = value < run.value - cfg.accept_tol;
            if ok {
                run.model = next;
                run.value = value;
            }
            (ok, None)
        };
        records.push(RoundRecord {
            t: round,
            candidates: vec![candidate],
            winner_depth: Some(s),
            accepted,
            f: run.value,
            seconds: elapsed(start),
            dual_value: Some(sel.dual_value),
            note,
        });
        if !accepted {
            break;
        }
    }
    Ok(TrainOutput {
        model: run.model,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standardize, synth, SynthKind};
    use crate::loss::margin_error;
    use crate::network::Source;
    use crate::solver::objective_full;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rounds: 4,
            units: 3,
            lambda: 1e-3,
            sgd: SgdConfig {
                learning_rate: 0.05,
                batch_size: 32,
                iterations: 300,
                ..SgdConfig::default()
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn linear(m: usize, noise: f64, seed: u64) -> Dataset {
        standardize(&synth(SynthKind::Linear, m, noise, seed).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn objective_strictly_decreases_on_accepted_rounds() {
        let d = linear(120, 0.3, 1);
        let out = train_adanet(&d, &small_cfg()).unwrap();
        let mut prev = objective_full(
            &AdaNetModel::empty(d.dim(), SurrogateLoss::Exponential),
            &d,
            SurrogateLoss::Exponential,
            &[],
        )
        .unwrap();
        for r in &out.records {
            if r.accepted {
                assert!(r.f < prev);
                prev = r.f;
            }
        }
        let f = objective_full(
            &out.model,
            &d,
            SurrogateLoss::Exponential,
            out.model.output_gammas(),
        )
        .unwrap();
        assert!((f - prev).abs() < 1e-12);
    }

    #[test]
    fn depth_grows_by_at_most_one_per_round() {
        let d = standardize(&synth(SynthKind::Circles, 150, 0.05, 2).unwrap())
            .unwrap()
            .0;
        let out = train_adanet(&d, &small_cfg()).unwrap();
        let mut depth = 0;
        for (i, sub) in out.model.subnetworks().iter().enumerate() {
            assert!(sub.depth <= depth.max(1) + 1, "round {i}");
            depth = depth.max(sub.depth);
        }
    }

    #[test]
    fn single_round_budget() {
        let d = linear(60, 0.1, 3);
        let cfg = TrainConfig {
            rounds: 1,
            ..small_cfg()
        };
        let out = train_adanet(&d, &cfg).unwrap();
        assert!(out.model.subnetworks().len() <= 1);
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn huge_beta_rejects_everything() {
        let d = linear(60, 0.1, 4);
        let cfg = TrainConfig {
            beta: 1e6,
            ..small_cfg()
        };
        let out = train_adanet(&d, &cfg).unwrap();
        assert!(out.model.subnetworks().is_empty());
        assert_eq!(out.records.len(), 1);
        assert!(!out.records[0].accepted);
        assert!(out.model.scores(&d).unwrap().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn separable_data_stays_shallow() {
        let d = linear(200, 0.0, 5);
        let cfg = TrainConfig {
            rounds: 6,
            ..small_cfg()
        };
        let out = train_adanet(&d, &cfg).unwrap();
        let scores = out.model.scores(&d).unwrap();
        assert_eq!(out.model.depth(), 1);
        assert_eq!(margin_error(&scores, d.labels(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rerun_is_identical() {
        let d = linear(80, 0.2, 6);
        let a = train_adanet(&d, &small_cfg()).unwrap();
        let b = train_adanet(&d, &small_cfg()).unwrap();
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert_eq!(round_report(&a.records), round_report(&b.records));
    }

    #[test]
    fn all_policies_and_complexities_run() {
        let d = standardize(&synth(SynthKind::Circles, 100, 0.05, 7).unwrap())
            .unwrap()
            .0;
        for policy in [
            ConnectionPolicy::Full,
            ConnectionPolicy::Previous,
            ConnectionPolicy::Dropout,
        ] {
            for complexity in [
                ComplexityProvenance::ExplicitBound,
                ComplexityProvenance::SdSurrogate,
            ] {
                let mut cfg = TrainConfig {
                    policy,
                    complexity,
                    rounds: 3,
                    ..small_cfg()
                };
                cfg.penalty = PenaltyMode::AdanetR;
                if policy == ConnectionPolicy::Dropout {
                    cfg.sgd.dropout_rate = 0.2;
                }
                let out = train_adanet(&d, &cfg).unwrap();
                assert!(!out.records.is_empty());
            }
        }
    }

    #[test]
    fn cvx_first_round_uses_features() {
        let mut rng = crate::kernel::SeededRng::new(8);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..100 {
            let y = rng.sign();
            rows.push(vec![y, rng.normal(), rng.normal()]);
            labels.push(y);
        }
        let d = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let cfg = TrainConfig {
            weak_learner: WeakLearnerKind::Cvx,
            rounds: 1,
            beta: 0.01,
            p: 1.0,
            ..small_cfg()
        };
        let out = train_adanet(&d, &cfg).unwrap();
        assert_eq!(out.model.subnetworks().len(), 1);
        let sub = &out.model.subnetworks()[0];
        assert_eq!(sub.depth, 1);
        assert_eq!(sub.top_units().len(), 1);
        let scores = out.model.scores(&d).unwrap();
        assert_eq!(crate::loss::accuracy(&scores, d.labels()).unwrap(), 1.0);
    }

    #[test]
    fn cvx_objective_decreases_and_stops() {
        let d = standardize(&synth(SynthKind::Circles, 150, 0.05, 9).unwrap())
            .unwrap()
            .0;
        let cfg = TrainConfig {
            weak_learner: WeakLearnerKind::Cvx,
            rounds: 15,
            beta: 1e-3,
            ..small_cfg()
        };
        let out = train_adanet_cvx(&d, &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for r in &out.records {
            if r.accepted {
                assert!(r.f < prev);
                prev = r.f;
            }
        }
        for sub in out.model.subnetworks() {
            assert_eq!(sub.top_units().len(), 1);
        }
    }

    #[test]
    fn cvx_respects_connection_policy() {
        let d = standardize(&synth(SynthKind::Circles, 120, 0.05, 12).unwrap())
            .unwrap()
            .0;
        for policy in [
            ConnectionPolicy::Full,
            ConnectionPolicy::Previous,
            ConnectionPolicy::Dropout,
        ] {
            let cfg = TrainConfig {
                weak_learner: WeakLearnerKind::Cvx,
                rounds: 8,
                policy,
                ..small_cfg()
            };
            let out = train_adanet(&d, &cfg).unwrap();
            let subs = out.model.subnetworks();
            if policy == ConnectionPolicy::Previous {
                for pair in subs.windows(2) {
                    let earlier: Vec<_> = pair[0].unit_ids().collect();
                    for source in &pair[1].top_units()[0].sources {
                        if let Source::Unit(id) = source {
                            assert!(earlier.contains(id));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn report_lines() {
        assert_eq!(round_report(&[]), "");
        let d = linear(60, 0.1, 10);
        let out = train_adanet(
            &d,
            &TrainConfig {
                beta: 1e6,
                ..small_cfg()
            },
        )
        .unwrap();
        let text = round_report(&out.records);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["accepted"], false);
        assert!(last["seconds"].is_null());
        for key in ["t", "candidates", "winner_depth", "F"] {
            assert!(last.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn config_validation() {
        let d = linear(20, 0.1, 11);
        for bad in [
            TrainConfig {
                rounds: 0,
                ..small_cfg()
            },
            TrainConfig {
                lambda: -1.0,
                ..small_cfg()
            },
            TrainConfig {
                norm_bounds: vec![],
                ..small_cfg()
            },
            TrainConfig {
                complexity: ComplexityProvenance::UserSupplied,
                ..small_cfg()
            },
        ] {
            assert!(matches!(
                train_adanet(&d, &bad),
                Err(Error::InvalidParameter(_))
            ));
        }
    }
}
