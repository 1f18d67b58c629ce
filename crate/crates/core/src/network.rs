//! The grown network: subnetworks attached round by round, output weights
//! over raw (pre-activation) unit outputs, and the JSON model document.
//!
//! A unit in layer 1 reads input features (and optionally a constant bias
//! input). A unit in layer k > 1 reads units of layer k-1, either from its
//! own subnetwork or from subnetworks attached earlier, and applies its
//! activation to those source outputs before the weighted sum. The output
//! unit reads unit outputs *before* activation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetStats};
use crate::error::{invalid_input, Error, Result};
use crate::kernel::{Activation, Matrix};
use crate::loss::SurrogateLoss;

pub const SCHEMA_VERSION: u32 = 1;

/// `round.layer.index`; rounds and layers start at 1, indices at 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId {
    pub round: u32,
    pub layer: u32,
    pub index: u32,
}

impl UnitId {
    pub fn new(round: u32, layer: u32, index: u32) -> Self {
        Self {
            round,
            layer,
            index,
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.round, self.layer, self.index)
    }
}

impl FromStr for UnitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Deserialize(format!("malformed unit id `{s}`"));
        let mut parts = s.split('.');
        let mut next =
            || -> Result<u32> { parts.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let id = UnitId::new(next()?, next()?, next()?);
        if parts.next().is_some() || id.round == 0 || id.layer == 0 {
            return Err(bad());
        }
        Ok(id)
    }
}

/// An input to a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Feature(usize),
    /// Constant 1 input, available to layer-1 units.
    Bias,
    Unit(UnitId),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Feature(i) => write!(f, "x{i}"),
            Source::Bias => f.write_str("bias"),
            Source::Unit(id) => id.fmt(f),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bias" {
            return Ok(Source::Bias);
        }
        if let Some(rest) = s.strip_prefix('x') {
            return rest
                .parse()
                .map(Source::Feature)
                .map_err(|_| Error::Deserialize(format!("malformed feature id `{s}`")));
        }
        s.parse().map(Source::Unit)
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for UnitId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UnitId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Unit {
    pub sources: Vec<Source>,
    pub u: Vec<f64>,
    /// Applied to the outputs of `sources` before the dot product.
    pub activation: Activation,
}

/// Which existing units a new subnetwork may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionPolicy {
    /// Layer k reads every existing unit of layer k-1.
    Full,
    /// Layer k reads only layer k-1 of the most recently attached subnetwork.
    Previous,
    /// Full connectivity, with dropout on cross-subnetwork connections
    /// during candidate training.
    Dropout,
}

impl FromStr for ConnectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ConnectionPolicy::Full),
            "previous" => Ok(ConnectionPolicy::Previous),
            "dropout" => Ok(ConnectionPolicy::Dropout),
            other => Err(crate::error::invalid_param(format!(
                "unknown policy `{other}`"
            ))),
        }
    }
}

/// Units added in one round. `layers[k - 1]` holds the units of layer k;
/// lower layers may be empty when the subnetwork is a single unit stacked
/// on existing units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subnetwork {
    pub round: u32,
    pub depth: usize,
    /// Penalty coefficient on this subnetwork's output weights.
    #[serde(default)]
    pub gamma: f64,
    pub layers: Vec<Vec<Unit>>,
}

impl Subnetwork {
    pub fn top_units(&self) -> &[Unit] {
        self.layers.last().map_or(&[], Vec::as_slice)
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.layers.iter().enumerate().flat_map(move |(k, layer)| {
            (0..layer.len()).map(move |j| UnitId::new(self.round, k as u32 + 1, j as u32))
        })
    }

    pub fn top_unit_ids(&self) -> Vec<UnitId> {
        (0..self.top_units().len())
            .map(|j| UnitId::new(self.round, self.depth as u32, j as u32))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputWeight {
    pub unit: UnitId,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum SourceRef {
    Feature(usize),
    Bias,
    Unit(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct PlanUnit {
    id: UnitId,
    sources: Vec<SourceRef>,
    u: Vec<f64>,
    activation: Activation,
}

/// Units flattened in evaluation order with resolved source indices.
#[derive(Clone, Debug, Default, PartialEq)]
struct Plan {
    units: Vec<PlanUnit>,
    index: HashMap<UnitId, usize>,
    outputs: Vec<(usize, f64)>,
    gammas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaNetModel {
    input_dim: usize,
    loss: SurrogateLoss,
    hyperparams: serde_json::Value,
    subnetworks: Vec<Subnetwork>,
    output_weights: Vec<OutputWeight>,
    bias: f64,
    input_transform: Option<DatasetStats>,
    plan: Plan,
}

impl AdaNetModel {
    pub fn empty(input_dim: usize, loss: SurrogateLoss) -> Self {
        Self {
            input_dim,
            loss,
            hyperparams: serde_json::Value::Null,
            subnetworks: Vec::new(),
            output_weights: Vec::new(),
            bias: 0.0,
            input_transform: None,
            plan: Plan::default(),
        }
    }

    pub fn with_hyperparams(mut self, hyperparams: serde_json::Value) -> Self {
        self.hyperparams = hyperparams;
        self
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    /// Standardization applied to raw inputs before evaluation.
    pub fn with_input_transform(mut self, stats: Option<DatasetStats>) -> Self {
        self.input_transform = stats;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn loss(&self) -> SurrogateLoss {
        self.loss
    }

    pub fn hyperparams(&self) -> &serde_json::Value {
        &self.hyperparams
    }

    pub fn subnetworks(&self) -> &[Subnetwork] {
        &self.subnetworks
    }

    pub fn output_weights(&self) -> &[OutputWeight] {
        &self.output_weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn input_transform(&self) -> Option<&DatasetStats> {
        self.input_transform.as_ref()
    }

    /// Current depth l_t: the deepest attached subnetwork.
    pub fn depth(&self) -> usize {
        self.subnetworks.iter().map(|s| s.depth).max().unwrap_or(0)
    }

    pub fn num_units(&self) -> usize {
        self.plan.units.len()
    }

    /// Units per layer, `counts[k - 1] = n_k`.
    pub fn layer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.depth()];
        for u in &self.plan.units {
            counts[u.id.layer as usize - 1] += 1;
        }
        counts
    }

    /// Flat evaluation-order index of a unit.
    pub fn unit_index(&self, id: UnitId) -> Option<usize> {
        self.plan.index.get(&id).copied()
    }

    pub fn unit_ids(&self) -> Vec<UnitId> {
        self.plan.units.iter().map(|u| u.id).collect()
    }

    /// All units of layer `k`, in evaluation order.
    pub fn layer_units(&self, k: usize) -> Vec<UnitId> {
        self.plan
            .units
            .iter()
            .filter(|u| u.id.layer as usize == k)
            .map(|u| u.id)
            .collect()
    }

    /// Layer-k units of the most recently attached subnetwork.
    pub fn previous_round_layer_units(&self, k: usize) -> Vec<UnitId> {
        self.subnetworks.last().map_or_else(Vec::new, |s| {
            s.unit_ids().filter(|id| id.layer as usize == k).collect()
        })
    }

    /// Penalty coefficients aligned with [`Self::output_weights`].
    pub fn output_gammas(&self) -> &[f64] {
        &self.plan.gammas
    }

    /// Output weights summed in l1 norm per layer, `norms[k - 1] = ||w_k||_1`.
    pub fn output_weight_norms_by_layer(&self) -> Vec<f64> {
        let mut norms = vec![0.0; self.depth()];
        for ow in &self.output_weights {
            norms[ow.unit.layer as usize - 1] += ow.w.abs();
        }
        norms
    }

    pub fn next_round(&self) -> u32 {
        self.subnetworks.last().map_or(1, |s| s.round + 1)
    }

    /// Appends `subnet` with output weights `w_new` on its top-layer units.
    /// Existing units and weights are left untouched.
    pub fn attach_subnetwork(
        &self,
        subnet: Subnetwork,
        w_new: &[f64],
        policy: ConnectionPolicy,
    ) -> Result<AdaNetModel> {
        if w_new.len() != subnet.top_units().len() {
            return Err(Error::Structural(format!(
                "{} output weights for {} top units",
                w_new.len(),
                subnet.top_units().len()
            )));
        }
        if subnet.round < self.next_round() {
            return Err(Error::Structural(format!(
                "round {} is not after round {}",
                subnet.round,
                self.next_round() - 1
            )));
        }
        if policy == ConnectionPolicy::Previous {
            self.check_previous_policy(&subnet)?;
        }
        let mut next = self.clone();
        let ids = subnet.top_unit_ids();
        next.subnetworks.push(subnet);
        next.output_weights.extend(
            ids.into_iter()
                .zip(w_new)
                .map(|(unit, &w)| OutputWeight { unit, w }),
        );
        next.rebuild_plan()?;
        Ok(next)
    }

    fn check_previous_policy(&self, subnet: &Subnetwork) -> Result<()> {
        let allowed_round = self.subnetworks.last().map(|s| s.round);
        for unit in subnet.layers.iter().flatten() {
            for src in &unit.sources {
                if let Source::Unit(id) = src {
                    if id.round != subnet.round && Some(id.round) != allowed_round {
                        return Err(Error::Structural(format!(
                            "source {id} is not from the previous round's subnetwork"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn rebuild_plan(&mut self) -> Result<()> {
        let mut plan = Plan::default();
        let mut last_round = 0;
        for subnet in &self.subnetworks {
            if subnet.round <= last_round {
                return Err(Error::Structural(format!(
                    "subnetwork rounds must increase, found {} after {last_round}",
                    subnet.round
                )));
            }
            last_round = subnet.round;
            if subnet.depth == 0 || subnet.layers.len() != subnet.depth {
                return Err(Error::Structural(format!(
                    "round {}: depth {} with {} layers",
                    subnet.round,
                    subnet.depth,
                    subnet.layers.len()
                )));
            }
            if subnet.top_units().is_empty() {
                return Err(Error::Structural(format!(
                    "round {}: top layer has no units",
                    subnet.round
                )));
            }
            for (k0, layer) in subnet.layers.iter().enumerate() {
                let k = k0 + 1;
                for (j, unit) in layer.iter().enumerate() {
                    let id = UnitId::new(subnet.round, k as u32, j as u32);
                    if unit.u.len() != unit.sources.len() {
                        return Err(Error::Structural(format!(
                            "unit {id}: {} weights for {} sources",
                            unit.u.len(),
                            unit.sources.len()
                        )));
                    }
                    if unit.u.iter().any(|w| !w.is_finite()) {
                        return Err(Error::Structural(format!("unit {id}: non-finite weight")));
                    }
                    let sources = unit
                        .sources
                        .iter()
                        .map(|src| self.resolve(&plan, id, src))
                        .collect::<Result<Vec<_>>>()?;
                    plan.index.insert(id, plan.units.len());
                    plan.units.push(PlanUnit {
                        id,
                        sources,
                        u: unit.u.clone(),
                        activation: unit.activation,
                    });
                }
            }
        }
        for ow in &self.output_weights {
            let idx = *plan.index.get(&ow.unit).ok_or_else(|| {
                Error::Structural(format!("output weight refers to unknown unit {}", ow.unit))
            })?;
            if !ow.w.is_finite() {
                return Err(Error::Structural(format!(
                    "non-finite output weight on {}",
                    ow.unit
                )));
            }
            plan.outputs.push((idx, ow.w));
            let gamma = self
                .subnetworks
                .iter()
                .find(|s| s.round == ow.unit.round)
                .map_or(0.0, |s| s.gamma);
            plan.gammas.push(gamma);
        }
        self.plan = plan;
        Ok(())
    }

    fn resolve(&self, plan: &Plan, consumer: UnitId, src: &Source) -> Result<SourceRef> {
        let err = |msg: String| Error::Structural(format!("unit {consumer}: {msg}"));
        match *src {
            Source::Feature(i) if consumer.layer == 1 => {
                if i >= self.input_dim {
                    return Err(err(format!(
                        "feature x{i} out of range (n0 = {})",
                        self.input_dim
                    )));
                }
                Ok(SourceRef::Feature(i))
            }
            Source::Bias if consumer.layer == 1 => Ok(SourceRef::Bias),
            Source::Feature(_) | Source::Bias => {
                Err(err(format!("only layer-1 units may read {src}")))
            }
            Source::Unit(id) => {
                if id.layer + 1 != consumer.layer {
                    return Err(err(format!("source {id} is not in the layer below")));
                }
                plan.index
                    .get(&id)
                    .map(|&i| SourceRef::Unit(i))
                    .ok_or_else(|| err(format!("dangling source {id}")))
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(invalid_input(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Pre-activation outputs of every unit for one (already transformed)
    /// input, in evaluation order. Each unit's output is computed once and
    /// reused by every consumer.
    pub fn forward_units(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = Vec::with_capacity(self.plan.units.len());
        for unit in &self.plan.units {
            let mut acc = 0.0;
            for (src, w) in unit.sources.iter().zip(&unit.u) {
                let input = match *src {
                    SourceRef::Feature(i) => x[i],
                    SourceRef::Bias => 1.0,
                    SourceRef::Unit(i) => unit.activation.eval(out[i]),
                };
                acc += w * input;
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// `f(x) = sum_j w_j h_j(x)` over attached units, plus the output bias.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let units = self.forward_units(x)?;
        Ok(self.combine(|i| units[i]))
    }

    fn combine(&self, unit: impl Fn(usize) -> f64) -> f64 {
        let mut s = 0.0;
        for &(idx, w) in &self.plan.outputs {
            s += w * unit(idx);
        }
        s + self.bias
    }

    /// Applies the stored input transform, if any.
    pub fn prepare_inputs(&self, d: &Dataset) -> Result<Dataset> {
        if d.dim() != self.input_dim {
            return Err(invalid_input(format!(
                "dataset has {} features, model expects {}",
                d.dim(),
                self.input_dim
            )));
        }
        match &self.input_transform {
            Some(stats) => stats.apply(d),
            None => Ok(d.clone()),
        }
    }

    /// Scores for every row of an already-prepared dataset.
    pub fn scores(&self, d: &Dataset) -> Result<Vec<f64>> {
        let mut cache = EvalCache::new(d.features());
        cache.sync(self)?;
        Ok(cache.scores(self))
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            schema_version: SCHEMA_VERSION,
            loss: self.loss,
            input_dim: self.input_dim,
            hyperparams: self.hyperparams.clone(),
            subnetworks: self.subnetworks.clone(),
            output_weights: self.output_weights.clone(),
            bias: self.bias,
            input_transform: self.input_transform.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(s).map_err(|e| Error::Deserialize(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Deserialize(format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let mut model = AdaNetModel {
            input_dim: doc.input_dim,
            loss: doc.loss,
            hyperparams: doc.hyperparams,
            subnetworks: doc.subnetworks,
            output_weights: doc.output_weights,
            bias: doc.bias,
            input_transform: doc.input_transform,
            plan: Plan::default(),
        };
        model
            .rebuild_plan()
            .map_err(|e| Error::Deserialize(e.to_string()))?;
        Ok(model)
    }
}

/// Serialized form of [`AdaNetModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub loss: SurrogateLoss,
    pub input_dim: usize,
    #[serde(default)]
    pub hyperparams: serde_json::Value,
    pub subnetworks: Vec<Subnetwork>,
    pub output_weights: Vec<OutputWeight>,
    #[serde(default)]
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_transform: Option<DatasetStats>,
}

/// Column-wise unit outputs over a fixed sample, grown incrementally as
/// subnetworks are attached.
#[derive(Clone, Debug)]
pub struct EvalCache {
    features: Vec<Vec<f64>>,
    units: Vec<Vec<f64>>,
    activated: HashMap<(usize, Activation), Vec<f64>>,
    rows: usize,
}

impl EvalCache {
    pub fn new(features: &Matrix) -> Self {
        Self {
            features: (0..features.cols()).map(|j| features.column(j)).collect(),
            units: Vec::new(),
            activated: HashMap::new(),
            rows: features.rows(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j]
    }

    /// Raw output column of unit `idx` (evaluation order).
    pub fn unit(&self, idx: usize) -> &[f64] {
        &self.units[idx]
    }

    /// `phi(h_idx)` over the sample, computed once per activation kind.
    pub fn activated(&mut self, idx: usize, act: Activation) -> &[f64] {
        let units = &self.units;
        self.activated
            .entry((idx, act))
            .or_insert_with(|| units[idx].iter().map(|&v| act.eval(v)).collect())
    }

    /// Computes columns for units of `model` not yet cached.
    pub fn sync(&mut self, model: &AdaNetModel) -> Result<()> {
        if self.features.len() != model.input_dim {
            return Err(invalid_input(format!(
                "data has {} features, model expects {}",
                self.features.len(),
                model.input_dim
            )));
        }
        for idx in self.units.len()..model.plan.units.len() {
            let unit = &model.plan.units[idx];
            let mut col = vec![0.0; self.rows];
            for (src, &w) in unit.sources.iter().zip(&unit.u) {
                match *src {
                    SourceRef::Feature(j) => {
                        for (c, x) in col.iter_mut().zip(&self.features[j]) {
                            *c += w * x;
                        }
                    }
                    SourceRef::Bias => col.iter_mut().for_each(|c| *c += w * 1.0),
                    SourceRef::Unit(i) => {
                        let input = self.activated(i, unit.activation).to_vec();
                        for (c, x) in col.iter_mut().zip(&input) {
                            *c += w * x;
                        }
                    }
                }
            }
            self.units.push(col);
        }
        Ok(())
    }

    pub fn scores(&self, model: &AdaNetModel) -> Vec<f64> {
        let mut s = vec![0.0; self.rows];
        for &(idx, w) in &model.plan.outputs {
            for (acc, h) in s.iter_mut().zip(&self.units[idx]) {
                *acc += w * h;
            }
        }
        s.iter_mut().for_each(|v| *v += model.bias);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{pnorm, SeededRng};

    fn layer1(round: u32, u: Vec<Vec<f64>>) -> Subnetwork {
        let units = u
            .into_iter()
            .map(|u| Unit {
                sources: (0..u.len()).map(Source::Feature).collect(),
                u,
                activation: Activation::Identity,
            })
            .collect();
        Subnetwork {
            round,
            depth: 1,
            gamma: 0.0,
            layers: vec![units],
        }
    }

    #[test]
    fn unit_and_source_ids_round_trip() {
        let id = UnitId::new(3, 2, 7);
        assert_eq!(id.to_string(), "3.2.7");
        assert_eq!("3.2.7".parse::<UnitId>().unwrap(), id);
        assert!("3.2".parse::<UnitId>().is_err());
        assert!("0.1.0".parse::<UnitId>().is_err());
        for s in ["x0", "bias", "1.1.4"] {
            assert_eq!(s.parse::<Source>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn empty_model_scores_zero() {
        let m = AdaNetModel::empty(2, SurrogateLoss::Exponential);
        assert!(m.forward_units(&[1.0, 2.0]).unwrap().is_empty());
        assert_eq!(m.score(&[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(m.depth(), 0);
    }

    #[test]
    fn projection_unit() {
        let m = AdaNetModel::empty(2, SurrogateLoss::Exponential)
            .attach_subnetwork(
                layer1(1, vec![vec![1.0, 0.0]]),
                &[1.0],
                ConnectionPolicy::Full,
            )
            .unwrap();
        assert_eq!(m.forward_units(&[3.0, 7.0]).unwrap(), vec![3.0]);
        assert!(m.forward_units(&[3.0]).is_err());
    }

    #[test]
    fn relu_kills_negative_input() {
        let base = AdaNetModel::empty(1, SurrogateLoss::Exponential)
            .attach_subnetwork(layer1(1, vec![vec![-2.0]]), &[0.0], ConnectionPolicy::Full)
            .unwrap();
        let deep = Subnetwork {
            round: 2,
            depth: 2,
            gamma: 0.0,
            layers: vec![
                vec![],
                vec![Unit {
                    sources: vec![Source::Unit(UnitId::new(1, 1, 0))],
                    u: vec![5.0],
                    activation: Activation::Relu,
                }],
            ],
        };
        let m = base
            .attach_subnetwork(deep, &[1.0], ConnectionPolicy::Full)
            .unwrap();
        assert_eq!(m.forward_units(&[1.0]).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(m.depth(), 2);
    }

    #[test]
    fn score_examples() {
        let sub = layer1(1, vec![vec![2.0], vec![1.0]]);
        let zero = AdaNetModel::empty(1, SurrogateLoss::Logistic)
            .attach_subnetwork(sub.clone(), &[0.0, 0.0], ConnectionPolicy::Full)
            .unwrap();
        assert_eq!(zero.score(&[1.0]).unwrap(), 0.0);

        let single = AdaNetModel::empty(1, SurrogateLoss::Logistic)
            .attach_subnetwork(layer1(1, vec![vec![2.0]]), &[0.5], ConnectionPolicy::Full)
            .unwrap();
        assert_eq!(single.score(&[1.0]).unwrap(), 1.0);

        let two = AdaNetModel::empty(1, SurrogateLoss::Logistic)
            .attach_subnetwork(
                layer1(1, vec![vec![1.0], vec![-3.0]]),
                &[0.25, 0.25],
                ConnectionPolicy::Full,
            )
            .unwrap();
        assert_eq!(two.score(&[1.0]).unwrap(), -0.5);
    }

    fn two_subnet_model() -> AdaNetModel {
        let m = AdaNetModel::empty(2, SurrogateLoss::Exponential)
            .attach_subnetwork(
                layer1(1, vec![vec![0.3, -0.2], vec![1.0, 0.5]]),
                &[0.4, -0.1],
                ConnectionPolicy::Full,
            )
            .unwrap();
        let layer_one = Unit {
            sources: vec![Source::Feature(0), Source::Feature(1), Source::Bias],
            u: vec![0.7, 0.1, -0.2],
            activation: Activation::Identity,
        };
        let layer_two = Unit {
            sources: vec![
                Source::Unit(UnitId::new(2, 1, 0)),
                Source::Unit(UnitId::new(1, 1, 0)),
                Source::Unit(UnitId::new(1, 1, 1)),
            ],
            u: vec![0.5, -1.25, 2.0],
            activation: Activation::Relu,
        };
        m.attach_subnetwork(
            Subnetwork {
                round: 2,
                depth: 2,
                gamma: 0.125,
                layers: vec![vec![layer_one], vec![layer_two]],
            },
            &[0.3],
            ConnectionPolicy::Full,
        )
        .unwrap()
    }

    #[test]
    fn attach_tracks_depth_and_counts() {
        let m = two_subnet_model();
        assert_eq!(m.depth(), 2);
        assert_eq!(m.layer_counts(), vec![3, 1]);
        assert_eq!(m.output_weights().len(), 3);
        assert_eq!(m.output_gammas(), &[0.0, 0.0, 0.125]);
    }

    #[test]
    fn attach_with_zero_weights_preserves_scores() {
        let m = two_subnet_model();
        let extra = layer1(3, vec![vec![9.0, 9.0]]);
        let m2 = m
            .attach_subnetwork(extra, &[0.0], ConnectionPolicy::Full)
            .unwrap();
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let x = [rng.normal(), rng.normal()];
            assert_eq!(m.score(&x).unwrap(), m2.score(&x).unwrap());
        }
    }

    #[test]
    fn attach_rejects_bad_structure() {
        let m = two_subnet_model();
        let dangling = Subnetwork {
            round: 3,
            depth: 2,
            gamma: 0.0,
            layers: vec![
                vec![],
                vec![Unit {
                    sources: vec![Source::Unit(UnitId::new(9, 1, 0))],
                    u: vec![1.0],
                    activation: Activation::Relu,
                }],
            ],
        };
        assert!(matches!(
            m.attach_subnetwork(dangling, &[1.0], ConnectionPolicy::Full),
            Err(Error::Structural(_))
        ));
        let skip_layer = Subnetwork {
            round: 3,
            depth: 3,
            gamma: 0.0,
            layers: vec![
                vec![],
                vec![],
                vec![Unit {
                    sources: vec![Source::Unit(UnitId::new(1, 1, 0))],
                    u: vec![1.0],
                    activation: Activation::Relu,
                }],
            ],
        };
        assert!(m
            .attach_subnetwork(skip_layer, &[1.0], ConnectionPolicy::Full)
            .is_err());
        let wrong_weights = layer1(3, vec![vec![1.0, 1.0]]);
        assert!(m
            .attach_subnetwork(wrong_weights, &[1.0, 2.0], ConnectionPolicy::Full)
            .is_err());
    }

    #[test]
    fn previous_policy_rejects_older_sources() {
        let m = two_subnet_model();
        let reads_round_one = Subnetwork {
            round: 3,
            depth: 2,
            gamma: 0.0,
            layers: vec![
                vec![],
                vec![Unit {
                    sources: vec![Source::Unit(UnitId::new(1, 1, 0))],
                    u: vec![1.0],
                    activation: Activation::Relu,
                }],
            ],
        };
        assert!(m
            .attach_subnetwork(reads_round_one.clone(), &[1.0], ConnectionPolicy::Previous)
            .is_err());
        assert!(m
            .attach_subnetwork(reads_round_one, &[1.0], ConnectionPolicy::Full)
            .is_ok());
    }

    #[test]
    fn cached_and_uncached_agree_exactly() {
        let m = two_subnet_model();
        let mut rng = SeededRng::new(8);
        let rows: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let mut cache = EvalCache::new(&x);
        cache.sync(&m).unwrap();
        let batch = cache.scores(&m);
        for (i, row) in rows.iter().enumerate() {
            let units = m.forward_units(row).unwrap();
            for (k, v) in units.iter().enumerate() {
                assert_eq!(cache.unit(k)[i].to_bits(), v.to_bits());
            }
            assert_eq!(batch[i].to_bits(), m.score(row).unwrap().to_bits());
        }
    }

    #[test]
    fn layer_one_unit_obeys_holder() {
        let mut rng = SeededRng::new(12);
        for &p in &[1.0, 1.5, 2.0, 3.0, f64::INFINITY] {
            let q = crate::kernel::dual_exponent(p).unwrap();
            let lambda = 1.3;
            let mut u: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            crate::kernel::project_to_ball(&mut u, p, lambda);
            let m = AdaNetModel::empty(5, SurrogateLoss::Exponential)
                .attach_subnetwork(layer1(1, vec![u]), &[1.0], ConnectionPolicy::Full)
                .unwrap();
            for _ in 0..200 {
                let x: Vec<f64> = (0..5).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let h = m.forward_units(&x).unwrap()[0];
                let xq = pnorm(&x, q).unwrap();
                let xinf = pnorm(&x, f64::INFINITY).unwrap();
                assert!(h.abs() <= lambda * xq * (1.0 + 1e-12));
                assert!(
                    lambda * xq <= lambda * crate::kernel::root_q(5.0, q) * xinf * (1.0 + 1e-12)
                );
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_bit_identical() {
        let m = two_subnet_model().with_hyperparams(serde_json::json!({"lambda": 1e-6}));
        let s1 = m.to_json();
        let back = AdaNetModel::from_json(&s1).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), s1);

        let empty = AdaNetModel::empty(3, SurrogateLoss::Logistic);
        let back = AdaNetModel::from_json(&empty.to_json()).unwrap();
        assert_eq!(back, empty);
        assert_eq!(back.num_units(), 0);
    }

    #[test]
    fn deserialization_is_strict() {
        let mut v: serde_json::Value = serde_json::from_str(&two_subnet_model().to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let err = AdaNetModel::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("surprise"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&two_subnet_model().to_json()).unwrap();
        v["schema_version"] = serde_json::json!(99);
        assert!(AdaNetModel::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&two_subnet_model().to_json()).unwrap();
        v["subnetworks"][1]["layers"][1][0]["sources"][0] = serde_json::json!("5.1.0");
        let err = AdaNetModel::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("dangling"), "{err}");
    }
}
