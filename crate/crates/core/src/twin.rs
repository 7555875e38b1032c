//! Self-describing model packages and what-if risk prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::federated::Prediction;
use crate::path::parse_path;
use crate::profile::ResourceBundle;
use crate::projection::{ColumnSpec, Encoding, OutcomeSpec, Projection, ProjectionSpec};
use crate::survival::{architecture_for, forward, Mode, ModelWeights, NormalizationBounds};

pub const PACKAGE_FORMAT: &str = "fedtwin-model/1";

#[derive(Debug, Error, PartialEq)]
pub enum TwinError {
    #[error("export error: {0}")]
    Export(String),
    #[error("invalid package: {0}")]
    Package(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("unknown override {0:?}")]
    UnknownOverride(String),
    #[error("override {name:?}: {reason}")]
    BadOverride { name: String, reason: String },
}

/// Baseline cumulative hazard at yearly knots `0, 1, ..., horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub knots: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Breslow estimator: `H0(t) = Σ_{t_i ≤ t} d_i / Σ_{t_j ≥ t_i} exp(η_j)`.
pub fn breslow(predictions: &[Prediction], knots: &[f64]) -> Result<Vec<f64>, TwinError> {
    if predictions.iter().any(|p| !p.eta.is_finite() || !p.time.is_finite()) {
        return Err(TwinError::Export("non-finite calibration prediction".into()));
    }
    if !predictions.iter().any(|p| p.event) {
        return Err(TwinError::Export("calibration data has no events".into()));
    }
    let mut sorted: Vec<&Prediction> = predictions.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let shift = sorted.iter().map(|p| p.eta).fold(f64::NEG_INFINITY, f64::max);
    // Risk-set sums from the latest time backwards.
    let mut at_risk = vec![0.0; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        at_risk[i] = at_risk[i + 1] + (sorted[i].eta - shift).exp();
    }
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut j = i;
        let mut deaths = 0usize;
        while j < sorted.len() && sorted[j].time == t {
            deaths += sorted[j].event as usize;
            j += 1;
        }
        if deaths > 0 {
            steps.push((t, deaths as f64 / (at_risk[i] * shift.exp())));
        }
        i = j;
    }
    Ok(knots
        .iter()
        .map(|&k| steps.iter().take_while(|(t, _)| *t <= k).map(|(_, h)| h).sum())
        .collect())
}

impl BaselineHazard {
    pub fn fit(predictions: &[Prediction], horizon_years: f64) -> Result<Self, TwinError> {
        let last = horizon_years.ceil() as usize;
        let knots: Vec<f64> = (0..=last).map(|k| (k as f64).min(horizon_years)).collect();
        let cumulative = breslow(predictions, &knots)?;
        Ok(Self { knots, cumulative })
    }

    /// Step interpolation: the value at the last knot not after `t`.
    pub fn at(&self, t: f64) -> f64 {
        self.knots
            .iter()
            .zip(&self.cumulative)
            .take_while(|(k, _)| **k <= t)
            .last()
            .map(|(_, h)| *h)
            .unwrap_or(0.0)
    }

    fn check(&self) -> Result<(), TwinError> {
        if self.knots.len() != self.cumulative.len() || self.knots.is_empty() {
            return Err(TwinError::Package("baseline hazard knots and values differ in length".into()));
        }
        if self.knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TwinError::Package("baseline hazard knots must increase".into()));
        }
        if self.cumulative.iter().any(|h| !h.is_finite() || *h < 0.0) || self.cumulative.windows(2).any(|w| w[0] > w[1]) {
            return Err(TwinError::Package("baseline hazard must be finite and non-decreasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// sha256 of the training configuration.
    pub config_hash: String,
    pub layout_hash: String,
    pub rounds: u32,
    pub seed: u64,
    /// Where the baseline hazard was estimated.
    pub calibration: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPackage {
    pub format: String,
    pub name: String,
    pub version: String,
    pub architecture: Vec<usize>,
    pub inputs: Vec<ColumnSpec>,
    pub outcome: OutcomeSpec,
    /// Raw-scale ranges used to scale inputs to [0, 1].
    pub bounds: NormalizationBounds,
    /// Raw-scale value substituted for a missing input.
    pub medians: Vec<f64>,
    pub baseline_hazard: BaselineHazard,
    pub provenance: Provenance,
    pub weights: ModelWeights,
}

pub fn config_hash(config: &[u8]) -> String {
    hex::encode(Sha256::digest(config))
}

pub struct ExportInputs<'a> {
    pub weights: &'a ModelWeights,
    pub spec: &'a ProjectionSpec,
    pub bounds: &'a NormalizationBounds,
    pub medians: &'a [f64],
    pub calibration: &'a [Prediction],
    pub calibration_source: &'a str,
    pub config: &'a [u8],
    pub rounds: u32,
    pub seed: u64,
}

impl ModelPackage {
    pub fn export(x: ExportInputs<'_>) -> Result<ModelPackage, TwinError> {
        let p = x.spec.columns.len();
        if x.weights.input_dim() != p || x.weights.architecture() != architecture_for(p) {
            return Err(TwinError::Export(format!(
                "weights take {} inputs with architecture {:?}, spec has {p} columns",
                x.weights.input_dim(),
                x.weights.architecture()
            )));
        }
        if x.bounds.len() != p || x.medians.len() != p {
            return Err(TwinError::Export("bounds or medians do not match the spec".into()));
        }
        let pkg = ModelPackage {
            format: PACKAGE_FORMAT.into(),
            name: x.spec.name.clone(),
            version: x.spec.version.clone(),
            architecture: x.weights.architecture(),
            inputs: x.spec.columns.clone(),
            outcome: x.spec.outcome.clone(),
            bounds: x.bounds.clone(),
            medians: x.medians.to_vec(),
            baseline_hazard: BaselineHazard::fit(x.calibration, x.spec.outcome.horizon_years)?,
            provenance: Provenance {
                config_hash: config_hash(x.config),
                layout_hash: x.spec.layout_hash(),
                rounds: x.rounds,
                seed: x.seed,
                calibration: x.calibration_source.into(),
            },
            weights: x.weights.clone(),
        };
        pkg.check().map_err(|e| TwinError::Export(e.to_string()))?;
        Ok(pkg)
    }

    pub fn spec(&self) -> ProjectionSpec {
        ProjectionSpec {
            name: self.name.clone(),
            version: self.version.clone(),
            columns: self.inputs.clone(),
            outcome: self.outcome.clone(),
        }
    }

    pub fn check(&self) -> Result<(), TwinError> {
        let bad = |m: String| TwinError::Package(m);
        if self.format != PACKAGE_FORMAT {
            return Err(bad(format!("unsupported format {:?}", self.format)));
        }
        let p = self.inputs.len();
        self.weights.check().map_err(|e| bad(e.to_string()))?;
        if self.architecture != self.weights.architecture() || self.weights.input_dim() != p {
            return Err(bad("architecture does not match the inputs".into()));
        }
        for c in &self.inputs {
            parse_path(&c.expression).map_err(|e| bad(format!("{}: {e}", c.name)))?;
        }
        self.bounds.check().map_err(|e| bad(e.to_string()))?;
        if self.bounds.len() != p || self.medians.len() != p {
            return Err(bad("bounds or medians do not match the inputs".into()));
        }
        if self.medians.iter().any(|m| !m.is_finite()) {
            return Err(bad("non-finite median".into()));
        }
        self.baseline_hazard.check()?;
        self.spec().compile().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("package serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelPackage, TwinError> {
        let pkg: ModelPackage = serde_json::from_str(text).map_err(|e| TwinError::Package(e.to_string()))?;
        pkg.check()?;
        Ok(pkg)
    }
}

/// Request body of a what-if prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRequest {
    pub bundle: ResourceBundle,
    /// Raw-scale replacement values by input name.
    pub overrides: BTreeMap<String, serde_json::Value>,
}

impl ScenarioRequest {
    /// `{bundle, overrides?}`; a null override object counts as empty.
    pub fn from_json(json: &serde_json::Value) -> Result<ScenarioRequest, TwinError> {
        let bundle = json
            .get("bundle")
            .ok_or_else(|| TwinError::Input("request has no bundle".into()))?;
        let bundle = ResourceBundle::from_json(bundle).map_err(|e| TwinError::Input(e.to_string()))?;
        let overrides = match json.get("overrides") {
            None | Some(serde_json::Value::Null) => BTreeMap::new(),
            Some(serde_json::Value::Object(m)) => m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            Some(other) => return Err(TwinError::Input(format!("overrides must be an object, found {other}"))),
        };
        Ok(ScenarioRequest { bundle, overrides })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bundle": self.bundle.to_json(),
            "overrides": self.overrides,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub baseline_risk: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_risk: Option<f64>,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_eta: Option<f64>,
    pub imputed_inputs: Vec<String>,
    pub model_version: String,
    pub horizon_years: f64,
    pub calibration: String,
}

/// A loaded package with its compiled projection.
#[derive(Debug, Clone)]
pub struct Twin {
    package: ModelPackage,
    projection: Projection,
}

impl Twin {
    pub fn new(package: ModelPackage) -> Result<Twin, TwinError> {
        package.check()?;
        let projection = package.spec().compile().map_err(|e| TwinError::Package(e.to_string()))?;
        Ok(Twin { package, projection })
    }

    pub fn package(&self) -> &ModelPackage {
        &self.package
    }

    /// Raw-scale inputs read from the bundle; `None` where absent.
    pub fn raw_inputs(&self, bundle: &ResourceBundle) -> Result<Vec<Option<f64>>, TwinError> {
        if bundle.patient().is_none() {
            return Err(TwinError::Input("bundle has no Patient resource".into()));
        }
        (0..self.projection.len())
            .map(|j| {
                self.projection
                    .cell(j, bundle)
                    .map_err(|e| TwinError::Input(format!("{}: {e}", self.package.inputs[j].name)))
            })
            .collect()
    }

    /// Log-risk of a complete raw-scale row.
    pub fn eta(&self, raw: &[f64]) -> f64 {
        let x: Vec<f64> = raw.iter().enumerate().map(|(j, v)| self.package.bounds.scale(j, *v)).collect();
        forward(&self.package.weights, &x, Mode::Infer).expect("package shapes checked")
    }

    /// Absolute risk at the horizon for a log-risk.
    pub fn risk(&self, eta: f64) -> f64 {
        let h0 = self.package.baseline_hazard.at(self.package.outcome.horizon_years);
        -(-h0 * eta.exp()).exp_m1()
    }

    fn encode_override(&self, j: usize, raw: &serde_json::Value) -> Result<f64, TwinError> {
        let c = &self.package.inputs[j];
        let bad = |reason: String| TwinError::BadOverride {
            name: c.name.clone(),
            reason,
        };
        let v = c.encoding.encode_raw(raw).map_err(bad)?;
        if let Some([lo, hi]) = c.guard_range {
            if !(lo..=hi).contains(&v) {
                return Err(bad(format!("{v} is outside the plausible range [{lo}, {hi}]")));
            }
        }
        Ok(v)
    }

    pub fn predict(&self, req: &ScenarioRequest) -> Result<RiskReport, TwinError> {
        let mut overrides = vec![None; self.package.inputs.len()];
        for (name, raw) in &req.overrides {
            let j = self
                .package
                .inputs
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| TwinError::UnknownOverride(name.clone()))?;
            overrides[j] = Some(self.encode_override(j, raw)?);
        }
        let cells = self.raw_inputs(&req.bundle)?;
        let mut imputed = Vec::new();
        let baseline: Vec<f64> = cells
            .iter()
            .enumerate()
            .map(|(j, c)| {
                c.unwrap_or_else(|| {
                    imputed.push(self.package.inputs[j].name.clone());
                    self.package.medians[j]
                })
            })
            .collect();
        let eta = self.eta(&baseline);
        let scenario_eta = (!req.overrides.is_empty()).then(|| {
            let scenario: Vec<f64> = baseline.iter().zip(&overrides).map(|(b, o)| o.unwrap_or(*b)).collect();
            self.eta(&scenario)
        });
        Ok(RiskReport {
            baseline_risk: self.risk(eta),
            scenario_risk: scenario_eta.map(|e| self.risk(e)),
            eta,
            scenario_eta,
            imputed_inputs: imputed,
            model_version: self.package.version.clone(),
            horizon_years: self.package.outcome.horizon_years,
            calibration: self.package.provenance.calibration.clone(),
        })
    }
}

/// Descriptor list served as model metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDescriptor {
    pub name: String,
    pub expression: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub encoding: Encoding,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guard_range: Option<[f64; 2]>,
    /// Value used when the record lacks this input.
    pub default: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    pub version: String,
    pub horizon_years: f64,
    pub inputs: Vec<InputDescriptor>,
}

impl ModelPackage {
    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            name: self.name.clone(),
            version: self.version.clone(),
            horizon_years: self.outcome.horizon_years,
            inputs: self
                .inputs
                .iter()
                .zip(&self.medians)
                .map(|(c, m)| InputDescriptor {
                    name: c.name.clone(),
                    expression: c.expression.clone(),
                    unit: c.unit.clone(),
                    encoding: c.encoding.clone(),
                    guard_range: c.guard_range,
                    default: *m,
                })
                .collect(),
        }
    }
}
