//! Deep Cox proportional-hazards model and its evaluation statistics.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::FlatTable;

pub const HIDDEN_UNITS: [usize; 2] = [32, 32];
pub const DEFAULT_DROPOUT: f64 = 0.25;
pub const IMPUTATION_SWEEPS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss is undefined without events")]
    NoEvents,
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("column {0} has no observed values")]
    AllMissing(String),
    #[error("table still has missing cells")]
    Missing,
}

fn arg(msg: impl Into<String>) -> SurvivalError {
    SurvivalError::Argument(msg.into())
}

// --- Weights ------------------------------------------------------------------

/// Dense layer computing `x · weights + bias`; `weights` is in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<DenseLayer>,
}

/// `[p, 32, 32, 1]`.
pub fn architecture_for(p: usize) -> Vec<usize> {
    let mut a = vec![p];
    a.extend(HIDDEN_UNITS);
    a.push(1);
    a
}

impl ModelWeights {
    /// Weights for `[p, 32, 32, 1]`, uniform on ±sqrt(6 / (fan_in + fan_out));
    /// biases start at zero.
    pub fn init(p: usize, seed: u64) -> Result<Self, SurvivalError> {
        if p < 1 {
            return Err(arg("input dimension must be at least 1"));
        }
        Self::init_with_architecture(&architecture_for(p), seed)
    }

    pub fn init_with_architecture(arch: &[usize], seed: u64) -> Result<Self, SurvivalError> {
        let mut w = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut w.layers {
            let limit = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
            for v in layer.weights.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(w)
    }

    pub fn zeros(arch: &[usize]) -> Result<Self, SurvivalError> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(arg(format!("invalid architecture {arch:?}")));
        }
        if arch[arch.len() - 1] != 1 {
            return Err(arg("final layer must have one output"));
        }
        Ok(Self {
            layers: arch.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn architecture(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.layers.iter().map(DenseLayer::inputs).collect();
        a.extend(self.layers.last().map(DenseLayer::outputs));
        a
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(DenseLayer::inputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks that layer shapes chain and the network ends in one output.
    pub fn check(&self) -> Result<(), SurvivalError> {
        if self.layers.is_empty() {
            return Err(SurvivalError::Shape("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(SurvivalError::Shape(format!("layer {i}: bias length {} != {}", l.bias.len(), l.outputs())));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.inputs() != l.outputs() {
                    return Err(SurvivalError::Shape(format!("layer {i} outputs {} but layer {} takes {}", l.outputs(), i + 1, next.inputs())));
                }
            }
        }
        if self.layers[self.layers.len() - 1].outputs() != 1 {
            return Err(SurvivalError::Shape("final layer must have one output".into()));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    /// All parameters: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn from_flat(arch: &[usize], values: &[f64]) -> Result<Self, SurvivalError> {
        let mut w = Self::zeros(arch)?;
        if values.len() != w.param_count() {
            return Err(SurvivalError::Shape(format!("expected {} parameters, got {}", w.param_count(), values.len())));
        }
        let mut it = values.iter().copied();
        for l in &mut w.layers {
            l.weights.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        Ok(w)
    }

    /// `self -= rate * grad`.
    pub fn descend(&mut self, grad: &ModelWeights, rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.scaled_add(-rate, &g.weights);
            l.bias.scaled_add(-rate, &g.bias);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsJson {
    architecture: Vec<usize>,
    layers: Vec<LayerJson>,
}

impl Serialize for ModelWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WeightsJson {
            architecture: self.architecture(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    shape: [l.inputs(), l.outputs()],
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = WeightsJson::deserialize(d)?;
        let mut layers = Vec::with_capacity(raw.layers.len());
        for (i, l) in raw.layers.into_iter().enumerate() {
            let [rows, cols] = l.shape;
            let weights = Array2::from_shape_vec((rows, cols), l.weights)
                .map_err(|_| D::Error::custom(format!("layer {i}: weights do not match shape {rows}x{cols}")))?;
            layers.push(DenseLayer {
                weights,
                bias: Array1::from(l.bias),
            });
        }
        let w = ModelWeights { layers };
        w.check().map_err(D::Error::custom)?;
        if w.architecture() != raw.architecture {
            return Err(D::Error::custom("architecture header does not match layer shapes"));
        }
        Ok(w)
    }
}

// --- Forward pass -------------------------------------------------------------

/// Per hidden layer, an n×units matrix of 0 or 1/(1-rate).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Array2<f64>>);

impl DropoutMasks {
    pub fn sample(w: &ModelWeights, n: usize, rate: f64, rng: &mut dyn RngCore) -> DropoutMasks {
        let keep = 1.0 / (1.0 - rate);
        DropoutMasks(
            w.layers[..w.layers.len() - 1]
                .iter()
                .map(|l| Array2::from_shape_simple_fn((n, l.outputs()), || if rng.random::<f64>() < rate { 0.0 } else { keep }))
                .collect(),
        )
    }
}

pub enum Mode<'a> {
    Infer,
    Train { rate: f64, rng: &'a mut dyn RngCore },
}

struct Activations {
    /// Input to each layer (after ReLU and dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    output: Array1<f64>,
}

fn forward_batch(w: &ModelWeights, x: &Array2<f64>, masks: Option<&DropoutMasks>) -> Activations {
    let last = w.layers.len() - 1;
    let mut inputs = Vec::with_capacity(w.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut a = x.clone();
    for (i, l) in w.layers.iter().enumerate() {
        let z = a.dot(&l.weights) + &l.bias;
        inputs.push(a);
        if i == last {
            return Activations {
                inputs,
                pre,
                output: z.column(0).to_owned(),
            };
        }
        let mut h = z.mapv(|v| v.max(0.0));
        if let Some(m) = masks {
            h *= &m.0[i];
        }
        pre.push(z);
        a = h;
    }
    unreachable!("network has at least one layer")
}

fn check_input(w: &ModelWeights, p: usize) -> Result<(), SurvivalError> {
    if p != w.input_dim() {
        return Err(arg(format!("input has {p} features, model expects {}", w.input_dim())));
    }
    Ok(())
}

/// Log-risk for one subject.
pub fn forward(w: &ModelWeights, x: &[f64], mode: Mode<'_>) -> Result<f64, SurvivalError> {
    check_input(w, x.len())?;
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let masks = match mode {
        Mode::Infer => None,
        Mode::Train { rate, rng } => Some(DropoutMasks::sample(w, 1, rate, rng)),
    };
    Ok(forward_batch(w, &x, masks.as_ref()).output[0])
}

/// Inference-mode log-risks for every row of `x`.
pub fn predict(w: &ModelWeights, x: &Array2<f64>) -> Result<Vec<f64>, SurvivalError> {
    check_input(w, x.ncols())?;
    Ok(forward_batch(w, x, None).output.to_vec())
}

// --- Cox partial likelihood ---------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct RiskOrder {
    /// Subject indices by decreasing time.
    order: Vec<usize>,
    /// Half-open ranges of `order` sharing one time.
    groups: Vec<(usize, usize)>,
}

impl RiskOrder {
    fn new(time: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..time.len()).collect();
        order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=order.len() {
            if k == order.len() || time[order[k]] != time[order[start]] {
                groups.push((start, k));
                start = k;
            }
        }
        Self { order, groups }
    }
}

/// Weighted Breslow negative mean log partial likelihood and its derivative
/// with respect to each log-risk.
fn cox_core(
    eta: &[f64],
    event: &[bool],
    weights: Option<&[f64]>,
    ord: &RiskOrder,
) -> Result<(f64, Vec<f64>), SurvivalError> {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let event_mass: f64 = (0..eta.len()).filter(|&i| event[i]).map(w).sum();
    if event_mass <= 0.0 {
        return Err(SurvivalError::NoEvents);
    }
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut risk = 0.0;
    let mut log_lik = 0.0;
    let mut inv = Vec::with_capacity(ord.groups.len());
    for &(s, e) in &ord.groups {
        for &j in &ord.order[s..e] {
            risk += w(j) * (eta[j] - m).exp();
        }
        let log_risk = risk.ln() + m;
        let mut group_inv = 0.0;
        for &i in &ord.order[s..e] {
            if event[i] {
                log_lik += w(i) * (eta[i] - log_risk);
                group_inv += w(i) / risk;
            }
        }
        inv.push(group_inv);
    }
    let mut grad = vec![0.0; eta.len()];
    let mut cumulative = 0.0;
    for (g, &(s, e)) in ord.groups.iter().enumerate().rev() {
        cumulative += inv[g];
        for &j in &ord.order[s..e] {
            let d = if event[j] { 1.0 } else { 0.0 };
            grad[j] = -w(j) * (d - (eta[j] - m).exp() * cumulative) / event_mass;
        }
    }
    Ok((-log_lik / event_mass, grad))
}

fn check_lengths(n: usize, time: &[f64], event: &[bool]) -> Result<(), SurvivalError> {
    if time.len() != n || event.len() != n {
        return Err(arg(format!("length mismatch: {n} predictions, {} times, {} events", time.len(), event.len())));
    }
    Ok(())
}

/// Negative mean Breslow log partial likelihood over event subjects.
pub fn cox_loss(log_risks: &[f64], time: &[f64], event: &[bool]) -> Result<f64, SurvivalError> {
    check_lengths(log_risks.len(), time, event)?;
    cox_core(log_risks, event, None, &RiskOrder::new(time)).map(|(l, _)| l)
}

// --- Batches and gradients ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalBatch {
    x: Array2<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
    weights: Option<Vec<f64>>,
    order: RiskOrder,
}

impl SurvivalBatch {
    pub fn new(x: Array2<f64>, time: Vec<f64>, event: Vec<bool>) -> Result<Self, SurvivalError> {
        check_lengths(x.nrows(), &time, &event)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(arg("features must be finite"));
        }
        if time.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(arg("times must be finite and non-negative"));
        }
        let order = RiskOrder::new(&time);
        Ok(Self {
            x,
            time,
            event,
            weights: None,
            order,
        })
    }

    /// Per-subject multiplicities in the partial likelihood.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, SurvivalError> {
        if weights.len() != self.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(arg("weights must be non-negative, one per subject"));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Requires a complete table.
    pub fn from_table(table: &FlatTable) -> Result<Self, SurvivalError> {
        let mut x = Array2::zeros((table.len(), table.width()));
        for (i, row) in table.rows.iter().enumerate() {
            for (j, c) in row.cells.iter().enumerate() {
                x[[i, j]] = c.ok_or(SurvivalError::Missing)?;
            }
        }
        Self::new(
            x,
            table.rows.iter().map(|r| r.event_time).collect(),
            table.rows.iter().map(|r| r.event).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[bool] {
        &self.event
    }

    pub fn event_count(&self) -> usize {
        self.event.iter().filter(|e| **e).count()
    }

    pub fn loss(&self, eta: &[f64]) -> Result<f64, SurvivalError> {
        cox_core(eta, &self.event, self.weights.as_deref(), &self.order).map(|(l, _)| l)
    }
}

/// Loss and exact gradient of the Cox loss of the network over the batch.
pub fn loss_and_grad(
    w: &ModelWeights,
    batch: &SurvivalBatch,
    masks: Option<&DropoutMasks>,
) -> Result<(f64, ModelWeights), SurvivalError> {
    check_input(w, batch.x.ncols())?;
    let acts = forward_batch(w, &batch.x, masks);
    let (loss, d_eta) = cox_core(
        acts.output.as_slice().expect("contiguous"),
        &batch.event,
        batch.weights.as_deref(),
        &batch.order,
    )?;
    let mut grad = w.zeros_like();
    let mut delta = Array2::from_shape_vec((d_eta.len(), 1), d_eta).expect("column vector");
    for i in (0..w.layers.len()).rev() {
        grad.layers[i].weights = acts.inputs[i].t().dot(&delta);
        grad.layers[i].bias = delta.sum_axis(Axis(0));
        if i == 0 {
            break;
        }
        let mut upstream = delta.dot(&w.layers[i].weights.t());
        if let Some(m) = masks {
            upstream *= &m.0[i - 1];
        }
        upstream.zip_mut_with(&acts.pre[i - 1], |g, z| {
            if *z <= 0.0 {
                *g = 0.0;
            }
        });
        delta = upstream;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Epochs per call to [`train_local`].
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            patience: 10,
        }
    }
}

impl TrainingConfig {
    pub fn check(&self) -> Result<(), SurvivalError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(arg("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(arg("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Seed stream for dropout masks: one independent generator per step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Gradient at training step `step`, with that step's dropout masks.
pub fn grad(
    w: &ModelWeights,
    batch: &SurvivalBatch,
    cfg: &TrainingConfig,
    step: u64,
) -> Result<(f64, ModelWeights), SurvivalError> {
    cfg.check()?;
    let masks = (cfg.dropout > 0.0).then(|| DropoutMasks::sample(w, batch.len(), cfg.dropout, &mut step_rng(cfg.seed, step)));
    loss_and_grad(w, batch, masks.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub history: Vec<EpochRecord>,
    /// 0 when no update improved on the starting weights.
    pub best_epoch: usize,
}

/// Full-batch gradient descent with early stopping on validation loss.
/// Returns the weights with the lowest validation loss seen, counting the
/// starting point. Without validation events every epoch runs and the final
/// weights are returned.
pub fn train_local(
    w: &ModelWeights,
    train: &SurvivalBatch,
    valid: &SurvivalBatch,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, SurvivalError> {
    cfg.check()?;
    check_input(w, train.x.ncols())?;
    check_input(w, valid.x.ncols())?;
    let valid_loss = |w: &ModelWeights| -> Option<f64> {
        if valid.event_count() == 0 {
            return None;
        }
        valid.loss(forward_batch(w, &valid.x, None).output.as_slice().expect("contiguous")).ok()
    };
    let mut current = w.clone();
    let mut best = (valid_loss(&current), 0usize, current.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let (train_loss, g) = grad(&current, train, cfg, epoch as u64)?;
        current.descend(&g, cfg.learning_rate);
        let v = valid_loss(&current);
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss: v,
        });
        match (v, best.0) {
            (Some(v), Some(b)) if v < b => {
                best = (Some(v), epoch, current.clone());
                stale = 0;
            }
            (Some(_), Some(_)) => {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
            _ => best = (None, epoch, current.clone()),
        }
    }
    Ok(TrainOutcome {
        weights: best.2,
        history,
        best_epoch: best.1,
    })
}

// --- Preprocessing ------------------------------------------------------------

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn mode(sorted: &[f64]) -> f64 {
    let mut best = (sorted[0], 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let v = sorted[k];
        let run = sorted[k..].iter().take_while(|x| **x == v).count();
        if run > best.1 {
            best = (v, run);
        }
        k += run;
    }
    best.0
}

fn observed(table: &FlatTable, j: usize) -> Vec<f64> {
    let mut v: Vec<f64> = table.rows.iter().filter_map(|r| r.cells[j]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Per column: median of observed values, or the mode for categorical
/// columns (smallest value on ties).
pub fn fill_values(table: &FlatTable) -> Result<Vec<f64>, SurvivalError> {
    (0..table.width())
        .map(|j| {
            let obs = observed(table, j);
            if obs.is_empty() {
                return Err(SurvivalError::AllMissing(table.columns[j].clone()));
            }
            Ok(if table.categorical[j] { mode(&obs) } else { median(&obs) })
        })
        .collect()
}

/// Simplified chained-equations imputation producing one completed table.
///
/// Missing cells start at [`fill_values`]; then each incomplete column is
/// regressed (least squares, standardized predictors plus intercept) on all
/// other columns over its observed rows, and its missing cells are replaced by
/// the predictions. Predictions are clipped to the observed range; categorical
/// predictions snap to the nearest observed category. The procedure is
/// deterministic.
pub fn impute(table: &FlatTable) -> Result<FlatTable, SurvivalError> {
    if table.is_empty() || table.missing_count() == 0 {
        return Ok(table.clone());
    }
    let fills = fill_values(table)?;
    let (n, p) = (table.len(), table.width());
    let missing: Vec<Vec<bool>> = (0..p)
        .map(|j| table.rows.iter().map(|r| r.cells[j].is_none()).collect())
        .collect();
    let mut data = Array2::zeros((n, p));
    for (i, r) in table.rows.iter().enumerate() {
        for j in 0..p {
            data[[i, j]] = r.cells[j].unwrap_or(fills[j]);
        }
    }
    let categories: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut v = observed(table, j);
            v.dedup();
            v
        })
        .collect();
    let incomplete: Vec<usize> = (0..p).filter(|&j| missing[j].iter().any(|m| *m)).collect();
    for _ in 0..IMPUTATION_SWEEPS {
        for &j in &incomplete {
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let obs_rows: Vec<usize> = (0..n).filter(|&i| !missing[j][i]).collect();
            let mut scale = Vec::with_capacity(others.len());
            for &k in &others {
                let col: Vec<f64> = obs_rows.iter().map(|&i| data[[i, k]]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                scale.push((mean, if sd > 0.0 { sd } else { 0.0 }));
            }
            let design = |i: usize| -> Vec<f64> {
                let mut row = Vec::with_capacity(others.len() + 1);
                row.push(1.0);
                for (&k, &(mean, sd)) in others.iter().zip(&scale) {
                    row.push(if sd > 0.0 { (data[[i, k]] - mean) / sd } else { 0.0 });
                }
                row
            };
            let d = others.len() + 1;
            let mut xtx = DMatrix::<f64>::zeros(d, d);
            let mut xty = DVector::<f64>::zeros(d);
            for &i in &obs_rows {
                let row = design(i);
                let y = data[[i, j]];
                for a in 0..d {
                    xty[a] += row[a] * y;
                    for b in 0..d {
                        xtx[(a, b)] += row[a] * row[b];
                    }
                }
            }
            let beta = xtx
                .svd(true, true)
                .solve(&xty, 1e-10)
                .map_err(|e| arg(format!("regression for {} failed: {e}", table.columns[j])))?;
            let (lo, hi) = (categories[j][0], categories[j][categories[j].len() - 1]);
            let predictions: Vec<(usize, f64)> = (0..n)
                .filter(|&i| missing[j][i])
                .map(|i| (i, design(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()))
                .collect();
            for (i, pred) in predictions {
                data[[i, j]] = if table.categorical[j] {
                    *categories[j]
                        .iter()
                        .min_by(|a, b| (*a - pred).abs().total_cmp(&(*b - pred).abs()))
                        .expect("observed values exist")
                } else {
                    pred.clamp(lo, hi)
                };
            }
        }
    }
    let mut out = table.clone();
    for (i, r) in out.rows.iter_mut().enumerate() {
        for j in 0..p {
            r.cells[j] = Some(data[[i, j]]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationBounds {
    /// Observed range of each column; missing cells are ignored.
    pub fn fit(table: &FlatTable) -> Result<Self, SurvivalError> {
        let mut min = vec![f64::INFINITY; table.width()];
        let mut max = vec![f64::NEG_INFINITY; table.width()];
        for r in &table.rows {
            for (j, c) in r.cells.iter().enumerate() {
                if let Some(v) = c {
                    min[j] = min[j].min(*v);
                    max[j] = max[j].max(*v);
                }
            }
        }
        if let Some(j) = min.iter().position(|m| !m.is_finite()) {
            return Err(SurvivalError::AllMissing(table.columns[j].clone()));
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    pub fn check(&self) -> Result<(), SurvivalError> {
        if self.min.len() != self.max.len() {
            return Err(SurvivalError::Shape("bounds have unequal lengths".into()));
        }
        if self.min.iter().zip(&self.max).any(|(a, b)| !(a <= b)) {
            return Err(arg("bounds require min <= max"));
        }
        Ok(())
    }

    /// Elementwise union of two ranges.
    pub fn merge(&self, other: &Self) -> Result<Self, SurvivalError> {
        if self.len() != other.len() {
            return Err(SurvivalError::Shape(format!("bounds of width {} and {}", self.len(), other.len())));
        }
        Ok(Self {
            min: self.min.iter().zip(&other.min).map(|(a, b)| a.min(*b)).collect(),
            max: self.max.iter().zip(&other.max).map(|(a, b)| a.max(*b)).collect(),
        })
    }

    /// `(v - min) / (max - min)`, or 0 for a constant column.
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            (v - self.min[j]) / span
        } else {
            0.0
        }
    }

    pub fn apply(&self, table: &FlatTable) -> Result<FlatTable, SurvivalError> {
        if table.width() != self.len() {
            return Err(SurvivalError::Shape(format!("table has {} columns, bounds {}", table.width(), self.len())));
        }
        let mut out = table.clone();
        for r in &mut out.rows {
            for (j, c) in r.cells.iter_mut().enumerate() {
                *c = c.map(|v| self.scale(j, v));
            }
        }
        Ok(out)
    }
}

/// Min-max normalization with bounds fitted on the table itself.
pub fn normalize(table: &FlatTable) -> Result<(FlatTable, NormalizationBounds), SurvivalError> {
    let bounds = NormalizationBounds::fit(table)?;
    Ok((bounds.apply(table)?, bounds))
}

// --- Evaluation ---------------------------------------------------------------

/// Harrell's concordance as exact counts: (2·concordant + ties, 2·comparable).
pub fn concordance_counts(pred: &[f64], time: &[f64], event: &[bool]) -> Result<(u64, u64), SurvivalError> {
    check_lengths(pred.len(), time, event)?;
    if pred.iter().any(|p| p.is_nan()) {
        return Err(arg("predictions contain NaN"));
    }
    let n = pred.len();
    let mut by_pred: Vec<usize> = (0..n).collect();
    by_pred.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for k in 0..n {
        if k > 0 && pred[by_pred[k]] != pred[by_pred[k - 1]] {
            r += 1;
        }
        rank[by_pred[k]] = r;
    }
    let mut tree = Fenwick::new(r + 1);
    let ord = RiskOrder::new(time);
    let (mut mass, mut comparable) = (0u64, 0u64);
    for &(s, e) in &ord.groups {
        let group = &ord.order[s..e];
        for &j in group.iter().filter(|&&j| !event[j]) {
            tree.add(rank[j]);
        }
        for &i in group.iter().filter(|&&i| event[i]) {
            let below = tree.prefix(rank[i]);
            let tied = tree.prefix(rank[i] + 1) - below;
            mass += 2 * below + tied;
            comparable += tree.total;
        }
        for &i in group.iter().filter(|&&i| event[i]) {
            tree.add(rank[i]);
        }
    }
    Ok((mass, 2 * comparable))
}

/// Fraction of comparable pairs ordered correctly by predicted risk; ties in
/// prediction count one half.
pub fn c_statistic(pred: &[f64], time: &[f64], event: &[bool]) -> Result<f64, SurvivalError> {
    let (mass, comparable) = concordance_counts(pred, time, event)?;
    if comparable == 0 {
        return Err(SurvivalError::NoComparablePairs);
    }
    Ok(mass as f64 / comparable as f64)
}

struct Fenwick {
    counts: Vec<u64>,
    total: u64,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n + 1],
            total: 0,
        }
    }

    fn add(&mut self, index: usize) {
        self.total += 1;
        let mut i = index + 1;
        while i < self.counts.len() {
            self.counts[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of entries with index < `end`.
    fn prefix(&self, end: usize) -> u64 {
        let mut i = end;
        let mut s = 0;
        while i > 0 {
            s += self.counts[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Two-sided 97.5% Student t quantiles for 1..=100 degrees of freedom.
const T_975: [f64; 100] = [
    12.706204736432095, 4.302652729696142, 3.182446305284263, 2.7764451051977987, 2.570581835636314,
    2.4469118511449692, 2.3646242515927844, 2.306004135204166, 2.2621571628540993, 2.2281388519649385,
    2.200985160082949, 2.1788128296634177, 2.1603686564610127, 2.1447866879169273, 2.131449545559323,
    2.1199052992210112, 2.1098155778331806, 2.10092204024096, 2.093024054408263, 2.0859634472658364,
    2.079613844727662, 2.0738730679040147, 2.0686576104190406, 2.0638985616280205, 2.059538552753294,
    2.055529438642871, 2.0518305164802833, 2.048407141795244, 2.045229642132703, 2.0422724563012373,
    2.0395134463964077, 2.036933343460101, 2.0345152974493383, 2.032244509317718, 2.0301079282503425,
    2.0280940009804502, 2.0261924630291093, 2.024394163911969, 2.0226909200367604, 2.0210753903062733,
    2.019540970441376, 2.018081702818444, 2.016692199227824, 2.0153675744437636, 2.014103388880846,
    2.0128955989194286, 2.0117405137297655, 2.010634757624232, 2.0095752371292397, 2.008559112100761,
    2.007583770315836, 2.006646805061688, 2.0057459953178687, 2.004879288188057, 2.004044783289146,
    2.003240718847872, 2.002465459291007, 2.0017174841452356, 2.0009953780882674, 2.00029782201426,
    1.9996235849949393, 1.9989715170333786, 1.998340542520741, 1.9977296543176926, 1.9971379083920033,
    1.9965644189523113, 1.9960083540252962, 1.9954689314298435, 1.9949454151072374, 1.994437111771186,
    1.993943367845625, 1.9934635666618716, 1.992997125889855, 1.9925434951809322, 1.9921021540022417,
    1.9916726096446642, 1.9912543953883843, 1.9908470688116904, 1.9904502102301282, 1.9900634212544457,
    1.9896863234569024, 1.9893185571365721, 1.9889597801751624, 1.9886096669757087, 1.9882679074772216,
    1.9879342062390202, 1.9876082815890703, 1.987289864831169, 1.986978699506281, 1.9866745407037676,
    1.9863771544186173, 1.98608631695113, 1.9858018143458234, 1.985523441866604, 1.9852510035091888,
    1.9849843115310182, 1.9847231860271193, 1.984467454426692, 1.9842169515086827, 1.9839715184496334,
];

const Z_975: f64 = 1.959963984540054;

/// t quantile at 0.975; the normal quantile beyond 100 degrees of freedom.
pub fn t_quantile_975(df: usize) -> Result<f64, SurvivalError> {
    match df {
        0 => Err(arg("degrees of freedom must be positive")),
        1..=100 => Ok(T_975[df - 1]),
        _ => Ok(Z_975),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Mean with a corrected resampled t interval: the variance of the mean is
/// inflated to `(1/k + n_test/n_train) · s²`. Only 95% confidence is tabulated.
pub fn corrected_resampled_ttest(
    samples: &[f64],
    n_train: usize,
    n_test: usize,
    confidence: f64,
) -> Result<Interval, SurvivalError> {
    let k = samples.len();
    if k < 2 {
        return Err(arg("at least two samples are required"));
    }
    if n_train == 0 || n_test == 0 {
        return Err(arg("train and test sizes must be positive"));
    }
    if confidence != 0.95 {
        return Err(arg(format!("confidence {confidence} is not tabulated; use 0.95")));
    }
    let kf = k as f64;
    let pivot = samples[0];
    let mean = pivot + samples.iter().map(|s| s - pivot).sum::<f64>() / kf;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (kf - 1.0);
    let hw = t_quantile_975(k - 1)? * ((1.0 / kf + n_test as f64 / n_train as f64) * var).sqrt();
    Ok(Interval {
        mean,
        lo: mean - hw,
        hi: mean + hw,
    })
}
