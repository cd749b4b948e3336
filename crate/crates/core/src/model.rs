//! Graph cost model: per-kind encoders, bottom-up message passing, root readout.
//!
//! For node `i` with encoding `e_i` and children `C(i)`:
//!
//! ```text
//! h_i = m_i * combine([e_i ‖ mean_{c ∈ C(i)} h_c])      (zeros when C(i) is empty)
//! log ŷ = readout(h_root) * scale + shift,   ŷ = exp(log ŷ)
//! ```
//!
//! `m_i` is the node mask factor (1 when unmasked). Zeroing it nulls the
//! node's content while its parents still average over the same child set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Axis, Tape, Var};
use crate::features::{featurize, FeatureError, FeatureSchema, FeaturizedPlan};
use crate::plan::{NodeId, NodeKind, PlanGraph};
use crate::rng::seeded;
use crate::tensor::{Tensor, TensorError};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN_WIDTH: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ModelError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ModelError::Tensor(TensorError::NonFinite { .. }))
    }
}

/// Per-node mask factors, indexed by node position in the plan.
#[derive(Debug, Clone, Copy, Default)]
pub enum MaskInput<'a> {
    #[default]
    None,
    Factors(&'a [f64]),
    /// Recorded `1×1` mask variables, for optimizing masks by gradient.
    Vars(&'a [Var]),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardInputs<'a> {
    pub features_require_grad: bool,
    pub mask: MaskInput<'a>,
}

/// Handles into a tape holding one recorded forward pass.
#[derive(Debug, Clone)]
pub struct RecordedForward {
    /// Input feature row per node position.
    pub features: Vec<Var>,
    /// Hidden state per node position, after masking.
    pub hidden: Vec<Var>,
    /// Scalar prediction in milliseconds.
    pub prediction: Var,
}

/// A model whose forward pass can be recorded with per-node masks.
///
/// Every explainer and the fidelity metric work against this trait.
pub trait NodeModel {
    fn record_forward(
        &self,
        tape: &mut Tape,
        plan: &PlanGraph,
        inputs: &ForwardInputs<'_>,
    ) -> Result<RecordedForward, ModelError>;

    /// Prediction with optional mask factors by node position.
    fn masked_prediction(
        &self,
        plan: &PlanGraph,
        factors: Option<&[f64]>,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let mask = factors.map_or(MaskInput::None, MaskInput::Factors);
        let rec = self.record_forward(
            &mut tape,
            plan,
            &ForwardInputs {
                features_require_grad: false,
                mask,
            },
        )?;
        Ok(tape.value(rec.prediction).item()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub hidden_width: usize,
    pub init_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            init_seed: 0,
        }
    }
}

/// Affine map of log-runtime targets, fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_median_q_error: f64,
    pub validation_p95_q_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub workload_id: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub validation_plan_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = Tensor::new(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
        let bias = Tensor::row(draw(fan_out));
        Self { weight, bias }
    }
}

/// Two dense layers; the second is rectified unless it is the readout.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    first: Dense,
    second: Dense,
}

impl Mlp {
    fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            first: Dense::init(rng, input, hidden),
            second: Dense::init(rng, hidden, output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    hyper: Hyperparams,
    schema: FeatureSchema,
    encoders: [Mlp; 4],
    combine: Mlp,
    readout: Mlp,
    target: TargetScaling,
    training: Option<TrainingMetadata>,
}

/// Parameter variables recorded once per tape and shared by every plan on it.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

const ENCODER_NAMES: [&str; 4] = ["operator", "table", "column", "predicate"];

impl CostModel {
    pub fn new(hyper: Hyperparams, schema: FeatureSchema) -> Result<Self, ModelError> {
        if hyper.hidden_width == 0 {
            return Err(ModelError::Parameter(
                "hidden_width must be positive".into(),
            ));
        }
        let d = hyper.hidden_width;
        let mut rng = seeded(hyper.init_seed);
        let encoders = NodeKind::ALL.map(|k| Mlp::init(&mut rng, schema.width(k), d, d));
        let combine = Mlp::init(&mut rng, 2 * d, d, d);
        let readout = Mlp::init(&mut rng, d, d, 1);
        Ok(Self {
            hyper,
            schema,
            encoders,
            combine,
            readout,
            target: TargetScaling::default(),
            training: None,
        })
    }

    /// Fresh model with the default feature schema.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(
            Hyperparams {
                init_seed: seed,
                ..Default::default()
            },
            FeatureSchema::default(),
        )
        .expect("default hyperparameters are valid")
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn target_scaling(&self) -> TargetScaling {
        self.target
    }

    pub fn set_target_scaling(&mut self, target: TargetScaling) {
        self.target = target;
    }

    pub fn training(&self) -> Option<&TrainingMetadata> {
        self.training.as_ref()
    }

    pub fn set_training(&mut self, meta: Option<TrainingMetadata>) {
        self.training = meta;
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out = Vec::with_capacity(12);
        for (name, mlp) in ENCODER_NAMES.iter().zip(&self.encoders) {
            out.push((format!("encoder.{name}.0"), &mlp.first));
            out.push((format!("encoder.{name}.1"), &mlp.second));
        }
        out.push(("combine.0".into(), &self.combine.first));
        out.push(("combine.1".into(), &self.combine.second));
        out.push(("readout.0".into(), &self.readout.first));
        out.push(("readout.1".into(), &self.readout.second));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = Vec::with_capacity(12);
        for mlp in self.encoders.iter_mut() {
            out.push(&mut mlp.first);
            out.push(&mut mlp.second);
        }
        out.push(&mut self.combine.first);
        out.push(&mut self.combine.second);
        out.push(&mut self.readout.first);
        out.push(&mut self.readout.second);
        out
    }

    /// Parameters in a fixed order: per layer, weight then bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|(_, d)| [&d.weight, &d.bias])
            .collect()
    }

    pub fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<(), ModelError> {
        let mut layers = self.layers_mut();
        if params.len() != 2 * layers.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter tensors, got {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (layer, pair) in layers.iter().zip(params.chunks(2)) {
            if layer.weight.shape() != pair[0].shape() || layer.bias.shape() != pair[1].shape() {
                return Err(ModelError::Contract("parameter shape mismatch".into()));
            }
        }
        for (layer, pair) in layers.iter_mut().zip(params.chunks(2)) {
            layer.weight = pair[0].clone();
            layer.bias = pair[1].clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Named weight and bias tensors, e.g. `combine.0.weight`.
    pub fn named_parameters(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, d) in self.layers() {
            out.insert(format!("{name}.weight"), d.weight.clone());
            out.insert(format!("{name}.bias"), d.bias.clone());
        }
        out
    }

    /// Copy of the model with every parameter replaced by `f(name, value)`.
    ///
    /// Shapes must be preserved; used to build models with planted structure.
    pub fn map_parameters(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> Result<Self, ModelError> {
        let params = self
            .layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    f(&format!("{name}.weight"), &d.weight),
                    f(&format!("{name}.bias"), &d.bias),
                ]
            })
            .collect();
        let mut out = self.clone();
        out.set_parameters(params)?;
        Ok(out)
    }

    pub fn record_params(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = self
            .parameters()
            .into_iter()
            .map(|t| {
                if requires_grad {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    pub fn featurize(&self, plan: &PlanGraph) -> Result<FeaturizedPlan, ModelError> {
        Ok(featurize(plan, &self.schema)?)
    }

    fn mlp(
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        rectify_output: bool,
    ) -> Result<Var, TensorError> {
        let h = tape.matmul(input, params[0])?;
        let h = tape.add(h, params[1])?;
        let h = tape.rectifier(h)?;
        let o = tape.matmul(h, params[2])?;
        let o = tape.add(o, params[3])?;
        if rectify_output {
            tape.rectifier(o)
        } else {
            Ok(o)
        }
    }

    /// Records the forward pass of one plan with precomputed features.
    ///
    /// Returns the recorded handles plus the log-space prediction variable.
    pub fn record_with(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        plan: &PlanGraph,
        features: &FeaturizedPlan,
        inputs: &ForwardInputs<'_>,
    ) -> Result<(RecordedForward, Var), ModelError> {
        let n = plan.len();
        if features.rows.len() != n {
            return Err(ModelError::Contract(
                "feature rows do not match plan nodes".into(),
            ));
        }
        match inputs.mask {
            MaskInput::Factors(f) if f.len() != n => {
                return Err(ModelError::Contract(format!(
                    "{} mask factors for {n} nodes",
                    f.len()
                )))
            }
            MaskInput::Vars(v) if v.len() != n => {
                return Err(ModelError::Contract(format!(
                    "{} mask variables for {n} nodes",
                    v.len()
                )))
            }
            _ => {}
        }
        let d = self.hyper.hidden_width;
        let p = &params.vars;
        let feature_vars: Vec<Var> = features
            .rows
            .iter()
            .map(|row| {
                if inputs.features_require_grad {
                    tape.leaf(row.clone())
                } else {
                    tape.constant(row.clone())
                }
            })
            .collect();
        let no_children = tape.constant(Tensor::zeros(1, d));
        let mut hidden: Vec<Option<Var>> = vec![None; n];

        for &pos in plan.topological_positions() {
            let kind = plan.nodes()[pos].kind.index();
            let enc = Self::mlp(tape, &p[kind * 4..kind * 4 + 4], feature_vars[pos], true)?;
            let children: Vec<Var> = plan
                .child_positions(pos)
                .map(|c| hidden[c].expect("children precede parents"))
                .collect();
            let agg = if children.is_empty() {
                no_children
            } else {
                let stacked = tape.concat(&children, Axis::Rows)?;
                tape.mean_rows(stacked)?
            };
            let joined = tape.concat(&[enc, agg], Axis::Cols)?;
            let mut h = Self::mlp(tape, &p[16..20], joined, true)?;
            match inputs.mask {
                MaskInput::None => {}
                MaskInput::Factors(f) => {
                    let factor = tape.constant(Tensor::scalar(f[pos]));
                    h = tape.scale_rows(h, factor)?;
                }
                MaskInput::Vars(v) => h = tape.scale_rows(h, v[pos])?,
            }
            hidden[pos] = Some(h);
        }

        let root = plan.position(plan.root()).expect("validated root");
        let root_hidden = hidden[root].expect("root computed");
        let r = Self::mlp(tape, &p[20..24], root_hidden, false)?;
        let scaled = tape.scale(r, self.target.scale)?;
        let log_pred = tape.offset(scaled, self.target.shift)?;
        let prediction = tape.exp(log_pred)?;
        Ok((
            RecordedForward {
                features: feature_vars,
                hidden: hidden
                    .into_iter()
                    .map(|h| h.expect("all nodes reached"))
                    .collect(),
                prediction,
            },
            log_pred,
        ))
    }

    /// Runs the model on `plan`, applying mask factors keyed by node id.
    pub fn predict(
        &self,
        plan: &PlanGraph,
        mask: Option<&BTreeMap<NodeId, f64>>,
    ) -> Result<ForwardTrace, ModelError> {
        let factors = match mask {
            None => None,
            Some(m) => Some(mask_factors(plan, m)?),
        };
        let mut tape = Tape::new();
        let features = self.featurize(plan)?;
        let params = self.record_params(&mut tape, false);
        let inputs = ForwardInputs {
            features_require_grad: false,
            mask: factors
                .as_deref()
                .map_or(MaskInput::None, MaskInput::Factors),
        };
        let (rec, _) = self.record_with(&mut tape, &params, plan, &features, &inputs)?;
        let predicted_runtime_ms = tape.value(rec.prediction).item()?;
        if !(predicted_runtime_ms.is_finite() && predicted_runtime_ms > 0.0) {
            return Err(TensorError::NonFinite { op: "predict" }.into());
        }
        let hidden = plan
            .nodes()
            .iter()
            .zip(&rec.hidden)
            .map(|(n, v)| (n.id, tape.value(*v).data().to_vec()))
            .collect();
        Ok(ForwardTrace {
            hidden,
            predicted_runtime_ms,
            tape,
            recorded: rec,
        })
    }

    pub fn to_file_json(&self) -> String {
        let envelope = ModelFile {
            format_version: FORMAT_VERSION,
            feature_schema_hash: self.schema.hash(),
            hyperparams: self.hyper.clone(),
            target_scaling: self.target,
            training: self.training.clone(),
            weights: self
                .named_parameters()
                .into_iter()
                .map(|(k, t)| (k, t.into_data()))
                .collect(),
        };
        serde_json::to_string(&envelope).expect("model serialization cannot fail")
    }

    pub fn from_file_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let schema = FeatureSchema::default();
        if file.feature_schema_hash != schema.hash() {
            return Err(ModelError::Format(format!(
                "feature schema hash {} does not match {}",
                file.feature_schema_hash,
                schema.hash()
            )));
        }
        let mut model = CostModel::new(file.hyperparams, schema)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let mut weights = file.weights;
        let names: Vec<String> = model.layers().into_iter().map(|(n, _)| n).collect();
        let mut params = Vec::with_capacity(names.len() * 2);
        for (name, layer) in names.iter().zip(model.layers()) {
            for (suffix, shape) in [
                ("weight", layer.1.weight.shape()),
                ("bias", layer.1.bias.shape()),
            ] {
                let key = format!("{name}.{suffix}");
                let data = weights
                    .remove(&key)
                    .ok_or_else(|| ModelError::Format(format!("missing weights {key}")))?;
                let t = Tensor::new(shape[0], shape[1], data)
                    .map_err(|e| ModelError::Format(format!("{key}: {e}")))?;
                if !t.is_finite() {
                    return Err(ModelError::Format(format!("{key} holds non-finite values")));
                }
                params.push(t);
            }
        }
        if let Some(extra) = weights.keys().next() {
            return Err(ModelError::Format(format!("unexpected weights {extra}")));
        }
        model.set_parameters(params)?;
        model.target = file.target_scaling;
        model.training = file.training;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_file_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_file_json(&text)
    }
}

impl NodeModel for CostModel {
    fn record_forward(
        &self,
        tape: &mut Tape,
        plan: &PlanGraph,
        inputs: &ForwardInputs<'_>,
    ) -> Result<RecordedForward, ModelError> {
        let features = self.featurize(plan)?;
        let params = self.record_params(tape, false);
        Ok(self.record_with(tape, &params, plan, &features, inputs)?.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    feature_schema_hash: String,
    hyperparams: Hyperparams,
    target_scaling: TargetScaling,
    #[serde(default)]
    training: Option<TrainingMetadata>,
    weights: BTreeMap<String, Vec<f64>>,
}

/// Result of [`CostModel::predict`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Hidden state per node id, after masking.
    pub hidden: BTreeMap<NodeId, Vec<f64>>,
    pub predicted_runtime_ms: f64,
    pub tape: Tape,
    pub recorded: RecordedForward,
}

/// Expands an id-keyed mask into per-position factors (missing ids keep 1).
pub fn mask_factors(
    plan: &PlanGraph,
    mask: &BTreeMap<NodeId, f64>,
) -> Result<Vec<f64>, ModelError> {
    let mut factors = vec![1.0; plan.len()];
    for (id, f) in mask {
        let pos = plan.position(*id).ok_or_else(|| {
            ModelError::Contract(format!("mask names node {id}, which is not in the plan"))
        })?;
        if !(0.0..=1.0).contains(f) {
            return Err(ModelError::Contract(format!(
                "mask factor {f} for node {id} outside [0, 1]"
            )));
        }
        factors[pos] = *f;
    }
    Ok(factors)
}
