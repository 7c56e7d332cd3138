use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::check_version;
use super::train::ExperimentConfig;
use crate::classifier::{
    linear_backward, linear_logits, ssc_backward, ssc_logits, LinearClassifierParams, SscParams,
};
use crate::embeddings::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::fusion::{fusion_backward, fusion_forward, FusionParams};
use crate::losses::{cross_entropy, sam_loss, LossOutput, SamConfig};
use crate::metrics::Scorer;
use crate::numerics::Matrix;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear(LinearClassifierParams),
    Ssc(SscParams),
}

/// Every learnable tensor of the network: backbone, optional fusion block,
/// classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub backbone: Matrix,
    pub fusion: Option<FusionParams>,
    pub head: Head,
}

/// Named parameter groups, in the order [`HeadParams::params_mut`] yields them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    FusionQuery,
    FusionKey,
    FusionValue,
    FusionOutput,
    Projector,
    LinearWeights,
    LinearBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Backbone,
        ParamGroup::Projector,
        ParamGroup::FusionQuery,
        ParamGroup::FusionKey,
        ParamGroup::FusionValue,
        ParamGroup::FusionOutput,
        ParamGroup::LinearWeights,
        ParamGroup::LinearBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::FusionQuery => "w_q",
            ParamGroup::FusionKey => "w_k",
            ParamGroup::FusionValue => "w_v",
            ParamGroup::FusionOutput => "w_o",
            ParamGroup::Projector => "projector",
            ParamGroup::LinearWeights => "linear_weights",
            ParamGroup::LinearBias => "linear_bias",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub enum Objective {
    CrossEntropy,
    Sam(SamConfig),
}

impl Objective {
    pub fn evaluate(&self, logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
        match self {
            Objective::CrossEntropy => cross_entropy(logits, labels),
            Objective::Sam(cfg) => sam_loss(logits, labels, cfg),
        }
    }
}

/// Loss value plus gradients for each requested group, in `params_mut` order.
#[derive(Clone, Debug)]
pub struct PipelineGrads {
    pub loss: f64,
    pub groups: Vec<(ParamGroup, Matrix)>,
}

impl HeadParams {
    pub fn groups(&self, include_backbone: bool) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        if include_backbone {
            out.push(ParamGroup::Backbone);
        }
        if self.fusion.is_some() {
            out.extend([
                ParamGroup::FusionQuery,
                ParamGroup::FusionKey,
                ParamGroup::FusionValue,
                ParamGroup::FusionOutput,
            ]);
        }
        match self.head {
            Head::Linear(_) => out.extend([ParamGroup::LinearWeights, ParamGroup::LinearBias]),
            Head::Ssc(_) => out.push(ParamGroup::Projector),
        }
        out
    }

    pub fn params_mut(&mut self, include_backbone: bool) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if include_backbone {
            out.push(&mut self.backbone);
        }
        if let Some(f) = self.fusion.as_mut() {
            out.extend([&mut f.w_q, &mut f.w_k, &mut f.w_v, &mut f.w_o]);
        }
        match &mut self.head {
            Head::Linear(l) => out.extend([&mut l.weights, &mut l.bias]),
            Head::Ssc(s) => out.push(&mut s.projector),
        }
        out
    }

    pub fn params(&self, include_backbone: bool) -> Vec<Matrix> {
        self.clone()
            .params_mut(include_backbone)
            .into_iter()
            .map(|m| m.clone())
            .collect()
    }

    /// Rebuilds a parameter set from `values`, laid out as [`HeadParams::params`].
    pub fn with_params(&self, include_backbone: bool, values: &[Matrix]) -> Result<HeadParams> {
        let mut out = self.clone();
        let slots = out.params_mut(include_backbone);
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter matrices, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            slot.ensure_same_shape(v, "with_params")?;
            *slot = v.clone();
        }
        Ok(out)
    }

    fn needs_table(&self) -> bool {
        self.fusion.is_some() || matches!(self.head, Head::Ssc(_))
    }

    fn table<'a>(
        &self,
        table: Option<&'a ClassEmbeddingTable>,
    ) -> Result<Option<&'a ClassEmbeddingTable>> {
        if self.needs_table() && table.is_none() {
            return Err(Error::Config(
                "this model needs a class embedding table".into(),
            ));
        }
        Ok(table)
    }

    pub fn logits(&self, raw: &Matrix, table: Option<&ClassEmbeddingTable>) -> Result<Matrix> {
        let table = self.table(table)?;
        let mut features = raw.matmul(&self.backbone)?;
        if let Some(f) = &self.fusion {
            features = fusion_forward(&features, table.expect("checked").vectors(), f)?.0;
        }
        match &self.head {
            Head::Linear(l) => linear_logits(&features, l),
            Head::Ssc(s) => Ok(ssc_logits(&features, table.expect("checked"), s)?.0),
        }
    }

    /// Loss and analytic gradients for every trainable group. The backbone
    /// gradient is only produced when `include_backbone` is set.
    pub fn loss_and_grads(
        &self,
        raw: &Matrix,
        labels: &[usize],
        table: Option<&ClassEmbeddingTable>,
        objective: &Objective,
        include_backbone: bool,
    ) -> Result<PipelineGrads> {
        let table = self.table(table)?;
        let hidden = raw.matmul(&self.backbone)?;
        let fused = match &self.fusion {
            Some(f) => Some(fusion_forward(
                &hidden,
                table.expect("checked").vectors(),
                f,
            )?),
            None => None,
        };
        let head_in = fused.as_ref().map_or(&hidden, |(out, _)| out);

        let (loss, head_grads, grad_head_in) = match &self.head {
            Head::Linear(l) => {
                let logits = linear_logits(head_in, l)?;
                let loss = objective.evaluate(&logits, labels)?;
                let g = linear_backward(&loss.grad_logits, l, head_in)?;
                (loss.value, vec![g.weights, g.bias], g.features)
            }
            Head::Ssc(s) => {
                let t = table.expect("checked");
                let (logits, cache) = ssc_logits(head_in, t, s)?;
                let loss = objective.evaluate(&logits, labels)?;
                let g = ssc_backward(&loss.grad_logits, &cache, s, head_in, t)?;
                (loss.value, vec![g.projector], g.features)
            }
        };

        let mut fusion_grads = Vec::new();
        let grad_hidden = match (&self.fusion, &fused) {
            (Some(f), Some((_, cache))) => {
                let g = fusion_backward(
                    &grad_head_in,
                    cache,
                    f,
                    &hidden,
                    table.expect("checked").vectors(),
                )?;
                fusion_grads = vec![g.w_q, g.w_k, g.w_v, g.w_o];
                g.features
            }
            _ => grad_head_in,
        };

        let mut grads = Vec::new();
        if include_backbone {
            grads.push(raw.t_matmul(&grad_hidden)?);
        }
        grads.extend(fusion_grads);
        grads.extend(head_grads);
        let groups = self
            .groups(include_backbone)
            .into_iter()
            .zip(grads)
            .collect();
        Ok(PipelineGrads { loss, groups })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Ssc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Base,
    Finetune,
}

/// Serializable trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub format_version: u32,
    pub stage: TrainingStage,
    pub classifier: ClassifierKind,
    /// Output classes, in logit order.
    pub class_names: Vec<String>,
    pub params: HeadParams,
    /// Frozen embeddings used by the fusion block or similarity head.
    pub embeddings: Option<ClassEmbeddingTable>,
    pub config: ExperimentConfig,
}

impl ModelSnapshot {
    pub fn backbone(&self) -> &Matrix {
        &self.params.backbone
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Snapshot(e.to_string()))?;
        check_version(&value, MODEL_FORMAT_VERSION)?;
        serde_json::from_value(value).map_err(|e| Error::Snapshot(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Scorer for ModelSnapshot {
    fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.params.logits(features, self.embeddings.as_ref())
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }
}
