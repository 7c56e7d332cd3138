use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{
    ClassifierKind, Head, HeadParams, ModelSnapshot, Objective, TrainingStage, MODEL_FORMAT_VERSION,
};
use super::synth::{DatasetSnapshot, Split};
use crate::classifier::{validate_alpha, LinearClassifierParams, SscParams, DEFAULT_ALPHA};
use crate::embeddings::{margin_matrix, validate_gamma, ClassEmbeddingTable, MarginScope, TopK};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::losses::SamConfig;
use crate::numerics::{init_matrix, sgd_step, InitScheme, Matrix, Rng, SgdConfig};

/// Which of the three head components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModuleToggles {
    pub ssc: bool,
    pub mff: bool,
    pub sam: bool,
}

impl fmt::Display for ModuleToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.ssc { "ssc" } else { "linear" })?;
        if self.mff {
            f.write_str("+mff")?;
        }
        if self.sam {
            f.write_str("+sam")?;
        }
        Ok(())
    }
}

impl FromStr for ModuleToggles {
    type Err = Error;

    /// Parses `linear`, `ssc`, `ssc+mff`, `ssc+mff+sam`, ...
    fn from_str(s: &str) -> Result<Self> {
        let mut t = ModuleToggles {
            ssc: false,
            mff: false,
            sam: false,
        };
        for (i, part) in s.split('+').map(str::trim).enumerate() {
            match (i, part) {
                (0, "linear") => {}
                (0, "ssc") => t.ssc = true,
                (i, "mff") if i > 0 && !t.mff => t.mff = true,
                (i, "sam") if i > 0 && !t.sam => t.sam = true,
                _ => {
                    return Err(Error::Config(format!(
                        "bad module set {s:?}: expected linear|ssc followed by +mff / +sam"
                    )))
                }
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Cosine threshold below which no margin applies.
    pub gamma: f64,
    /// Number of most-similar classes eligible for a margin.
    pub k_similar: TopK,
    /// Fusion intermediate channel count `d`.
    pub inter_dim: usize,
    /// Logit scale of the similarity classifier.
    pub alpha: f64,
    /// Margin multiplier; falls back to `alpha`.
    pub margin_scale: Option<f64>,
    pub margin_scope: MarginScope,
    pub ssc: bool,
    pub mff: bool,
    pub sam: bool,
    /// Base-class samples per class revisited during fine-tuning; falls back
    /// to the dataset's `shots_k`.
    pub base_shots: Option<usize>,
    pub base_sgd: SgdConfig,
    pub finetune_sgd: SgdConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gamma: 0.5,
            k_similar: TopK::Count(3),
            inter_dim: 32,
            alpha: DEFAULT_ALPHA,
            margin_scale: None,
            margin_scope: MarginScope::AllPairs,
            ssc: true,
            mff: true,
            sam: true,
            base_shots: None,
            base_sgd: SgdConfig {
                learning_rate: 0.5,
                momentum: 0.9,
                steps: 300,
            },
            finetune_sgd: SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                steps: 200,
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn modules(&self) -> ModuleToggles {
        ModuleToggles {
            ssc: self.ssc,
            mff: self.mff,
            sam: self.sam,
        }
    }

    pub fn set_modules(&mut self, t: ModuleToggles) {
        self.ssc = t.ssc;
        self.mff = t.mff;
        self.sam = t.sam;
    }

    pub fn effective_margin_scale(&self) -> f64 {
        self.margin_scale.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        validate_gamma(self.gamma)?;
        validate_alpha(self.alpha)?;
        if let Some(s) = self.margin_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "margin_scale must be positive, got {s}"
                )));
            }
        }
        if self.inter_dim == 0 {
            return Err(Error::Config("inter_dim must be ≥ 1".into()));
        }
        if self.sam && !self.ssc {
            return Err(Error::Config(
                "sam requires ssc: margins are defined on the similarity classifier".into(),
            ));
        }
        self.base_sgd.validate()?;
        self.finetune_sgd.validate()
    }
}

/// Per-step training losses (value before each update).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn run_sgd(
    params: &mut HeadParams,
    include_backbone: bool,
    split: &Split,
    labels: &[usize],
    table: Option<&ClassEmbeddingTable>,
    objective: &Objective,
    sgd: &SgdConfig,
) -> Result<TrainReport> {
    let mut velocity: Vec<Matrix> = params
        .params(include_backbone)
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut report = TrainReport::default();
    for step in 0..sgd.steps {
        let g =
            params.loss_and_grads(&split.features, labels, table, objective, include_backbone)?;
        if !g.loss.is_finite() {
            return Err(Error::Divergence { step, loss: g.loss });
        }
        report.losses.push(g.loss);
        for ((p, v), (_, grad)) in params
            .params_mut(include_backbone)
            .into_iter()
            .zip(velocity.iter_mut())
            .zip(&g.groups)
        {
            sgd_step(p, grad, v, sgd)?;
        }
    }
    Ok(report)
}

const STREAM_BASE: u64 = 10;
const STREAM_FINETUNE: u64 = 20;
const STREAM_BASE_SHOTS: u64 = 21;

/// Stage one: backbone plus linear classifier over base classes, trained
/// with cross-entropy on the abundant base split.
pub fn train_base(
    data: &DatasetSnapshot,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ModelSnapshot, TrainReport)> {
    cfg.validate()?;
    let base_ids = &data.partition.base_ids;
    if data.base_train.is_empty() || base_ids.is_empty() {
        return Err(Error::Config("base training split is empty".into()));
    }
    let names = data.class_names();
    let labels =
        data.base_train
            .labels
            .iter()
            .map(|l| {
                base_ids.iter().position(|b| b == l).ok_or_else(|| {
                    Error::Contract(format!("base split contains non-base label {l}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;

    let mut rng = Rng::new(seed).fork(STREAM_BASE);
    let spec = &data.spec;
    let mut params = HeadParams {
        backbone: init_matrix(
            &mut rng,
            spec.dim_raw,
            spec.dim_feat,
            InitScheme::UniformFanIn,
        ),
        fusion: None,
        head: Head::Linear(LinearClassifierParams::init(
            &mut rng,
            spec.dim_feat,
            base_ids.len(),
        )),
    };
    let report = run_sgd(
        &mut params,
        true,
        &data.base_train,
        &labels,
        None,
        &Objective::CrossEntropy,
        &cfg.base_sgd,
    )?;
    let model = ModelSnapshot {
        format_version: MODEL_FORMAT_VERSION,
        stage: TrainingStage::Base,
        classifier: ClassifierKind::Linear,
        class_names: base_ids.iter().map(|&i| names[i].clone()).collect(),
        params,
        embeddings: None,
        config: cfg.clone(),
    };
    Ok((model, report))
}

/// Balanced fine-tuning set: every novel shot plus `base_shots` samples per
/// base class drawn without replacement from the base split.
pub fn finetune_split(data: &DatasetSnapshot, base_shots: usize, seed: u64) -> Result<Split> {
    let mut rng = Rng::new(seed).fork(STREAM_BASE_SHOTS);
    let mut picked = Vec::new();
    for &b in &data.partition.base_ids {
        let mut idx: Vec<usize> = (0..data.base_train.len())
            .filter(|&i| data.base_train.labels[i] == b)
            .collect();
        if idx.len() < base_shots {
            return Err(Error::Config(format!(
                "base class {b} has {} samples, cannot draw {base_shots}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        idx.truncate(base_shots);
        idx.sort_unstable();
        picked.extend(idx);
    }
    let base = data.base_train.select(&picked);
    Ok(Split {
        features: Matrix::vstack(&[&base.features, &data.novel_train.features])?,
        labels: base
            .labels
            .into_iter()
            .chain(data.novel_train.labels.iter().copied())
            .collect(),
    })
}

/// Stage two: frozen backbone, new head over all classes trained on the
/// balanced K-shot set.
pub fn finetune_novel(
    base_model: &ModelSnapshot,
    data: &DatasetSnapshot,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ModelSnapshot, TrainReport)> {
    cfg.validate()?;
    if base_model.stage != TrainingStage::Base || base_model.classifier != ClassifierKind::Linear {
        return Err(Error::Contract(
            "fine-tuning starts from a base-stage linear model".into(),
        ));
    }
    let Head::Linear(base_head) = &base_model.params.head else {
        return Err(Error::Contract("base model head is not linear".into()));
    };
    let table = data.embeddings.as_ref();
    if (cfg.ssc || cfg.mff) && table.is_none() {
        return Err(Error::Config(
            "ssc and mff need the class embedding table, dataset has none".into(),
        ));
    }
    if let Some(t) = table {
        if t.len() != data.spec.num_classes() {
            return Err(Error::Config(format!(
                "embedding table has {} classes, dataset has {}",
                t.len(),
                data.spec.num_classes()
            )));
        }
    }

    let spec = &data.spec;
    let c = spec.num_classes();
    let base_shots = cfg.base_shots.unwrap_or(spec.shots_k);
    let train = finetune_split(data, base_shots, seed)?;
    let mut rng = Rng::new(seed).fork(STREAM_FINETUNE);

    let head = if cfg.ssc {
        let t = table.expect("checked above");
        Head::Ssc(SscParams::init(
            &mut rng,
            spec.dim_feat,
            t.dim(),
            cfg.alpha,
        )?)
    } else {
        // expand the base classifier; novel columns start random
        let fresh = init_matrix(&mut rng, spec.dim_feat, c, InitScheme::UniformFanIn);
        let mut weights = Matrix::zeros(spec.dim_feat, c);
        let mut bias = Matrix::zeros(1, c);
        for class in 0..c {
            let base_col = data.partition.base_ids.iter().position(|&b| b == class);
            for r in 0..spec.dim_feat {
                let w = match base_col {
                    Some(j) => base_head.weights.get(r, j),
                    None => fresh.get(r, class),
                };
                weights.set(r, class, w);
            }
            if let Some(j) = base_col {
                bias.set(0, class, base_head.bias.get(0, j));
            }
        }
        Head::Linear(LinearClassifierParams { weights, bias })
    };
    let fusion = if cfg.mff {
        let t = table.expect("checked above");
        Some(FusionParams::init(
            &mut rng,
            spec.dim_feat,
            t.dim(),
            cfg.inter_dim,
        )?)
    } else {
        None
    };
    let objective = if cfg.sam {
        let t = table.expect("checked above");
        let margins = margin_matrix(t, cfg.gamma, cfg.k_similar.as_count())?
            .restrict(&data.partition, cfg.margin_scope);
        Objective::Sam(SamConfig::new(margins, cfg.effective_margin_scale())?)
    } else {
        Objective::CrossEntropy
    };

    let mut params = HeadParams {
        backbone: base_model.params.backbone.clone(),
        fusion,
        head,
    };
    let report = run_sgd(
        &mut params,
        false,
        &train,
        &train.labels,
        table,
        &objective,
        &cfg.finetune_sgd,
    )?;
    let model = ModelSnapshot {
        format_version: MODEL_FORMAT_VERSION,
        stage: TrainingStage::Finetune,
        classifier: if cfg.ssc {
            ClassifierKind::Ssc
        } else {
            ClassifierKind::Linear
        },
        class_names: data.class_names(),
        params,
        embeddings: table.cloned(),
        config: cfg.clone(),
    };
    Ok((model, report))
}
