//! Finite-difference verification of every trainable parameter group through
//! the complete pipeline `raw → backbone → fusion → classifier → loss`.
//!
//! Two networks are checked per seed: the similarity head with fusion (which
//! covers backbone, fusion weights and projector) and the plain linear head.
//! Each runs under cross-entropy and under the margin loss.

use std::collections::BTreeMap;

use crate::classifier::{LinearClassifierParams, SscParams};
use crate::embeddings::{margin_matrix, ClassEmbeddingTable};
use crate::error::Result;
use crate::fusion::FusionParams;
use crate::harness::{Head, HeadParams, Objective, ParamGroup};
use crate::losses::SamConfig;
use crate::numerics::{grad_check, Matrix, Rng};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub batch: usize,
    pub classes: usize,
    pub dim_raw: usize,
    pub dim_feat: usize,
    pub dim_text: usize,
    pub inter_dim: usize,
    pub alpha: f64,
    pub step: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            seed: 0,
            batch: 3,
            classes: 5,
            dim_raw: 6,
            dim_feat: 5,
            dim_text: 4,
            inter_dim: 3,
            alpha: 4.0,
            step: crate::numerics::DEFAULT_STEP,
        }
    }
}

/// Worst relative error of one parameter group under each loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub ce: f64,
    pub sam: f64,
}

impl GroupCheck {
    pub fn max(&self) -> f64 {
        self.ce.max(self.sam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteReport {
    pub groups: Vec<GroupCheck>,
}

impl GradSuiteReport {
    pub fn max(&self) -> f64 {
        self.groups.iter().map(GroupCheck::max).fold(0.0, f64::max)
    }

    pub fn failing(&self, tolerance: f64) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .filter(|g| g.max().is_nan() || g.max() >= tolerance)
            .map(|g| g.group)
            .collect()
    }

    /// Element-wise maximum with another report over the same groups.
    pub fn merge(&mut self, other: &GradSuiteReport) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            debug_assert_eq!(a.group, b.group);
            a.ce = a.ce.max(b.ce);
            a.sam = a.sam.max(b.sam);
        }
    }
}

fn random_table(rng: &mut Rng, classes: usize, dim: usize) -> Result<ClassEmbeddingTable> {
    let names = (0..classes).map(|i| format!("class{i}")).collect();
    ClassEmbeddingTable::new(names, rng.normal_matrix(classes, dim, 1.0))?.normalized()
}

/// Checks every group once under both losses. `corrupt` perturbs the
/// analytic gradient of one group, as a negative control.
pub fn run_gradient_suite(
    cfg: &GradSuiteConfig,
    corrupt: Option<ParamGroup>,
) -> Result<GradSuiteReport> {
    let root = Rng::new(cfg.seed);
    let mut rng = root.fork(1);

    // retry until at least one margin is active so the margin loss differs
    // from plain cross-entropy
    let mut table_rng = root.fork(2);
    let (table, margins) = loop {
        let t = random_table(&mut table_rng, cfg.classes, cfg.dim_text)?;
        let m = margin_matrix(&t, 0.0, usize::MAX)?;
        if !m.is_all_zero() {
            break (t, m);
        }
    };
    let objectives = [
        Objective::CrossEntropy,
        Objective::Sam(SamConfig::new(margins, cfg.alpha)?),
    ];

    let raw = rng.normal_matrix(cfg.batch, cfg.dim_raw, 1.0);
    let labels: Vec<usize> = (0..cfg.batch).map(|i| (i * 2 + 1) % cfg.classes).collect();
    let backbone = rng.normal_matrix(cfg.dim_raw, cfg.dim_feat, 0.5);
    let networks = [
        HeadParams {
            backbone: backbone.clone(),
            fusion: Some(FusionParams {
                w_q: rng.normal_matrix(cfg.dim_feat, cfg.inter_dim, 0.5),
                w_k: rng.normal_matrix(cfg.dim_text, cfg.inter_dim, 0.5),
                w_v: rng.normal_matrix(cfg.dim_text, cfg.inter_dim, 0.5),
                w_o: rng.normal_matrix(cfg.inter_dim, cfg.dim_feat, 0.5),
            }),
            head: Head::Ssc(SscParams {
                projector: rng.normal_matrix(cfg.dim_feat, cfg.dim_text, 0.5),
                alpha: cfg.alpha,
            }),
        },
        HeadParams {
            backbone,
            fusion: None,
            head: Head::Linear(LinearClassifierParams {
                weights: rng.normal_matrix(cfg.dim_feat, cfg.classes, 0.5),
                bias: rng.normal_matrix(1, cfg.classes, 0.5),
            }),
        },
    ];

    let mut results: BTreeMap<ParamGroup, GroupCheck> = BTreeMap::new();
    for net in &networks {
        for (oi, objective) in objectives.iter().enumerate() {
            let analytic = net.loss_and_grads(&raw, &labels, Some(&table), objective, true)?;
            let groups: Vec<ParamGroup> = analytic.groups.iter().map(|(g, _)| *g).collect();
            let mut grads: Vec<Matrix> = analytic.groups.into_iter().map(|(_, m)| m).collect();
            if let Some(bad) = corrupt {
                for (g, m) in groups.iter().zip(grads.iter_mut()) {
                    if *g == bad {
                        *m = m.map(|x| 1.5 * x + 0.1);
                    }
                }
            }
            let f = |values: &[Matrix]| {
                let p = net.with_params(true, values)?;
                let logits = p.logits(&raw, Some(&table))?;
                Ok(objective.evaluate(&logits, &labels)?.value)
            };
            let report = grad_check(f, &net.params(true), &grads, cfg.step)?;
            for (g, err) in groups.into_iter().zip(report.per_param) {
                let entry = results.entry(g).or_insert(GroupCheck {
                    group: g,
                    ce: 0.0,
                    sam: 0.0,
                });
                let slot = if oi == 0 {
                    &mut entry.ce
                } else {
                    &mut entry.sam
                };
                *slot = slot.max(err);
            }
        }
    }
    let groups = ParamGroup::ALL
        .iter()
        .filter_map(|g| results.remove(g))
        .collect();
    Ok(GradSuiteReport { groups })
}
