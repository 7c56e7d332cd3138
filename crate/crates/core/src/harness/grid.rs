use std::collections::BTreeMap;

use rayon::prelude::*;

use super::model::ModelSnapshot;
use super::synth::{generate_dataset, DatasetSnapshot, SynthSpec};
use super::train::{finetune_novel, train_base, ExperimentConfig, ModuleToggles};
use crate::embeddings::TopK;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pair_confusion, ConfusionMatrix};

/// One swept hyperparameter and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub enum GridAxis {
    InterDim(Vec<usize>),
    KSimilar(Vec<TopK>),
    Modules(Vec<ModuleToggles>),
    Gamma(Vec<f64>),
    Shots(Vec<usize>),
    MarginScale(Vec<f64>),
}

impl GridAxis {
    fn len(&self) -> usize {
        match self {
            GridAxis::InterDim(v) => v.len(),
            GridAxis::KSimilar(v) => v.len(),
            GridAxis::Modules(v) => v.len(),
            GridAxis::Gamma(v) => v.len(),
            GridAxis::Shots(v) => v.len(),
            GridAxis::MarginScale(v) => v.len(),
        }
    }

    /// Applies value `i` and returns the `key=value` label for the cell id.
    fn apply(&self, i: usize, cfg: &mut ExperimentConfig, spec: &mut SynthSpec) -> String {
        match self {
            GridAxis::InterDim(v) => {
                cfg.inter_dim = v[i];
                format!("inter_dim={}", v[i])
            }
            GridAxis::KSimilar(v) => {
                cfg.k_similar = v[i];
                format!("k_similar={}", v[i])
            }
            GridAxis::Modules(v) => {
                cfg.set_modules(v[i]);
                format!("modules={}", v[i])
            }
            GridAxis::Gamma(v) => {
                cfg.gamma = v[i];
                format!("gamma={}", v[i])
            }
            GridAxis::Shots(v) => {
                spec.shots_k = v[i];
                format!("shots_k={}", v[i])
            }
            GridAxis::MarginScale(v) => {
                cfg.margin_scale = Some(v[i]);
                format!("margin_scale={}", v[i])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub id: String,
    pub config: ExperimentConfig,
    pub spec: SynthSpec,
}

/// Cartesian product of `axes` over the base configuration, first axis
/// varying slowest. No axes yields the single cell `default`.
pub fn expand_grid(
    config: &ExperimentConfig,
    spec: &SynthSpec,
    axes: &[GridAxis],
) -> Result<Vec<GridCell>> {
    if let Some(empty) = axes.iter().find(|a| a.len() == 0) {
        return Err(Error::Config(format!("grid axis {empty:?} has no values")));
    }
    let mut cells = vec![GridCell {
        id: String::new(),
        config: config.clone(),
        spec: spec.clone(),
    }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.len());
        for cell in &cells {
            for i in 0..axis.len() {
                let mut c = cell.clone();
                let label = axis.apply(i, &mut c.config, &mut c.spec);
                c.id = if c.id.is_empty() {
                    label
                } else {
                    format!("{};{label}", c.id)
                };
                next.push(c);
            }
        }
        cells = next;
    }
    if axes.is_empty() {
        cells[0].id = "default".into();
    }
    Ok(cells)
}

/// Spec actually generated for run seed `seed`.
pub fn seeded_spec(spec: &SynthSpec, seed: u64) -> SynthSpec {
    SynthSpec {
        seed: spec.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..spec.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub novel_acc: f64,
    pub base_acc: f64,
    /// One rate per similar pair of the spec, in spec order.
    pub pair_confusion: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate_model(model: &ModelSnapshot, data: &DatasetSnapshot) -> Result<EvalSummary> {
    let (_, cm) = evaluate(model, &data.test.features, &data.test.labels)?;
    let pair_confusion = data
        .spec
        .similar_pairs
        .iter()
        .map(|p| pair_confusion(&cm, p.novel_id, p.base_id))
        .collect::<Result<_>>()?;
    Ok(EvalSummary {
        novel_acc: cm.accuracy_over(&data.partition.novel_ids),
        base_acc: cm.accuracy_over(&data.partition.base_ids),
        pair_confusion,
        confusion: cm,
    })
}

/// Generate, base-train, fine-tune and evaluate one cell for one seed.
pub fn run_cell(cell: &GridCell, seed: u64) -> Result<(ModelSnapshot, EvalSummary)> {
    let data = generate_dataset(&seeded_spec(&cell.spec, seed))?;
    let (base, _) = train_base(&data, &cell.config, seed)?;
    finetune_and_evaluate(&base, &data, cell, seed)
}

fn finetune_and_evaluate(
    base: &ModelSnapshot,
    data: &DatasetSnapshot,
    cell: &GridCell,
    seed: u64,
) -> Result<(ModelSnapshot, EvalSummary)> {
    let (model, _) = finetune_novel(base, data, &cell.config, seed)?;
    let summary = evaluate_model(&model, data)?;
    Ok((model, summary))
}

/// Everything a per-cell writer gets to see, on the worker that ran the cell.
pub struct CellOutput<'a> {
    pub cell: &'a GridCell,
    pub seed: u64,
    pub model: &'a ModelSnapshot,
    pub summary: &'a EvalSummary,
}

pub type CellSink<'a> = dyn Fn(&CellOutput<'_>) -> Result<()> + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub novel_acc: f64,
    pub base_acc: f64,
    pub pair_confusion: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub cell_id: String,
    pub seed: u64,
    /// Failure message when the cell errored.
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResults {
    /// Column label per similar pair, e.g. `novel_15->base_03`.
    pub pair_labels: Vec<String>,
    pub records: Vec<ResultRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    /// Worker cap; `None` uses rayon's default pool.
    pub threads: Option<usize>,
}

/// Runs every (cell, seed) pair. A failing pair is recorded in its
/// [`ResultRecord`] and does not stop the grid. Records come back ordered
/// by cell, then seed.
pub fn run_experiment_grid(
    cells: &[GridCell],
    seeds: &[u64],
    options: &GridOptions,
    sink: Option<&CellSink<'_>>,
) -> Result<GridResults> {
    if cells.is_empty() {
        return Err(Error::Config("experiment grid has no cells".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("experiment grid has no seeds".into()));
    }
    let first = &cells[0].spec;
    if cells.iter().any(|c| {
        c.spec.similar_pairs != first.similar_pairs || c.spec.num_classes() != first.num_classes()
    }) {
        return Err(Error::Config(
            "all grid cells must share class layout and similar pairs".into(),
        ));
    }
    let pair_labels = first
        .similar_pairs
        .iter()
        .map(|p| {
            format!(
                "{}->{}",
                first.class_name(p.novel_id),
                first.class_name(p.base_id)
            )
        })
        .collect();

    let work = || run_all(cells, seeds, sink);
    let records = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(GridResults {
        pair_labels,
        records,
    })
}

fn run_all(cells: &[GridCell], seeds: &[u64], sink: Option<&CellSink<'_>>) -> Vec<ResultRecord> {
    // Base training depends only on (data spec, base settings, seed), so
    // cells sharing those reuse one base model.
    let base_key = |cell: &GridCell, seed: u64| {
        serde_json::to_string(&(seeded_spec(&cell.spec, seed), &cell.config.base_sgd, seed))
            .expect("serializable key")
    };
    let mut stage_one: BTreeMap<String, (&GridCell, u64)> = BTreeMap::new();
    for cell in cells {
        for &seed in seeds {
            stage_one
                .entry(base_key(cell, seed))
                .or_insert((cell, seed));
        }
    }
    let bases: BTreeMap<String, std::result::Result<(DatasetSnapshot, ModelSnapshot), String>> =
        stage_one
            .into_par_iter()
            .map(|(key, (cell, seed))| {
                let out = generate_dataset(&seeded_spec(&cell.spec, seed))
                    .and_then(|data| {
                        let (base, _) = train_base(&data, &cell.config, seed)?;
                        Ok((data, base))
                    })
                    .map_err(|e| format!("base stage: {e}"));
                (key, out)
            })
            .collect();

    let jobs: Vec<(&GridCell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(cell, seed)| {
            let outcome = match &bases[&base_key(cell, seed)] {
                Err(e) => Err(e.clone()),
                Ok((data, base)) => finetune_and_evaluate(base, data, cell, seed)
                    .and_then(|(model, summary)| {
                        if let Some(sink) = sink {
                            sink(&CellOutput {
                                cell,
                                seed,
                                model: &model,
                                summary: &summary,
                            })?;
                        }
                        Ok(CellMetrics {
                            novel_acc: summary.novel_acc,
                            base_acc: summary.base_acc,
                            pair_confusion: summary.pair_confusion,
                        })
                    })
                    .map_err(|e| e.to_string()),
            };
            ResultRecord {
                cell_id: cell.id.clone(),
                seed,
                outcome,
            }
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl GridResults {
    pub fn failures(&self) -> impl Iterator<Item = &ResultRecord> {
        self.records.iter().filter(|r| r.outcome.is_err())
    }

    /// Records for `cell_id`, seed order.
    pub fn cell(&self, cell_id: &str) -> Vec<&ResultRecord> {
        self.records
            .iter()
            .filter(|r| r.cell_id == cell_id)
            .collect()
    }

    /// `cell_id,seed,novel_acc,base_acc,confusion:<pair>...,status`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_id,seed,novel_acc,base_acc");
        for p in &self.pair_labels {
            out.push_str(&format!(",confusion:{p}"));
        }
        out.push_str(",status\n");
        for r in &self.records {
            out.push_str(&format!("{},{}", csv_field(&r.cell_id), r.seed));
            match &r.outcome {
                Ok(m) => {
                    out.push_str(&format!(",{},{}", m.novel_acc, m.base_acc));
                    for c in &m.pair_confusion {
                        out.push_str(&format!(",{c}"));
                    }
                    out.push_str(",ok\n");
                }
                Err(e) => {
                    out.push_str(",,");
                    for _ in &self.pair_labels {
                        out.push(',');
                    }
                    out.push_str(&format!(",{}\n", csv_field(&format!("error: {e}"))));
                }
            }
        }
        out
    }

    /// Mean and sample standard deviation across seeds, one row per cell.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "cell_id,ok_seeds,novel_acc_mean,novel_acc_std,base_acc_mean,base_acc_std",
        );
        for p in &self.pair_labels {
            out.push_str(&format!(",confusion:{p}_mean,confusion:{p}_std"));
        }
        out.push('\n');
        let mut order: Vec<&str> = Vec::new();
        for r in &self.records {
            if !order.contains(&r.cell_id.as_str()) {
                order.push(&r.cell_id);
            }
        }
        for id in order {
            let ok: Vec<&CellMetrics> = self
                .cell(id)
                .into_iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let col = |f: &dyn Fn(&CellMetrics) -> f64| {
                let (m, s) = mean_std(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
                format!(",{m},{s}")
            };
            out.push_str(&format!("{},{}", csv_field(id), ok.len()));
            out.push_str(&col(&|c| c.novel_acc));
            out.push_str(&col(&|c| c.base_acc));
            for i in 0..self.pair_labels.len() {
                out.push_str(&col(&|c| c.pair_confusion[i]));
            }
            out.push('\n');
        }
        out
    }
}
