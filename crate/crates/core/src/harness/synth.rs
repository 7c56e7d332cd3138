//! Synthetic few-shot data with engineered confusable class pairs.
//!
//! Generation proceeds in three layers:
//!
//! 1. Unit class prototypes in feature space. Each designated similar pair is
//!    rotated so the novel prototype sits at the target cosine from its base
//!    partner.
//! 2. Text embeddings: prototypes isometrically lifted into text space,
//!    perturbed by a little noise and renormalized. With `decorrelate_text`
//!    they are independent random directions instead.
//! 3. Samples: prototype plus isotropic Gaussian noise, mapped to raw space
//!    through a fixed well-conditioned random matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{partition_classes, ClassEmbeddingTable, ClassPartition};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Matrix, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const PAIR_COSINE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarPair {
    pub novel_id: usize,
    pub base_id: usize,
    pub target_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_base: usize,
    pub num_novel: usize,
    pub dim_raw: usize,
    pub dim_feat: usize,
    pub dim_text: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the perturbation added to lifted prototypes
    /// before they become text embeddings.
    pub text_noise: f64,
    pub decorrelate_text: bool,
    pub similar_pairs: Vec<SimilarPair>,
    pub shots_k: usize,
    pub base_train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_base: 15,
            num_novel: 5,
            dim_raw: 24,
            dim_feat: 16,
            dim_text: 16,
            noise_sigma: 0.15,
            text_noise: 0.02,
            decorrelate_text: false,
            similar_pairs: vec![SimilarPair {
                novel_id: 15,
                base_id: 3,
                target_cosine: 0.85,
            }],
            shots_k: 1,
            base_train_per_class: 40,
            test_per_class: 40,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn class_name(&self, id: usize) -> String {
        if id < self.num_base {
            format!("base_{id:02}")
        } else {
            format!("novel_{id:02}")
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|i| self.class_name(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.num_base == 0 {
            return cfg("num_base must be ≥ 1".into());
        }
        if self.num_classes() < 2 {
            return cfg("need at least two classes".into());
        }
        if self.dim_feat == 0 || self.dim_raw == 0 || self.dim_text == 0 {
            return cfg("dimensions must be positive".into());
        }
        if self.dim_raw < self.dim_feat {
            return cfg(format!(
                "dim_raw ({}) must be ≥ dim_feat ({}) for the raw mixing to be invertible",
                self.dim_raw, self.dim_feat
            ));
        }
        if self.dim_text < self.dim_feat {
            return cfg(format!(
                "dim_text ({}) must be ≥ dim_feat ({})",
                self.dim_text, self.dim_feat
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return cfg(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            ));
        }
        if !(self.text_noise >= 0.0 && self.text_noise.is_finite()) {
            return cfg(format!(
                "text_noise must be non-negative, got {}",
                self.text_noise
            ));
        }
        if self.shots_k == 0 {
            return cfg("shots_k must be ≥ 1".into());
        }
        if self.base_train_per_class == 0 || self.test_per_class == 0 {
            return cfg("per-class sample counts must be ≥ 1".into());
        }
        let c = self.num_classes();
        for p in &self.similar_pairs {
            if p.novel_id >= c || p.base_id >= c || p.novel_id == p.base_id {
                return cfg(format!(
                    "similar pair ({}, {}) must name two distinct ids below {c}",
                    p.novel_id, p.base_id
                ));
            }
            if !(p.target_cosine > 0.0 && p.target_cosine < 1.0) {
                return cfg(format!(
                    "target cosine {} for pair ({}, {}) must lie in (0, 1)",
                    p.target_cosine, p.novel_id, p.base_id
                ));
            }
        }
        Ok(())
    }

    /// Names of the novel classes, in id order.
    pub fn novel_names(&self) -> Vec<String> {
        (self.num_base..self.num_classes())
            .map(|i| self.class_name(i))
            .collect()
    }
}

/// Features and labels of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `label,f0,f1,...` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.features.cols() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            out.push_str(&label.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSnapshot {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub embeddings: Option<ClassEmbeddingTable>,
    pub partition: ClassPartition,
    /// Abundant samples of base classes only.
    pub base_train: Split,
    /// Exactly `shots_k` samples per novel class.
    pub novel_train: Split,
    /// `test_per_class` samples for every class.
    pub test: Split,
    /// Unit prototypes in feature space, kept for diagnostics.
    pub prototypes: Matrix,
}

impl DatasetSnapshot {
    pub fn class_names(&self) -> Vec<String> {
        self.spec.class_names()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Snapshot(e.to_string()))?;
        check_version(&value, DATASET_FORMAT_VERSION)?;
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

pub(crate) fn check_version(value: &serde_json::Value, expected: u32) -> Result<()> {
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(expected) => Ok(()),
        Some(v) => Err(Error::Snapshot(format!(
            "unsupported format_version {v}, expected {expected}"
        ))),
        None => Err(Error::Snapshot("missing format_version field".into())),
    }
}

fn unit_random(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = l2_norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// `rows × cols` matrix with orthonormal rows (`rows ≤ cols`), by
/// Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    debug_assert!(rows <= cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= proj * bi);
            }
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_rows(&basis).expect("equal-length rows")
}

fn place_similar_pairs(prototypes: &mut Matrix, spec: &SynthSpec) -> Result<()> {
    let c = spec.num_classes();
    let mut moved = vec![false; c];
    for p in &spec.similar_pairs {
        if moved[p.novel_id] {
            return Err(Error::Generation(format!(
                "class {} appears as the adjusted side of more than one similar pair",
                p.novel_id
            )));
        }
        moved[p.novel_id] = true;
    }
    for p in &spec.similar_pairs {
        if moved[p.base_id] {
            return Err(Error::Generation(format!(
                "class {} is both adjusted and used as an anchor; pair constraints conflict",
                p.base_id
            )));
        }
    }
    for p in &spec.similar_pairs {
        let anchor = prototypes.row(p.base_id).to_vec();
        let mut ortho = prototypes.row(p.novel_id).to_vec();
        let proj = dot(&ortho, &anchor);
        ortho
            .iter_mut()
            .zip(&anchor)
            .for_each(|(x, a)| *x -= proj * a);
        let n = l2_norm(&ortho);
        if n < 1e-8 {
            return Err(Error::Generation(format!(
                "classes {} and {} are collinear; cannot place pair",
                p.novel_id, p.base_id
            )));
        }
        let (cos, sin) = (p.target_cosine, (1.0 - p.target_cosine.powi(2)).sqrt());
        let row = prototypes.row_mut(p.novel_id);
        for ((x, a), o) in row.iter_mut().zip(&anchor).zip(&ortho) {
            *x = cos * a + sin * o / n;
        }
        let unit = l2_norm(row);
        row.iter_mut().for_each(|x| *x /= unit);
        let measured = dot(prototypes.row(p.novel_id), &anchor);
        if (measured - p.target_cosine).abs() > PAIR_COSINE_TOLERANCE {
            return Err(Error::Generation(format!(
                "pair ({}, {}) reached cosine {measured}, target {}",
                p.novel_id, p.base_id, p.target_cosine
            )));
        }
    }
    Ok(())
}

fn sample_split(
    rng: &mut Rng,
    prototypes: &Matrix,
    mixing: &Matrix,
    sigma: f64,
    classes: impl Iterator<Item = usize>,
    per_class: usize,
) -> Result<Split> {
    let dim = prototypes.cols();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for class in classes {
        for _ in 0..per_class {
            let row: Vec<f64> = prototypes
                .row(class)
                .iter()
                .map(|&p| p + sigma * rng.normal())
                .collect();
            rows.push(row);
            labels.push(class);
        }
    }
    let latent = if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(Split {
        features: latent.matmul(mixing)?,
        labels,
    })
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<DatasetSnapshot> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let c = spec.num_classes();

    let mut proto_rng = root.fork(1);
    let proto_rows: Vec<Vec<f64>> = (0..c)
        .map(|_| unit_random(&mut proto_rng, spec.dim_feat))
        .collect();
    let mut prototypes = Matrix::from_rows(&proto_rows)?;
    place_similar_pairs(&mut prototypes, spec)?;

    let mut text_rng = root.fork(2);
    let lift = orthonormal_rows(&mut text_rng, spec.dim_feat, spec.dim_text);
    let text = if spec.decorrelate_text {
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| unit_random(&mut text_rng, spec.dim_text))
            .collect();
        Matrix::from_rows(&rows)?
    } else {
        let lifted = prototypes.matmul(&lift)?;
        let noise = text_rng.normal_matrix(c, spec.dim_text, spec.text_noise);
        lifted.add(&noise)?
    };
    let embeddings = ClassEmbeddingTable::new(spec.class_names(), text)?.normalized()?;

    // orthonormal rows scaled into [0.5, 2]: invertible and well conditioned
    let mut mix_rng = root.fork(3);
    let mut mixing = orthonormal_rows(&mut mix_rng, spec.dim_feat, spec.dim_raw);
    for r in 0..mixing.rows() {
        let s = mix_rng.uniform(0.5, 2.0);
        mixing.row_mut(r).iter_mut().for_each(|x| *x *= s);
    }

    let names = spec.class_names();
    let partition = partition_classes(&names, &spec.novel_names())?;
    let base_train = sample_split(
        &mut root.fork(4),
        &prototypes,
        &mixing,
        spec.noise_sigma,
        partition.base_ids.iter().copied(),
        spec.base_train_per_class,
    )?;
    let novel_train = sample_split(
        &mut root.fork(5),
        &prototypes,
        &mixing,
        spec.noise_sigma,
        partition.novel_ids.iter().copied(),
        spec.shots_k,
    )?;
    let test = sample_split(
        &mut root.fork(6),
        &prototypes,
        &mixing,
        spec.noise_sigma,
        0..c,
        spec.test_per_class,
    )?;

    Ok(DatasetSnapshot {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        embeddings: Some(embeddings),
        partition,
        base_train,
        novel_train,
        test,
        prototypes,
    })
}
