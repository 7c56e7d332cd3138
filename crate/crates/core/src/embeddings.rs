//! Class-name embedding tables, cosine similarity, top-k neighbours and the
//! adaptive margin matrix.
//!
//! Embedding files are plain text:
//!
//! ```text
//! C D
//! name_0 v1 v2 ... vD
//! ...
//! name_{C-1} v1 v2 ... vD
//! ```
//!
//! Names carry no whitespace. Values are written with Rust's shortest
//! round-trip float formatting, so save followed by load is lossless.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Matrix};

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct ClassEmbeddingTable {
    names: Vec<String>,
    vectors: Matrix,
}

#[derive(Deserialize)]
struct RawTable {
    names: Vec<String>,
    vectors: Matrix,
}

impl TryFrom<RawTable> for ClassEmbeddingTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        ClassEmbeddingTable::new(raw.names, raw.vectors)
    }
}

impl ClassEmbeddingTable {
    /// Wraps `vectors` (one row per class) without rescaling them.
    pub fn new(names: Vec<String>, vectors: Matrix) -> Result<Self> {
        if names.len() != vectors.rows() {
            return Err(Error::shape(
                "ClassEmbeddingTable::new",
                format!("{} names", names.len()),
                format!("{} vectors", vectors.rows()),
            ));
        }
        if names.len() < 2 {
            return Err(Error::Contract(format!(
                "an embedding table needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if vectors.cols() == 0 {
            return Err(Error::Contract(
                "embedding dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::new();
        for name in &names {
            validate_name(name).map_err(Error::Contract)?;
            if !seen.insert(name.as_str()) {
                return Err(Error::Contract(format!("duplicate class name {name:?}")));
            }
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("embedding vectors must be finite".into()));
        }
        Ok(ClassEmbeddingTable { names, vectors })
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut vectors = self.vectors.clone();
        for r in 0..vectors.rows() {
            normalize_row(vectors.row_mut(r)).map_err(|_| {
                Error::Contract(format!("class {:?} has a zero vector", self.names[r]))
            })?;
        }
        Ok(ClassEmbeddingTable {
            names: self.names.clone(),
            vectors,
        })
    }

    pub fn load(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, normalize).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: Some(path.to_path_buf()),
                line,
                msg,
            },
            other => other,
        })
    }

    /// Parses the embedding text format. Errors carry 1-based line numbers.
    pub fn parse(text: &str, normalize: bool) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: None,
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file, expected header \"C D\"".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_count = |s: &str| s.parse::<usize>().ok().filter(|&n| n > 0);
        let (count, dim) = match fields.as_slice() {
            [c, d] => match (parse_count(c), parse_count(d)) {
                (Some(c), Some(d)) => (c, d),
                _ => {
                    return Err(parse_err(
                        1,
                        format!("malformed header {header:?}: expected two positive integers"),
                    ))
                }
            },
            _ => {
                return Err(parse_err(
                    1,
                    format!("malformed header {header:?}: expected \"C D\""),
                ))
            }
        };
        if count < 2 {
            return Err(parse_err(
                1,
                format!("need at least 2 classes, header says {count}"),
            ));
        }

        let mut names = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        let mut data = Vec::with_capacity(count * dim);
        let mut last_line = 1;
        for (line_no, line) in lines {
            last_line = line_no;
            if line.trim().is_empty() {
                continue;
            }
            if names.len() == count {
                return Err(parse_err(
                    line_no,
                    format!("unexpected extra line, header declares {count} classes"),
                ));
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().expect("non-empty line has a first token");
            let values: Vec<f64> = parts
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line_no, format!("invalid number {tok:?}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(parse_err(
                    line_no,
                    format!("class {name:?} has {} values, expected {dim}", values.len()),
                ));
            }
            if !seen.insert(name.to_string()) {
                return Err(parse_err(line_no, format!("duplicate class name {name:?}")));
            }
            let start = data.len();
            data.extend_from_slice(&values);
            if normalize && normalize_row(&mut data[start..]).is_err() {
                return Err(parse_err(
                    line_no,
                    format!("class {name:?} has a zero-norm vector"),
                ));
            }
            names.push(name.to_string());
        }
        if names.len() != count {
            return Err(parse_err(
                last_line,
                format!("header declares {count} classes, found {}", names.len()),
            ));
        }
        let vectors = Matrix::new(count, dim, data)?;
        ClassEmbeddingTable::new(names, vectors)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (name, row) in self.names.iter().zip(self.vectors.iter_rows()) {
            out.push_str(name);
            for v in row {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_unit_normalized(&self) -> bool {
        self.vectors
            .iter_rows()
            .all(|r| (l2_norm(r) - 1.0).abs() <= UNIT_TOLERANCE)
    }

    pub(crate) fn ensure_unit_normalized(&self, op: &str) -> Result<()> {
        if self.is_unit_normalized() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op} requires a unit-normalized embedding table"
            )))
        }
    }
}

fn validate_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() {
        Err("class names must be non-empty".into())
    } else if name.chars().any(char::is_whitespace) {
        Err(format!("class name {name:?} contains whitespace"))
    } else {
        Ok(())
    }
}

fn normalize_row(row: &mut [f64]) -> std::result::Result<(), ()> {
    let norm = l2_norm(row);
    if norm == 0.0 || !norm.is_finite() {
        return Err(());
    }
    for x in row.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Pairwise cosine similarities `S = T·Tᵀ`, clamped to `[-1, 1]`.
pub fn similarity_matrix(table: &ClassEmbeddingTable) -> Result<Matrix> {
    table.ensure_unit_normalized("similarity_matrix")?;
    let s = table.vectors.matmul_t(&table.vectors)?;
    Ok(s.map(|x| x.clamp(-1.0, 1.0)))
}

/// The `k` classes most similar to `class_id`, most similar first.
///
/// The class itself is excluded; ties go to the lower class index. Fewer than
/// `k` ids come back when there are fewer than `k` other classes.
pub fn topk_similar(similarity: &Matrix, class_id: usize, k: usize) -> Result<Vec<usize>> {
    let c = similarity.rows();
    if similarity.cols() != c {
        return Err(Error::shape(
            "topk_similar",
            similarity.shape_str(),
            "square matrix",
        ));
    }
    if class_id >= c {
        return Err(Error::Contract(format!(
            "class id {class_id} out of range for {c} classes"
        )));
    }
    let row = similarity.row(class_id);
    let mut others: Vec<usize> = (0..c).filter(|&j| j != class_id).collect();
    // stable sort keeps ascending index order among equal similarities
    others.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    others.truncate(k);
    Ok(others)
}

/// How many similar classes receive a margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TopK {
    Count(usize),
    All,
}

impl TopK {
    pub fn as_count(self) -> usize {
        match self {
            TopK::Count(k) => k,
            TopK::All => usize::MAX,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Count(k) => write!(f, "{k}"),
            TopK::All => f.write_str("all"),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(TopK::All)
        } else {
            s.parse()
                .map(TopK::Count)
                .map_err(|_| Error::Config(format!("k must be a count or \"all\", got {s:?}")))
        }
    }
}

impl Serialize for TopK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TopK::Count(k) => s.serialize_u64(*k as u64),
            TopK::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(k) => Ok(TopK::Count(k as usize)),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which class pairs are eligible for a margin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginScope {
    /// Every ordered pair of distinct classes.
    #[default]
    AllPairs,
    /// Only pairs where at least one side is a novel class.
    NovelPairs,
}

/// Adaptive margins: `m[i][j] = cos(t_i, t_j)` when `j` is among the top-k
/// neighbours of `i` and the cosine strictly exceeds `gamma`, else 0.
///
/// Neighbours are ranked on raw cosine first and thresholded second. Ranking
/// after thresholding yields the same matrix whenever at most `k` neighbours
/// clear the threshold. The matrix is not symmetric in general because top-k
/// sets are directional.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginMatrix {
    values: Matrix,
    gamma: f64,
    k: usize,
}

impl MarginMatrix {
    /// All-zero margins for `classes` classes.
    pub fn zeros(classes: usize) -> Self {
        MarginMatrix {
            values: Matrix::zeros(classes, classes),
            gamma: 0.0,
            k: 0,
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&x| x == 0.0)
    }

    /// Zeroes margins between two base classes when `scope` is
    /// [`MarginScope::NovelPairs`].
    pub fn restrict(&self, partition: &ClassPartition, scope: MarginScope) -> MarginMatrix {
        let mut out = self.clone();
        if scope == MarginScope::NovelPairs {
            let c = out.num_classes();
            for i in 0..c {
                for j in 0..c {
                    if !partition.is_novel(i) && !partition.is_novel(j) {
                        out.values.set(i, j, 0.0);
                    }
                }
            }
        }
        out
    }
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )))
    }
}

pub fn margin_matrix(table: &ClassEmbeddingTable, gamma: f64, k: usize) -> Result<MarginMatrix> {
    validate_gamma(gamma)?;
    let similarity = similarity_matrix(table)?;
    let c = table.len();
    let mut values = Matrix::zeros(c, c);
    for i in 0..c {
        for j in topk_similar(&similarity, i, k)? {
            let cos = similarity.get(i, j);
            if cos - gamma > 0.0 {
                values.set(i, j, cos);
            }
        }
    }
    Ok(MarginMatrix { values, gamma, k })
}

/// Disjoint base/novel split of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
}

impl ClassPartition {
    pub fn num_classes(&self) -> usize {
        self.base_ids.len() + self.novel_ids.len()
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.novel_ids.contains(&id)
    }
}

/// Marks `novel_names` as novel and everything else in `names` as base.
pub fn partition_classes<S: AsRef<str>>(
    names: &[String],
    novel_names: &[S],
) -> Result<ClassPartition> {
    let mut novel_ids = Vec::with_capacity(novel_names.len());
    for novel in novel_names {
        let novel = novel.as_ref();
        let id = names
            .iter()
            .position(|n| n == novel)
            .ok_or_else(|| Error::Config(format!("unknown novel class {novel:?}")))?;
        if novel_ids.contains(&id) {
            return Err(Error::Config(format!("novel class {novel:?} listed twice")));
        }
        novel_ids.push(id);
    }
    novel_ids.sort_unstable();
    let base_ids: Vec<usize> = (0..names.len())
        .filter(|i| !novel_ids.contains(i))
        .collect();
    if base_ids.is_empty() {
        return Err(Error::Config(
            "every class is novel; base training needs at least one base class".into(),
        ));
    }
    Ok(ClassPartition {
        base_ids,
        novel_ids,
    })
}
