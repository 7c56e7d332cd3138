//! Semantic similarity classifier and the linear baseline it replaces.
//!
//! The similarity classifier projects features into embedding space, unit
//! normalizes them and scores each class by `alpha · cos(ẑ, t_c)` against a
//! frozen embedding table. No gradient ever reaches the table.

use serde::{Deserialize, Serialize};

use crate::embeddings::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{init_matrix, l2_norm, InitScheme, Matrix, Rng};

pub const DEFAULT_ALPHA: f64 = 16.0;
const MIN_PROJECTED_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SscParams {
    pub projector: Matrix,
    pub alpha: f64,
}

impl SscParams {
    pub fn init(rng: &mut Rng, feat_dim: usize, text_dim: usize, alpha: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        Ok(SscParams {
            projector: init_matrix(rng, feat_dim, text_dim, InitScheme::UniformFanIn),
            alpha,
        })
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct SscCache {
    /// `v·P` before normalization.
    pub projected: Matrix,
    pub norms: Vec<f64>,
    /// Row-normalized projection ẑ.
    pub unit: Matrix,
}

#[derive(Clone, Debug)]
pub struct SscGrads {
    pub projector: Matrix,
    pub features: Matrix,
    /// Gradient with respect to the unnormalized projection `z = v·P`.
    pub projected: Matrix,
}

pub fn ssc_logits(
    features: &Matrix,
    table: &ClassEmbeddingTable,
    params: &SscParams,
) -> Result<(Matrix, SscCache)> {
    validate_alpha(params.alpha)?;
    table.ensure_unit_normalized("ssc_logits")?;
    if params.projector.cols() != table.dim() {
        return Err(Error::shape(
            "ssc_logits projector/table",
            params.projector.shape_str(),
            table.vectors().shape_str(),
        ));
    }
    let projected = features.matmul(&params.projector)?;
    let mut unit = projected.clone();
    let mut norms = Vec::with_capacity(projected.rows());
    for r in 0..unit.rows() {
        let norm = l2_norm(unit.row(r));
        if norm.is_nan() || norm < MIN_PROJECTED_NORM {
            return Err(Error::DegenerateFeature { row: r, norm });
        }
        for x in unit.row_mut(r) {
            *x /= norm;
        }
        norms.push(norm);
    }
    let logits = unit.matmul_t(table.vectors())?.scale(params.alpha);
    Ok((
        logits,
        SscCache {
            projected,
            norms,
            unit,
        },
    ))
}

pub fn ssc_backward(
    grad_logits: &Matrix,
    cache: &SscCache,
    params: &SscParams,
    features: &Matrix,
    table: &ClassEmbeddingTable,
) -> Result<SscGrads> {
    if grad_logits.rows() != cache.unit.rows()
        || grad_logits.cols() != table.len()
        || features.rows() != cache.projected.rows()
        || cache.projected.cols() != params.projector.cols()
    {
        return Err(Error::Contract(format!(
            "ssc cache ({} projected) does not match gradient {} / features {}",
            cache.projected.shape_str(),
            grad_logits.shape_str(),
            features.shape_str(),
        )));
    }
    // d/dẑ of alpha·ẑ·tᵀ
    let grad_unit = grad_logits.matmul(table.vectors())?.scale(params.alpha);
    // through ẑ = z/|z|: dz = (dẑ − ẑ(ẑ·dẑ)) / |z|
    let mut grad_projected = grad_unit;
    for r in 0..grad_projected.rows() {
        let u = cache.unit.row(r);
        let g = grad_projected.row_mut(r);
        let radial: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / cache.norms[r];
        for (gi, &ui) in g.iter_mut().zip(u) {
            *gi = (*gi - ui * radial) * inv;
        }
    }
    Ok(SscGrads {
        projector: features.t_matmul(&grad_projected)?,
        features: grad_projected.matmul_t(&params.projector)?,
        projected: grad_projected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifierParams {
    pub weights: Matrix,
    /// Stored as a 1×C row.
    pub bias: Matrix,
}

impl LinearClassifierParams {
    pub fn init(rng: &mut Rng, feat_dim: usize, classes: usize) -> Self {
        LinearClassifierParams {
            weights: init_matrix(rng, feat_dim, classes, InitScheme::UniformFanIn),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub weights: Matrix,
    pub bias: Matrix,
    pub features: Matrix,
}

/// `v·W + b`.
pub fn linear_logits(features: &Matrix, params: &LinearClassifierParams) -> Result<Matrix> {
    if params.bias.shape() != (1, params.weights.cols()) {
        return Err(Error::shape(
            "linear_logits bias",
            params.bias.shape_str(),
            format!("1x{}", params.weights.cols()),
        ));
    }
    let mut logits = features.matmul(&params.weights)?;
    for r in 0..logits.rows() {
        for (x, &b) in logits.row_mut(r).iter_mut().zip(params.bias.data()) {
            *x += b;
        }
    }
    Ok(logits)
}

pub fn linear_backward(
    grad_logits: &Matrix,
    params: &LinearClassifierParams,
    features: &Matrix,
) -> Result<LinearGrads> {
    if grad_logits.rows() != features.rows() || grad_logits.cols() != params.weights.cols() {
        return Err(Error::shape(
            "linear_backward",
            grad_logits.shape_str(),
            format!("{}x{}", features.rows(), params.weights.cols()),
        ));
    }
    let mut bias = Matrix::zeros(1, grad_logits.cols());
    for r in grad_logits.iter_rows() {
        for (b, &g) in bias.data_mut().iter_mut().zip(r) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        weights: features.t_matmul(grad_logits)?,
        bias,
        features: grad_logits.matmul_t(&params.weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, grad_check, softmax_rows, DEFAULT_STEP};

    fn orthonormal_table(c: usize) -> ClassEmbeddingTable {
        let names = (0..c).map(|i| format!("c{i}")).collect();
        ClassEmbeddingTable::new(names, Matrix::identity(c)).unwrap()
    }

    fn random_table(rng: &mut Rng, c: usize, d: usize) -> ClassEmbeddingTable {
        let names = (0..c).map(|i| format!("c{i}")).collect();
        ClassEmbeddingTable::new(names, rng.normal_matrix(c, d, 1.0))
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn identity_projector_recovers_class() {
        let t = orthonormal_table(3);
        let p = SscParams {
            projector: Matrix::identity(3),
            alpha: 1.0,
        };
        let v = Matrix::row_vector(t.vectors().row(0));
        let (logits, _) = ssc_logits(&v, &t, &p).unwrap();
        assert_eq!(logits.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn logits_ignore_feature_scale() {
        let mut rng = Rng::new(9);
        let t = random_table(&mut rng, 4, 5);
        let p = SscParams::init(&mut rng, 6, 5, DEFAULT_ALPHA).unwrap();
        let v = rng.normal_matrix(3, 6, 1.0);
        let (a, _) = ssc_logits(&v, &t, &p).unwrap();
        let (b, _) = ssc_logits(&v.scale(5.0), &t, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn matches_step_by_step_scores() {
        let mut rng = Rng::new(10);
        let t = random_table(&mut rng, 5, 4);
        let p = SscParams::init(&mut rng, 3, 4, 7.5).unwrap();
        let v = rng.normal_matrix(2, 3, 1.0);
        let (logits, _) = ssc_logits(&v, &t, &p).unwrap();
        let scores = softmax_rows(&logits);
        for n in 0..2 {
            let z: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|i| v.get(n, i) * p.projector.get(i, j)).sum())
                .collect();
            let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let raw: Vec<f64> = (0..5)
                .map(|c| {
                    let tc = t.vectors().row(c);
                    let tn = tc.iter().map(|x| x * x).sum::<f64>().sqrt();
                    7.5 * z.iter().zip(tc).map(|(a, b)| a * b).sum::<f64>() / (zn * tn)
                })
                .collect();
            let denom: f64 = raw.iter().map(|x| x.exp()).sum();
            for (c, r) in raw.iter().enumerate() {
                assert!((scores.get(n, c) - r.exp() / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_projection_is_an_error() {
        let t = orthonormal_table(2);
        let p = SscParams {
            projector: Matrix::identity(2),
            alpha: 1.0,
        };
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            ssc_logits(&v, &t, &p),
            Err(Error::DegenerateFeature { row: 1, .. })
        ));
    }

    #[test]
    fn alpha_scales_linearly() {
        let mut rng = Rng::new(11);
        let t = random_table(&mut rng, 4, 3);
        let mut p = SscParams::init(&mut rng, 3, 3, 2.5).unwrap();
        let v = rng.normal_matrix(4, 3, 1.0);
        let (a, _) = ssc_logits(&v, &t, &p).unwrap();
        p.alpha = 5.0;
        let (b, _) = ssc_logits(&v, &t, &p).unwrap();
        assert_eq!(a.scale(2.0), b);
        assert!(SscParams::init(&mut rng, 3, 3, 0.0).is_err());
    }

    #[test]
    fn orthonormal_projector_recovers_every_class() {
        // P = rotation; v = t_c·Pᵀ projects back onto t_c
        let mut rng = Rng::new(12);
        let t = random_table(&mut rng, 4, 3);
        let (c, s) = (0.6, 0.8);
        let projector = Matrix::from_rows(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let p = SscParams {
            projector: projector.clone(),
            alpha: 3.0,
        };
        let v = t.vectors().matmul_t(&projector).unwrap();
        let (logits, _) = ssc_logits(&v, &t, &p).unwrap();
        for class in 0..4 {
            assert_eq!(argmax(logits.row(class)), class);
        }
    }

    #[test]
    fn zero_gradient_and_tangent_property() {
        let mut rng = Rng::new(13);
        let t = random_table(&mut rng, 4, 5);
        let p = SscParams::init(&mut rng, 3, 5, DEFAULT_ALPHA).unwrap();
        let v = rng.normal_matrix(3, 3, 1.0);
        let (_, cache) = ssc_logits(&v, &t, &p).unwrap();
        let g = ssc_backward(&Matrix::zeros(3, 4), &cache, &p, &v, &t).unwrap();
        assert!(g
            .projector
            .data()
            .iter()
            .chain(g.features.data())
            .all(|&x| x == 0.0));

        let g = ssc_backward(&rng.normal_matrix(3, 4, 1.0), &cache, &p, &v, &t).unwrap();
        for r in 0..3 {
            let along: f64 = g
                .projected
                .row(r)
                .iter()
                .zip(cache.unit.row(r))
                .map(|(a, b)| a * b)
                .sum();
            assert!(along.abs() < 1e-12, "row {r}: radial component {along}");
        }
    }

    #[test]
    fn ssc_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(200 + seed);
            let t = random_table(&mut rng, 4, 5);
            let p = SscParams::init(&mut rng, 3, 5, 4.0).unwrap();
            let v = rng.normal_matrix(3, 3, 1.0);
            let upstream = rng.normal_matrix(3, 4, 1.0);
            let f = |ps: &[Matrix]| {
                let params = SscParams {
                    projector: ps[0].clone(),
                    alpha: 4.0,
                };
                let (logits, _) = ssc_logits(&ps[1], &t, &params)?;
                Ok(logits
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(a, b)| a * b)
                    .sum())
            };
            let (_, cache) = ssc_logits(&v, &t, &p).unwrap();
            let g = ssc_backward(&upstream, &cache, &p, &v, &t).unwrap();
            let report = grad_check(
                f,
                &[p.projector.clone(), v.clone()],
                &[g.projector, g.features],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max() < 1e-6, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn linear_examples() {
        let p = LinearClassifierParams {
            weights: Matrix::zeros(3, 4),
            bias: Matrix::zeros(1, 4),
        };
        let logits = linear_logits(&Matrix::row_vector(&[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(softmax_rows(&logits).row(0), &[0.25; 4]);

        let p = LinearClassifierParams {
            weights: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        };
        let logits = linear_logits(&Matrix::row_vector(&[1.0, 0.0, 0.0]), &p).unwrap();
        assert_eq!(logits.row(0), &[1.0, 0.0, 0.0]);
        assert!(linear_logits(&Matrix::zeros(1, 2), &p).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(14);
        let p = LinearClassifierParams {
            weights: rng.normal_matrix(4, 3, 1.0),
            bias: rng.normal_matrix(1, 3, 1.0),
        };
        let v = rng.normal_matrix(5, 4, 1.0);
        let upstream = rng.normal_matrix(5, 3, 1.0);
        let f = |ps: &[Matrix]| {
            let params = LinearClassifierParams {
                weights: ps[0].clone(),
                bias: ps[1].clone(),
            };
            let logits = linear_logits(&ps[2], &params)?;
            Ok(logits
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let g = linear_backward(&upstream, &p, &v).unwrap();
        let report = grad_check(
            f,
            &[p.weights.clone(), p.bias.clone(), v.clone()],
            &[g.weights, g.bias, g.features],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max() < 1e-4, "{report:?}");
    }
}
