//! Single-head cross-attention from region features to class-name embeddings.
//!
//! ```text
//! q = v·Wq   k = t·Wk   u = t·Wv
//! A = softmax_rows(q·kᵀ / √d)
//! q̂ = q + A·u
//! fused = v + q̂·Wo
//! ```
//!
//! `Wo` maps the d-dimensional attended query back to feature width and is
//! added residually. It starts at zero, so a freshly initialized block is the
//! identity on `v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_matrix, softmax_rows, InitScheme, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl FusionParams {
    /// Uniform fan-in init for the projections, zero output projection.
    pub fn init(rng: &mut Rng, feat_dim: usize, text_dim: usize, inter_dim: usize) -> Result<Self> {
        if inter_dim == 0 {
            return Err(Error::Config(
                "fusion intermediate dimension must be ≥ 1".into(),
            ));
        }
        Ok(FusionParams {
            w_q: init_matrix(rng, feat_dim, inter_dim, InitScheme::UniformFanIn),
            w_k: init_matrix(rng, text_dim, inter_dim, InitScheme::UniformFanIn),
            w_v: init_matrix(rng, text_dim, inter_dim, InitScheme::UniformFanIn),
            w_o: Matrix::zeros(inter_dim, feat_dim),
        })
    }

    pub fn inter_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn feat_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn text_dim(&self) -> usize {
        self.w_k.rows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.inter_dim();
        if d == 0 {
            return Err(Error::Config(
                "fusion intermediate dimension must be ≥ 1".into(),
            ));
        }
        let expect = |m: &Matrix, rows: usize, cols: usize, name: &'static str| {
            if m.shape() == (rows, cols) {
                Ok(())
            } else {
                Err(Error::shape(name, m.shape_str(), format!("{rows}x{cols}")))
            }
        };
        expect(&self.w_k, self.w_k.rows(), d, "fusion w_k")?;
        expect(&self.w_v, self.text_dim(), d, "fusion w_v")?;
        expect(&self.w_o, d, self.feat_dim(), "fusion w_o")
    }

    pub fn as_list(&self) -> [&Matrix; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    pub q_v: Matrix,
    pub k_t: Matrix,
    pub v_t: Matrix,
    pub attention: Matrix,
    pub attended: Matrix,
    pub fused: Matrix,
}

#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub features: Matrix,
}

pub fn fusion_forward(
    features: &Matrix,
    embeddings: &Matrix,
    params: &FusionParams,
) -> Result<(Matrix, FusionCache)> {
    params.validate()?;
    if features.cols() != params.feat_dim() {
        return Err(Error::shape(
            "fusion_forward features",
            features.shape_str(),
            params.w_q.shape_str(),
        ));
    }
    if embeddings.cols() != params.text_dim() {
        return Err(Error::shape(
            "fusion_forward embeddings",
            embeddings.shape_str(),
            params.w_k.shape_str(),
        ));
    }
    let scale = 1.0 / (params.inter_dim() as f64).sqrt();
    let q_v = features.matmul(&params.w_q)?;
    let k_t = embeddings.matmul(&params.w_k)?;
    let v_t = embeddings.matmul(&params.w_v)?;
    let attention = softmax_rows(&q_v.matmul_t(&k_t)?.scale(scale));
    let attended = q_v.add(&attention.matmul(&v_t)?)?;
    let fused = features.add(&attended.matmul(&params.w_o)?)?;
    let cache = FusionCache {
        q_v,
        k_t,
        v_t,
        attention,
        attended,
        fused: fused.clone(),
    };
    Ok((fused, cache))
}

pub fn fusion_backward(
    grad_fused: &Matrix,
    cache: &FusionCache,
    params: &FusionParams,
    features: &Matrix,
    embeddings: &Matrix,
) -> Result<FusionGrads> {
    if grad_fused.shape() != cache.fused.shape()
        || features.shape() != cache.fused.shape()
        || cache.q_v.cols() != params.inter_dim()
        || cache.k_t.rows() != embeddings.rows()
    {
        return Err(Error::Contract(format!(
            "fusion cache (fused {}, q {}, k {}) does not match gradient {} / features {} / embeddings {}",
            cache.fused.shape_str(),
            cache.q_v.shape_str(),
            cache.k_t.shape_str(),
            grad_fused.shape_str(),
            features.shape_str(),
            embeddings.shape_str(),
        )));
    }
    let scale = 1.0 / (params.inter_dim() as f64).sqrt();

    let w_o = cache.attended.t_matmul(grad_fused)?;
    let grad_attended = grad_fused.matmul_t(&params.w_o)?;

    let grad_attention = grad_attended.matmul_t(&cache.v_t)?;
    let grad_vt = cache.attention.t_matmul(&grad_attended)?;

    // softmax Jacobian per row: dL = A ⊙ (dA − Σ_j dA_j A_j)
    let a = &cache.attention;
    let mut grad_logits = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let (ar, gr) = (a.row(r), grad_attention.row(r));
        let inner: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum();
        for (out, (&ai, &gi)) in grad_logits.row_mut(r).iter_mut().zip(ar.iter().zip(gr)) {
            *out = ai * (gi - inner) * scale;
        }
    }

    let mut grad_q = grad_attended;
    grad_q.add_assign(&grad_logits.matmul(&cache.k_t)?)?;
    let grad_k = grad_logits.t_matmul(&cache.q_v)?;

    let w_q = features.t_matmul(&grad_q)?;
    let w_k = embeddings.t_matmul(&grad_k)?;
    let w_v = embeddings.t_matmul(&grad_vt)?;
    let mut grad_features = grad_fused.clone();
    grad_features.add_assign(&grad_q.matmul_t(&params.w_q)?)?;

    Ok(FusionGrads {
        w_q,
        w_k,
        w_v,
        w_o,
        features: grad_features,
    })
}
