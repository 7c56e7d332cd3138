use super::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Per-parameter maximum relative error from [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of `f` with respect to every entry of every
/// parameter matrix.
pub fn numeric_gradient<F>(mut f: F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].data().len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = eval(&mut f, &work, p, i)?;
            work[p].data_mut()[i] = orig - h;
            let minus = eval(&mut f, &work, p, i)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

fn eval<F>(f: &mut F, params: &[Matrix], p: usize, i: usize) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    let v = f(params)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!(
            "objective at parameter {p}, coordinate {i}"
        )))
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F>(
    f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, a) in params.iter().zip(analytic) {
        p.ensure_same_shape(a, "grad_check")?;
    }
    let numeric = numeric_gradient(f, params, h)?;
    let per_param = numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| {
            n.data()
                .iter()
                .zip(a.data())
                .map(|(&n, &a)| relative_error(a, n))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(GradCheckReport { per_param })
}
