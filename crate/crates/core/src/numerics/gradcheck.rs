//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::tape::{Tape, TensorError};
use super::tensor::DiffTensor;

#[derive(Debug)]
pub enum GradCheckError {
    /// The checked function did not return a scalar.
    NonScalarOutput { len: usize },
    Tensor(TensorError),
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckError::NonScalarOutput { len } => {
                write!(f, "grad_check: function must return a scalar, got {len} elements")
            }
            GradCheckError::Tensor(e) => write!(f, "grad_check: {e}"),
        }
    }
}

impl std::error::Error for GradCheckError {}

impl From<TensorError> for GradCheckError {
    fn from(e: TensorError) -> Self {
        GradCheckError::Tensor(e)
    }
}

const REL_ERR_FLOOR: f64 = 1e-8;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the gradient of a scalar-valued function of one tensor.
///
/// Central differences `(f(x+eps) − f(x−eps)) / (2·eps)` are evaluated per
/// coordinate; the relative error uses `max(|analytic|, |numeric|, 1e−8)` as
/// denominator. Returns the max relative error over all coordinates.
pub fn grad_check<Func>(f: Func, point: &DiffTensor<f64>, eps: f64) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &DiffTensor<f64>) -> DiffTensor<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    grad_check_multi(
        |tape, points| f(tape, &points[0]),
        std::slice::from_ref(point),
        eps,
    )
}

/// Multi-input variant of [`grad_check`]; every coordinate of every point
/// is perturbed.
pub fn grad_check_multi<Func>(
    f: Func,
    points: &[DiffTensor<f64>],
    eps: f64,
) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &[DiffTensor<f64>]) -> DiffTensor<f64>,
{
    grad_check_impl(f, points, eps, None)
}

/// Like [`grad_check_multi`] but verifies at most `max_coords` coordinates
/// per tensor (evenly spaced), for functions too large to probe exhaustively.
/// The analytic gradient is still computed in full.
pub fn grad_check_sampled<Func>(
    f: Func,
    points: &[DiffTensor<f64>],
    eps: f64,
    max_coords: usize,
) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &[DiffTensor<f64>]) -> DiffTensor<f64>,
{
    grad_check_impl(f, points, eps, Some(max_coords))
}

/// Per-coordinate best-of-several-steps central-difference check.
///
/// The two failure modes of a fixed step are complementary: a small step is
/// roundoff-limited on coordinates whose true gradient is tiny, while a
/// large step can straddle a subgradient kink (relu, clamp). A coordinate
/// counts as verified if central differences match at any of the given
/// steps; the returned value is the max over coordinates of that best
/// error. A genuine backward bug fails at every step.
pub fn grad_check_multi_eps<Func>(
    f: Func,
    points: &[DiffTensor<f64>],
    epsilons: &[f64],
    max_coords: Option<usize>,
) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &[DiffTensor<f64>]) -> DiffTensor<f64>,
{
    grad_check_generic(f, points, epsilons, max_coords)
}

fn grad_check_impl<Func>(
    f: Func,
    points: &[DiffTensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &[DiffTensor<f64>]) -> DiffTensor<f64>,
{
    grad_check_generic(f, points, &[eps], max_coords)
}

fn grad_check_generic<Func>(
    f: Func,
    points: &[DiffTensor<f64>],
    epsilons: &[f64],
    max_coords: Option<usize>,
) -> Result<f64, GradCheckError>
where
    Func: Fn(&mut Tape<f64>, &[DiffTensor<f64>]) -> DiffTensor<f64>,
{
    assert!(!epsilons.is_empty() && epsilons.iter().all(|&e| e > 0.0));

    // analytic gradients
    let mut tape = Tape::new();
    let leaves: Vec<DiffTensor<f64>> = points
        .iter()
        .map(|p| tape.leaf(p.shape(), p.data().to_vec()))
        .collect();
    let out = f(&mut tape, &leaves);
    if out.len() != 1 {
        return Err(GradCheckError::NonScalarOutput { len: out.len() });
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |pts: &[DiffTensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let leaves: Vec<DiffTensor<f64>> = pts
            .iter()
            .map(|p| t.leaf(p.shape(), p.data().to_vec()))
            .collect();
        f(&mut t, &leaves).item()
    };

    let mut max_err = 0.0f64;
    for (ti, point) in points.iter().enumerate() {
        let n = point.len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => {
                // evenly spaced deterministic subsample
                (0..m).map(|j| j * n / m).collect()
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let mut best = f64::INFINITY;
            for &eps in epsilons {
                let mut plus: Vec<DiffTensor<f64>> = points.to_vec();
                let mut minus: Vec<DiffTensor<f64>> = points.to_vec();
                let mut dp = point.data().to_vec();
                dp[ci] += eps;
                plus[ti] = DiffTensor::from_vec(point.shape(), dp);
                let mut dm = point.data().to_vec();
                dm[ci] -= eps;
                minus[ti] = DiffTensor::from_vec(point.shape(), dm);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let err = relative_error(analytic[ti][ci], numeric);
                if err < best {
                    best = err;
                }
            }
            if best > max_err {
                max_err = best;
            }
        }
    }
    Ok(max_err)
}
