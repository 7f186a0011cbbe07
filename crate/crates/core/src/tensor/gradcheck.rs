//! Central-difference gradient verification.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Tape, Tensor, TensorError, Var};
use crate::rng::Rng;

/// A scalar function of named parameters with an analytic gradient.
pub trait GradCheckTarget {
    fn value(&self, params: &BTreeMap<String, Tensor<f64>>) -> Result<f64, TensorError>;
    fn gradient(
        &self,
        params: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<BTreeMap<String, Tensor<f64>>, TensorError>;
}

/// Adapts a tape-building closure into a [`GradCheckTarget`].
pub struct TapeTarget<F>(pub F);

impl<F, E> GradCheckTarget for TapeTarget<F>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Tensor<f64>>) -> Result<Var, E>,
    E: Into<TensorError>,
{
    fn value(&self, params: &BTreeMap<String, Tensor<f64>>) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let root = (self.0)(&mut tape, params).map_err(Into::into)?;
        Ok(tape.value(root).item())
    }

    fn gradient(
        &self,
        params: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<BTreeMap<String, Tensor<f64>>, TensorError> {
        let mut tape = Tape::new();
        let root = (self.0)(&mut tape, params).map_err(Into::into)?;
        let mut grads = tape.backward(root)?.params(&tape);
        for (k, t) in params {
            grads
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        }
        Ok(grads)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub key: String,
    pub checked: usize,
    /// Coordinates that only agreed at a smaller step.
    pub refined: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Vacuously true when there are no parameters.
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

// below this magnitude both gradients count as zero
const ABS_FLOOR: f64 = 1e-6;

// A kink (relu, |x|, bilinear cell edge) within `eps` of the probe point
// spoils the central difference; failing coordinates are retried at these
// fractions of `eps`, which a genuinely wrong gradient cannot pass.
const REFINE: [f64; 2] = [1e-1, 1e-2];

fn rel_err(a: f64, numeric: f64) -> f64 {
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares analytic gradients with central differences, probing at most
/// `max_coords` entries per parameter tensor (all of them when smaller).
pub fn grad_check(
    target: &impl GradCheckTarget,
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Contract(format!(
            "eps {eps} outside (0, 1e-2]"
        )));
    }
    let base = target.value(params)?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite(format!("forward value {base}")));
    }
    let analytic = target.gradient(params)?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        eps,
        tol,
        params: Vec::new(),
    };
    for (key, tensor) in params {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(max_coords);
            all
        };
        let grad = analytic
            .get(key)
            .ok_or_else(|| TensorError::Contract(format!("no analytic gradient for {key}")))?;
        let mut max_rel = 0.0f64;
        let mut refined = 0;
        for &i in &coords {
            let a = grad.data()[i];
            let mut err = f64::INFINITY;
            for (attempt, h) in std::iter::once(eps).chain(REFINE.iter().map(|r| r * eps)).enumerate() {
                let numeric = central(target, &mut work, key, i, tensor.data()[i], h)?;
                err = rel_err(a, numeric);
                if err <= tol {
                    refined += usize::from(attempt > 0);
                    break;
                }
            }
            max_rel = max_rel.max(err);
        }
        report.params.push(ParamCheck {
            key: key.clone(),
            checked: coords.len(),
            refined,
            max_rel_err: max_rel,
            pass: max_rel <= tol,
        });
    }
    Ok(report)
}

fn central(
    target: &impl GradCheckTarget,
    work: &mut BTreeMap<String, Tensor<f64>>,
    key: &str,
    i: usize,
    orig: f64,
    h: f64,
) -> Result<f64, TensorError> {
    work.get_mut(key).expect("cloned key").data_mut()[i] = orig + h;
    let plus = target.value(work)?;
    work.get_mut(key).expect("cloned key").data_mut()[i] = orig - h;
    let minus = target.value(work)?;
    work.get_mut(key).expect("cloned key").data_mut()[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(TensorError::NonFinite(format!("{key}[{i}] perturbed forward")));
    }
    Ok((plus - minus) / (2.0 * h))
}
