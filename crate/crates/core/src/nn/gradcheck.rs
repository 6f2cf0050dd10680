//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{NnError, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub struct CoordSampling {
    /// Upper bound on probed coordinates per parameter tensor.
    pub per_param: usize,
    pub seed: u64,
}

impl Default for CoordSampling {
    fn default() -> Self {
        Self {
            per_param: 8,
            seed: 0,
        }
    }
}

/// Compares the gradient accumulated by `f` against five-point central
/// differences and returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must evaluate the scalar objective deterministically and add its
/// gradient into the store's buffers.
pub fn finite_diff_check<F>(
    params: &mut ParamStore<f64>,
    mut f: F,
    epsilon: f64,
    sampling: CoordSampling,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64, NnError>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(NnError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    params.zero_grad();
    let base = f(params)?;
    if !base.is_finite() {
        return Err(NnError::NonFinite("objective at the base point".into()));
    }
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| {
            p.grad
                .as_ref()
                .map_or_else(|| vec![0.0; p.value.len()], |g| g.data().to_vec())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = params.value(id).len();
        let coords: Vec<usize> = if n <= sampling.per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, sampling.per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = params.value(id).data()[idx];
            let mut eval_at = |x: f64, params: &mut ParamStore<f64>| -> Result<f64, NnError> {
                params.get_mut(id).value.data_mut()[idx] = x;
                let v = f(params)?;
                if !v.is_finite() {
                    return Err(NnError::NonFinite(format!(
                        "objective near {}[{idx}]",
                        params.get(id).name
                    )));
                }
                Ok(v)
            };
            let fp2 = eval_at(orig + 2.0 * epsilon, params)?;
            let fp1 = eval_at(orig + epsilon, params)?;
            let fm1 = eval_at(orig - epsilon, params)?;
            let fm2 = eval_at(orig - 2.0 * epsilon, params)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * epsilon);
            let a = analytic[id.0][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    // leave the analytic gradient in place for callers
    params.zero_grad();
    for (id, g) in analytic.iter().enumerate() {
        params.accumulate_grad(ParamId(id), g);
    }
    Ok(report)
}
