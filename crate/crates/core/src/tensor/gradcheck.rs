//! Central finite-difference gradient checking.

use super::Tensor;

/// Magnitude below which an entry is compared on an absolute scale.
///
/// Central differences at step 1e-5 carry roughly 1e-10 of cancellation noise
/// on O(10) losses; a floor of 1e-5 keeps that noise ten times below a 1e-4
/// relative tolerance.
pub const NOISE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Numerical gradient of `f` with respect to every entry of every tensor,
/// using `(f(x+ε) − f(x−ε)) / 2ε`. Tensors are restored afterwards.
pub fn central_differences(
    params: &mut [Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for (i, slot) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let plus = f(params);
            params[p].data_mut()[i] = orig - eps;
            let minus = f(params);
            params[p].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Compares analytic and numeric gradients entry-wise with
/// `|a − n| / max(|a|, |n|, NOISE_FLOOR)`.
///
/// An empty analytic vector stands for "no gradient reached this tensor" and is
/// treated as all zeros.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, &nv) in n.iter().enumerate() {
            let av = a.get(i).copied().unwrap_or(0.0);
            let denom = av.abs().max(nv.abs()).max(NOISE_FLOOR);
            let rel = (av - nv).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p, i));
            }
            report.checked += 1;
        }
    }
    report
}
