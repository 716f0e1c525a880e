use super::{Graph, ParamSet, Result, Tensor, Var};

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric partials at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coordinates: usize,
    /// Probes that crossed a kink and were repeated with a smaller step.
    pub kink_retries: usize,
}

/// Step reductions tried when a probe crosses a non-differentiable point.
pub const MAX_KINK_RETRIES: usize = 3;
/// Factor the step shrinks by on each retry.
pub const KINK_SHRINK: f64 = 10.0;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of `f` against `(f(p + eps) - f(p - eps)) / 2eps`
/// for every coordinate of every parameter.
///
/// A probe that moves any ReLU input or loss floor across its kink is
/// repeated with the step shrunk by [`KINK_SHRINK`], up to [`MAX_KINK_RETRIES`] times.
pub fn grad_check<F>(ps: &ParamSet, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    grad_check_with(ps, f, eps, |_, _| {})
}

/// As [`grad_check`], with a hook that may alter each analytic gradient
/// before comparison.
pub fn grad_check_with<F, C>(ps: &ParamSet, f: F, eps: f64, corrupt: C) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
    C: Fn(&str, &mut Tensor),
{
    grad_check_limited(ps, f, eps, None, corrupt)
}

/// As [`grad_check_with`], probing at most `per_param` evenly spaced
/// coordinates of each parameter when a limit is given.
pub fn grad_check_limited<F, C>(
    ps: &ParamSet,
    f: F,
    eps: f64,
    per_param: Option<usize>,
    corrupt: C,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
    C: Fn(&str, &mut Tensor),
{
    let mut g = Graph::new();
    let loss = f(&mut g, ps)?;
    let grads = g.backward(loss)?;
    let mut work = ps.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        coordinates: 0,
        kink_retries: 0,
    };
    let base_kinks = g.kink_signature();
    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok((g.scalar(l), g.kink_signature()))
    };
    let names: Vec<String> = ps.names().cloned().collect();
    for name in names {
        let shape = ps.value(&name)?.raw_dim();
        let mut analytic = g
            .bindings()
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| grads.get(*v).cloned())
            .unwrap_or_else(|| Tensor::zeros(shape));
        corrupt(&name, &mut analytic);
        let n = analytic.len();
        let indices: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let flat = analytic.as_standard_layout().to_owned();
        let flat = flat.as_slice().expect("standard layout");
        for i in indices {
            let a = flat[i];
            let orig = work.value(&name)?.as_slice().expect("standard layout")[i];
            let mut step = eps;
            let mut numeric = 0.0;
            for _ in 0..=MAX_KINK_RETRIES {
                work.value_mut(&name)?
                    .as_slice_mut()
                    .expect("standard layout")[i] = orig + step;
                let (up, k_up) = eval(&work)?;
                work.value_mut(&name)?
                    .as_slice_mut()
                    .expect("standard layout")[i] = orig - step;
                let (down, k_down) = eval(&work)?;
                work.value_mut(&name)?
                    .as_slice_mut()
                    .expect("standard layout")[i] = orig;
                numeric = (up - down) / (2.0 * step);
                if k_up == base_kinks && k_down == base_kinks {
                    break;
                }
                report.kink_retries += 1;
                step /= KINK_SHRINK;
            }
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
