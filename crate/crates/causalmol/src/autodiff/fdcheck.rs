//! Central-difference gradient verification.

use indexmap::IndexMap;

use super::params::ParameterStore;
use super::tape::{Tape, TensorId};
use super::tensor::TensorError;

/// Denominator floor for the relative error. Central differences of a loss
/// near 1.0 carry roundoff noise around |f| * eps_mach / eps ~ 1.5e-10 at
/// eps = 1e-6; a gradient smaller than noise/tolerance cannot be certified
/// relatively, so such entries are compared against this floor instead.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub per_param: IndexMap<String, FdParamReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.values().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for (name, r) in &self.per_param {
            lines.push(format!(
                "{name}: max_rel_err={:.3e} at [{}] (analytic={:.6e}, numeric={:.6e})",
                r.max_rel_err, r.worst_index, r.analytic, r.numeric
            ));
        }
        lines.join("\n")
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` element by element.
///
/// `build` must construct the loss on a fresh tape and be deterministic for a
/// fixed store: it is evaluated twice at the base point and rejected if the
/// two values differ.
pub fn finite_difference_check<F>(
    build: F,
    params: &ParameterStore,
    eps: f64,
) -> Result<FdReport, TensorError>
where
    F: Fn(&ParameterStore) -> Result<(Tape, TensorId), TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::Invalid(format!("eps {eps} outside (0, 1e-3]")));
    }
    let eval = |store: &ParameterStore| -> Result<f64, TensorError> {
        let (tape, loss) = build(store)?;
        let t = tape.value(loss);
        if !t.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "loss must be scalar, got {:?}",
                t.shape()
            )));
        }
        Ok(t.item())
    };

    let base = eval(params)?;
    if eval(params)? != base {
        return Err(TensorError::Invalid(
            "loss function is not deterministic under a fixed store".into(),
        ));
    }

    let (tape, loss) = build(params)?;
    let grads = tape.backward(loss, params)?;

    let mut report = FdReport::default();
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name).expect("backward covers all params");
        let mut worst = FdParamReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.perturb(name, i, eps);
            let mut minus = params.clone();
            minus.perturb(name, i, -eps);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic.values()[i];
            let err = rel_err(a, numeric);
            if err >= worst.max_rel_err {
                worst = FdParamReport { max_rel_err: err, worst_index: i, analytic: a, numeric };
            }
        }
        report.per_param.insert(name.to_string(), worst);
    }
    Ok(report)
}
