//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it shares no code
//! with the reverse sweep it checks.

use super::{ParamStore, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// (numerically) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `layer0.w_q[3]`.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.worst = label();
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` built from leaf inputs.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.gradients(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("input{k}[{i}]"), analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar loss with respect to every trainable
/// parameter in `store`. `loss` must build the loss on the given tape by
/// reading parameters from the given store. Accumulated gradients in `store`
/// are reset before and after the check.
pub fn check_params<F, E>(store: &mut ParamStore, h: f64, loss: F) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    store.zero_grads();
    let tape = Tape::new();
    let out = loss(&tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<(usize, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(id, p)| (id.0, p.grad().data().to_vec()))
        .collect();
    store.zero_grads();

    let mut report = GradCheckReport::default();
    for (raw, grad) in analytic {
        let id = super::ParamId(raw);
        for i in 0..grad.len() {
            let orig = store.get(id).value().data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + h;
            let plus = {
                let tape = Tape::new();
                let out = loss(&tape, store)?;
                tape.scalar(out)
            };
            store.get_mut(id).value_mut().data_mut()[i] = orig - h;
            let minus = {
                let tape = Tape::new();
                let out = loss(&tape, store)?;
                tape.scalar(out)
            };
            store.get_mut(id).value_mut().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let name = store.get(id).name().to_string();
            report.record(|| format!("{name}[{i}]"), grad[i], numeric);
        }
    }
    Ok(report)
}
