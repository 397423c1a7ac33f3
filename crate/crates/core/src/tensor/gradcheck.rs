//! Central finite-difference gradient checking.
//!
//! The oracle perturbs each parameter coordinate by ±step (as stored in
//! 32-bit), re-evaluates the loss with 64-bit interior arithmetic, and
//! divides by the realized step. The loss builder must be deterministic:
//! run the model in eval mode so no dropout masks are drawn.

use crate::params::{ParamId, ParameterStore};

use super::{NodeId, Tape, TensorError};

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Max over coordinates of |ad - fd| / max(|ad|, |fd|, floor).
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Scale floor in the relative-error denominator. Keeps finite-difference
/// truncation noise from dominating coordinates with near-zero gradients.
const REL_ERR_FLOOR: f64 = 1e-2;

/// Compares reverse-mode gradients of `f` against central finite
/// differences for every coordinate of every registered parameter.
///
/// `f` rebuilds the loss from scratch on the given tape; parameters are
/// restored exactly before returning. Non-finite values are reported as
/// failures rather than errors.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    step: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;

    // One parameter may be bound to several tape leaves; sum their adjoints.
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (pid, grad) in tape.param_grads() {
        let slot = &mut analytic[pid.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; store.tensor(pid).numel()]);
        if let Some(g) = grad {
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }
    }

    let ids: Vec<ParamId> = store.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for pid in ids {
        let numel = store.tensor(pid).numel();
        let ad = analytic[pid.0].clone().unwrap_or_else(|| vec![0.0; numel]);
        let mut max_rel = 0.0f64;
        let mut finite = true;
        for i in 0..numel {
            let orig = store.tensor(pid).data()[i];
            let plus = (orig as f64 + step) as f32;
            let minus = (orig as f64 - step) as f32;

            store.tensor_mut(pid).data_mut()[i] = plus;
            let fp = eval_scalar(&f, store)?;
            store.tensor_mut(pid).data_mut()[i] = minus;
            let fm = eval_scalar(&f, store)?;
            store.tensor_mut(pid).data_mut()[i] = orig;

            let fd = (fp - fm) / (plus as f64 - minus as f64);
            if !fd.is_finite() || !ad[i].is_finite() {
                finite = false;
                max_rel = f64::INFINITY;
                break;
            }
            let rel = (ad[i] - fd).abs() / ad[i].abs().max(fd.abs()).max(REL_ERR_FLOOR);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: store.name(pid).to_string(),
            max_rel_err: max_rel,
            pass: finite && max_rel < tol,
        });
    }
    Ok(GradCheckReport { entries, tol, step })
}

fn eval_scalar<F>(f: &F, store: &ParameterStore) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.value_scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        store.register("w", Tensor::uniform(vec![6], 1.0, &mut rng)).unwrap();
        let report = grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let w = tape.param(store, store.id_of("w").unwrap());
            Ok(tape.frobenius_sq(w))
        })
        .unwrap();
        assert!(report.all_pass());
        assert!(report.entries[0].max_rel_err < 1e-6, "{}", report.entries[0].max_rel_err);
    }

    #[test]
    fn dead_relu_gives_zero_on_both_sides() {
        let mut store = ParameterStore::new();
        store
            .register("w", Tensor::from_vec(vec![2], vec![-2.0, -3.0]).unwrap())
            .unwrap();
        let report = grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let w = tape.param(store, store.id_of("w").unwrap());
            let r = tape.relu(w);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert!(report.all_pass());
        assert_eq!(report.entries[0].max_rel_err, 0.0);
    }

    #[test]
    fn parameters_are_restored_exactly() {
        let mut store = ParameterStore::new();
        store
            .register("w", Tensor::from_vec(vec![3], vec![0.1, -0.7, 0.33]).unwrap())
            .unwrap();
        let before = store.tensor(store.id_of("w").unwrap()).data().to_vec();
        grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let w = tape.param(store, store.id_of("w").unwrap());
            Ok(tape.frobenius_sq(w))
        })
        .unwrap();
        assert_eq!(store.tensor(store.id_of("w").unwrap()).data(), &before[..]);
    }

    #[test]
    fn detects_disconnected_parameter_with_zero_grad() {
        let mut store = ParameterStore::new();
        store.register("used", Tensor::from_vec(vec![2], vec![0.4, 0.2]).unwrap()).unwrap();
        store.register("unused", Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let w = tape.param(store, store.id_of("used").unwrap());
            Ok(tape.frobenius_sq(w))
        })
        .unwrap();
        assert!(report.all_pass());
    }
}
