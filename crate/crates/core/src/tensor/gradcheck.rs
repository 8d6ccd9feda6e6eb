//! Central-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many elements per input, chosen at random.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Op name whose backward is deliberately perturbed (see
    /// [`Tape::inject_fault`]).
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_elements: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "{:<32} checked {:>6}  max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                r.name, r.checked, r.max_rel_error, r.worst_index, r.analytic, r.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn evaluate<F>(
    f: &F,
    inputs: &[(String, Tensor<f64>)],
    fault: Option<&str>,
) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must return a scalar, got {:?}", value.shape()),
        ));
    }
    if let Some(index) = value.first_non_finite() {
        return Err(Error::NonFinite {
            context: "grad_check output".into(),
            index,
        });
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences for every named input.
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for (name, t) in inputs {
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check input {name}"),
                index,
            });
        }
    }
    let (tape, vars, out) = evaluate(&f, inputs, opts.fault.as_deref())?;
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (slot, ((name, t), var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        if let Some(index) = analytic.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                index,
            });
        }
        let indices: Vec<usize> = match opts.max_elements {
            Some(k) if k < t.numel() => {
                let mut v = sample(&mut rng, t.numel(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..t.numel()).collect(),
        };
        let mut report = InputReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: indices.len(),
        };
        for &i in &indices {
            let x0 = t.data()[i];
            probe[slot].1.data_mut()[i] = x0 + opts.step;
            let plus = scalar_value(&f, &probe)?;
            probe[slot].1.data_mut()[i] = x0 - opts.step;
            let minus = scalar_value(&f, &probe)?;
            probe[slot].1.data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports })
}

fn scalar_value<F>(f: &F, inputs: &[(String, Tensor<f64>)]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs, None)?;
    Ok(tape.value(out).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor<f64>) -> Vec<(String, Tensor<f64>)> {
        vec![("x".to_string(), t)]
    }

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.0, 2.5, 0.0, 7.0]).unwrap();
        let r = grad_check(
            &named(x),
            |t, v| Ok(t.sum(v[0])),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r}");
    }

    #[test]
    fn square_sum_matches_two_x() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.0, 2.5, 1.75]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let r = grad_check(&named(x), f, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error() < 1e-9, "{r}");
    }

    #[test]
    fn non_finite_input_names_index() {
        let x = Tensor::from_f64(&[3], &[0.0, f64::NAN, 1.0]).unwrap();
        let err = grad_check(
            &named(x),
            |t, v| Ok(t.sum(v[0])),
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_f64(&[3], &[0.5, 1.5, -0.7]).unwrap();
        let opts = GradCheckOptions {
            fault: Some("mul".into()),
            ..Default::default()
        };
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let r = grad_check(&named(x), f, &opts).unwrap();
        assert!(r.max_rel_error() > 1e-3);
    }
}
