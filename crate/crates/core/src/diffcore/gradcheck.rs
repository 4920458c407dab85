//! Central finite-difference verification of tape gradients.

use super::store::ParameterStore;
use super::tape::{Mode, Precision, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Elements checked per parameter tensor; larger tensors are
    /// subsampled at an even stride.
    pub max_elements_per_param: usize,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that vanish within finite-difference round-off do not count as
    /// failures.
    pub denominator_floor: f64,
    /// Tape mode of every evaluation. Training mode normalises with batch
    /// statistics; dropout must then be disabled by the caller.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_param: 32,
            denominator_floor: 1e-6,
            mode: Mode::Eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= tolerance)
    }

    pub fn failures(&self, tolerance: f64) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| !(p.max_rel_error <= tolerance))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max).collect()
}

fn forward<F>(loss: &mut F, store: &ParameterStore, mode: Mode) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new(mode, Precision::F64, 0);
    let l = loss(&mut tape, store)?;
    Ok(tape.value(l).data()[0])
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences for every parameter in `store`.
///
/// `loss` receives a fresh 64-bit tape in `opts.mode` on every call. In
/// evaluation mode batch norm uses running statistics and dropout is the
/// identity. The store is restored before returning.
pub fn gradient_check<F>(store: &mut ParameterStore, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new(opts.mode, Precision::F64, 0);
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for name in store.parameter_names() {
        let len = store.value(&name)?.len();
        let g = tape
            .param_vars()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| grads.get(v))
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
        analytic.push((name, g));
    }
    drop(tape);

    let mut report = GradCheckReport::default();
    for (name, g) in analytic {
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_element: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in sample_indices(g.len(), opts.max_elements_per_param) {
            let original = store.value(&name)?.data()[i];
            store.value_mut(&name)?.data_mut()[i] = original + opts.step;
            let plus = forward(&mut loss, store, opts.mode);
            store.value_mut(&name)?.data_mut()[i] = original - opts.step;
            let minus = forward(&mut loss, store, opts.mode);
            store.value_mut(&name)?.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let err = relative_error(g[i], numeric, opts.denominator_floor);
            check.checked += 1;
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst_element = i;
                check.worst_analytic = g[i];
                check.worst_numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{CustomOp, Tensor};

    fn linear_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.init_uniform_bounded("w", vec![3, 2], 1.0, 1).unwrap();
        s.init_uniform_bounded("b", vec![2], 1.0, 2).unwrap();
        s
    }

    fn linear_loss(tape: &mut Tape, s: &ParameterStore) -> Result<Var> {
        let x = tape.input(Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]])?);
        let w = tape.param(s, "w")?;
        let b = tape.param(s, "b")?;
        let y = tape.linear(x, w, Some(b))?;
        tape.softmax_cross_entropy(y, &[1, 0])
    }

    #[test]
    fn linear_model_passes_tightly() {
        let mut s = linear_store();
        let before = s.clone();
        let report = gradient_check(&mut s, linear_loss, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.params.len(), 2);
        assert!(report.max_rel_error() <= 1e-7, "{report:?}");
        assert_eq!(s, before);
    }

    struct Doubled;
    impl CustomOp for Doubled {
        fn name(&self) -> &str {
            "doubled-backward"
        }
        fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
            vec![g.iter().map(|v| 2.0 * v).collect()]
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut s = linear_store();
        let report = gradient_check(
            &mut s,
            |tape: &mut Tape, s: &ParameterStore| {
                let x = tape.input(Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]])?);
                let w = tape.param(s, "w")?;
                let b = tape.param(s, "b")?;
                let y = tape.linear(x, w, Some(b))?;
                let copy = tape.value(y).clone();
                let y = tape.custom(&[y], copy, Box::new(Doubled));
                tape.softmax_cross_entropy(y, &[1, 0])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() > 1e-2);
        assert!(!report.passed(1e-4));
    }

    #[test]
    fn subsampling_is_even_and_bounded() {
        assert_eq!(sample_indices(3, 5), vec![0, 1, 2]);
        assert_eq!(sample_indices(10, 5), vec![0, 2, 4, 6, 8]);
    }
}
