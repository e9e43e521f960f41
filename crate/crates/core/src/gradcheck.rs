//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is (numerically) zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub struct GradCheck {
    pub eps: f64,
    /// Upper bound on checked entries per input; larger inputs are sampled.
    pub max_entries_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_entries_per_input: usize::MAX,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

impl GradCheck {
    /// Compare `d f / d inputs` from the tape against central differences.
    /// `f` must build a one-element loss from the given input variables.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            checked: 0,
            max_relative_error: 0.0,
            worst: None,
        };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, &v) in vars.iter().enumerate() {
            let numel = inputs[i].numel();
            let analytic = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let entries: Vec<usize> = if numel <= self.max_entries_per_input {
                (0..numel).collect()
            } else {
                let mut e = sample(&mut rng, numel, self.max_entries_per_input).into_vec();
                e.sort_unstable();
                e
            };
            for j in entries {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.eps;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.data()[j];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
