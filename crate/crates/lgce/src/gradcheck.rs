//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    /// Absolute differences at or below this always pass.
    pub abs_floor: f64,
    /// Tensors with more entries are checked on a seeded random subset.
    pub max_entries: usize,
    /// Test hook: scales every analytic gradient by `1 + fault` before
    /// comparison, so a working checker must report failures.
    pub analytic_fault: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, max_entries: 32, analytic_fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `(abs, rel)` error between an analytic and a numeric derivative.
pub fn derivative_error(analytic: f64, numeric: f64) -> (f64, f64) {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    (abs, if scale == 0.0 { 0.0 } else { abs / scale })
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every named input tensor.
pub fn check_gradients<F>(inputs: &[(String, Tensor)], f: F, cfg: &GradCheckConfig, seed: u64) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for (ti, (name, t)) in inputs.iter().enumerate() {
        let mut analytic = grads.get(vars[ti]);
        if let Some(fault) = cfg.analytic_fault {
            analytic = analytic.map(|v| v * (1.0 + fault));
        }
        let n = t.numel();
        let entries: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut e = sample(&mut rng, n, cfg.max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let mut check = TensorCheck { name: name.clone(), checked: 0, failures: 0, max_abs_err: 0.0, max_rel_err: 0.0 };
        for j in entries {
            let orig = t.data()[j];
            values[ti].data_mut()[j] = orig + cfg.h;
            let plus = eval(&values)?;
            values[ti].data_mut()[j] = orig - cfg.h;
            let minus = eval(&values)?;
            values[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let (abs, rel) = derivative_error(analytic.data()[j], numeric);
            check.checked += 1;
            check.max_abs_err = check.max_abs_err.max(abs);
            if abs > cfg.abs_floor {
                check.max_rel_err = check.max_rel_err.max(rel);
                if rel >= cfg.rel_tol {
                    check.failures += 1;
                }
            }
        }
        out.push(check);
    }
    Ok(out)
}
