//! Central finite-difference gradient checking.
//!
//! Only forward values are used for the numerical side, so the check stays
//! independent of every backward rule it verifies.

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central differences of step `h`.
/// `floor` keeps near-zero gradients from dominating the relative error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_input = i;
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
