use crate::{Result, Tape, Tensor, TensorError, Var};

/// Floor applied inside every logarithm of the loss functions.
pub const LOG_CLAMP: f64 = 1e-8;

fn check_distributions(tape: &Tape, v: Var, which: &str) -> Result<()> {
    let n = *tape.shape(v).last().unwrap();
    for (r, row) in tape.value(v).chunks_exact(n).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&x| x < 0.0 || !x.is_finite()) || (s - 1.0).abs() > 1e-6 {
            return Err(TensorError::Contract(format!(
                "kl_divergence: {which} slice {r} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `Σ p · (ln p − ln q)` over the last axis, averaged over leading slices
/// (a single distribution gives plain KL). Entries are floored at `eps`
/// inside the logs.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var, eps: f64) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(TensorError::Shape {
            op: "kl_divergence",
            lhs: tape.shape(p).to_vec(),
            rhs: tape.shape(q).to_vec(),
        });
    }
    check_distributions(tape, p, "p")?;
    check_distributions(tape, q, "q")?;
    let slices = tape.value(p).len() / tape.shape(p).last().unwrap();
    let pc = tape.clamp_min(p, eps);
    let lp = tape.ln(pc);
    let qc = tape.clamp_min(q, eps);
    let lq = tape.ln(qc);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / slices as f64))
}

/// Mean binary cross-entropy against a constant 0/1 (or soft) target.
pub fn bce(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    tape.bce(pred, target, eps)
}
