//! Training objective: boundary cross-entropy, relevance BCE and the
//! masked-text consistency term.

use hero_tensor::{kl_divergence, Tape, Tensor, Var, LOG_CLAMP};
use serde::{Deserialize, Serialize};

use crate::head::{BranchOutput, Span};
use crate::{HeroError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClDivergence {
    /// KL between the score vectors after normalising each over time.
    #[default]
    Temporal,
    /// Per-frame Bernoulli KL summed over frames.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub divergence: ClDivergence,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            divergence: ClDivergence::Temporal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tsgv: f64,
    pub l_rs: f64,
    pub l_cl: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn check_spans(gts: &[Span], batch: usize, frames: usize) -> Result<()> {
    if gts.len() != batch {
        return Err(HeroError::Contract(format!("{} spans for a batch of {batch}", gts.len())));
    }
    gts.iter().try_for_each(|g| g.validate(frames))
}

fn dims(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [b, t] => Ok((*b, *t)),
        s => Err(HeroError::Contract(format!("expected [B, T] scores, got {s:?}"))),
    }
}

/// Frame relevance targets: 1 inside each span, 0 outside.
pub fn relevance_targets(gts: &[Span], frames: usize) -> Tensor {
    let mut t = Tensor::zeros(&[gts.len(), frames]);
    for (b, g) in gts.iter().enumerate() {
        t.data_mut()[b * frames + g.s..=b * frames + g.e].fill(1.0);
    }
    t
}

/// `−ln P_s(s) − ln P_e(e)`, averaged over the batch.
pub fn loss_tsgv(tape: &mut Tape, p_s: Var, p_e: Var, gts: &[Span]) -> Result<Var> {
    let (b, t) = dims(tape, p_s)?;
    check_spans(gts, b, t)?;
    let si: Vec<usize> = gts.iter().enumerate().map(|(i, g)| i * t + g.s).collect();
    let ei: Vec<usize> = gts.iter().enumerate().map(|(i, g)| i * t + g.e).collect();
    let ps = tape.gather(p_s, &si)?;
    let pe = tape.gather(p_e, &ei)?;
    let mut terms = Vec::with_capacity(2);
    for p in [ps, pe] {
        let c = tape.clamp_min(p, LOG_CLAMP);
        let l = tape.ln(c);
        terms.push(tape.sum(l));
    }
    let both = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(both, -1.0 / b as f64))
}

/// Mean-over-frames BCE of the clean scores, averaged with that of the
/// masked scores when present.
pub fn loss_rs(tape: &mut Tape, rs: Var, rs_m: Option<Var>, gts: &[Span]) -> Result<Var> {
    let (b, t) = dims(tape, rs)?;
    check_spans(gts, b, t)?;
    let target = relevance_targets(gts, t);
    let clean = tape.bce(rs, &target, LOG_CLAMP)?;
    match rs_m {
        Some(m) => {
            let masked = tape.bce(m, &target, LOG_CLAMP)?;
            let sum = tape.add(clean, masked)?;
            Ok(tape.scale(sum, 0.5))
        }
        None => Ok(clean),
    }
}

fn normalise(tape: &mut Tape, x: Var, which: &str) -> Result<Var> {
    let (_, t) = dims(tape, x)?;
    if let Some(r) = tape.value(x).chunks(t).position(|row| row.iter().all(|&v| v == 0.0)) {
        return Err(HeroError::Contract(format!("loss_cl: {which} row {r} is all zero")));
    }
    let s = tape.sum_last(x);
    let s = tape.clamp_min(s, LOG_CLAMP);
    Ok(tape.div_last(x, s)?)
}

/// `KL(RS ‖ RS_m)` under the configured reading, averaged over the batch.
pub fn loss_cl(tape: &mut Tape, rs: Var, rs_m: Var, divergence: ClDivergence) -> Result<Var> {
    let (b, _) = dims(tape, rs)?;
    if tape.shape(rs) != tape.shape(rs_m) {
        return Err(hero_tensor::TensorError::shape("loss_cl", tape.shape(rs), tape.shape(rs_m)).into());
    }
    match divergence {
        ClDivergence::Temporal => {
            let p = normalise(tape, rs, "RS")?;
            let q = normalise(tape, rs_m, "RS_m")?;
            Ok(kl_divergence(tape, p, q, LOG_CLAMP)?)
        }
        ClDivergence::Bernoulli => {
            let term = |tape: &mut Tape, p: Var, q: Var| -> Result<Var> {
                let pc = tape.clamp_min(p, LOG_CLAMP);
                let qc = tape.clamp_min(q, LOG_CLAMP);
                let lp = tape.ln(pc);
                let lq = tape.ln(qc);
                let d = tape.sub(lp, lq)?;
                Ok(tape.mul(p, d)?)
            };
            let pos = term(tape, rs, rs_m)?;
            let one_p = tape.scale(rs, -1.0);
            let one_p = tape.add_scalar(one_p, 1.0);
            let one_q = tape.scale(rs_m, -1.0);
            let one_q = tape.add_scalar(one_q, 1.0);
            let neg = term(tape, one_p, one_q)?;
            let all = tape.add(pos, neg)?;
            let s = tape.sum(all);
            Ok(tape.scale(s, 1.0 / b as f64))
        }
    }
}

/// Weighted total over the aggregated output. Without masked scores the
/// consistency term is absent and reported as zero.
pub fn total_loss(tape: &mut Tape, out: &BranchOutput, gts: &[Span], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let l_tsgv = loss_tsgv(tape, out.p_s, out.p_e, gts)?;
    let l_rs = loss_rs(tape, out.rs, out.rs_m, gts)?;
    let rs_term = tape.scale(l_rs, cfg.lambda1);
    let mut total = tape.add(l_tsgv, rs_term)?;
    let mut l_cl_value = 0.0;
    if let Some(m) = out.rs_m {
        let l_cl = loss_cl(tape, out.rs, m, cfg.divergence)?;
        l_cl_value = tape.scalar(l_cl);
        let cl_term = tape.scale(l_cl, cfg.lambda2);
        total = tape.add(total, cl_term)?;
    }
    let breakdown = LossBreakdown {
        l_tsgv: tape.scalar(l_tsgv),
        l_rs: tape.scalar(l_rs),
        l_cl: l_cl_value,
        total: tape.scalar(total),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.constant(Tensor::new(vec![1, n], v).unwrap())
    }

    #[test]
    fn out_of_range_span_is_a_contract_error() {
        let mut tape = Tape::new();
        let p = row(&mut tape, vec![0.25; 4]);
        let err = loss_tsgv(&mut tape, p, p, &[Span::new(1, 4)]);
        assert!(matches!(err, Err(HeroError::Contract(_))));
        assert!(loss_rs(&mut tape, p, None, &[Span::new(3, 2)]).is_err());
    }

    #[test]
    fn all_zero_scores_are_rejected() {
        let mut tape = Tape::new();
        let z = row(&mut tape, vec![0.0; 4]);
        let p = row(&mut tape, vec![0.5; 4]);
        assert!(matches!(loss_cl(&mut tape, z, p, ClDivergence::Temporal), Err(HeroError::Contract(_))));
    }

    #[test]
    fn targets_cover_inclusive_span() {
        let t = relevance_targets(&[Span::new(1, 2), Span::new(0, 0)], 4);
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
