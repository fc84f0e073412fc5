//! Per-level grounding heads (fuser, span and relevance predictors), the
//! learnable aggregation across levels, and span decoding.

use hero_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform, LayerNorm, Linear, Mlp};
use crate::{HeroError, Result};

/// Inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub s: usize,
    pub e: usize,
}

impl Span {
    pub fn new(s: usize, e: usize) -> Self {
        Self { s, e }
    }

    pub fn len(&self) -> usize {
        self.e + 1 - self.s
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.s > self.e || self.e >= frames {
            return Err(HeroError::Contract(format!(
                "span ({}, {}) invalid for {frames} frames",
                self.s, self.e
            )));
        }
        Ok(())
    }
}

/// Head outputs for a batch: each field is `[B, T]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub p_s: Var,
    pub p_e: Var,
    pub rs: Var,
    pub rs_m: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Width of the span and relevance MLPs.
    pub mlp: usize,
    /// Odd kernel size of the fuser's temporal convolution.
    pub kernel: usize,
    /// Hidden width of the aggregation MLP.
    pub agg_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            mlp: 64,
            kernel: 3,
            agg_hidden: 32,
        }
    }
}

/// Stand-in feature fuser: cross-attention from frames to text, a
/// depthwise temporal convolution and a feed-forward block, all residual.
#[derive(Clone, Debug)]
pub struct Fuser {
    dim: usize,
    ln_attn: LayerNorm,
    key: Linear,
    value: Linear,
    ln_conv: LayerNorm,
    conv: ParamId,
    ff_in: Linear,
    ff_out: Linear,
    ln_out: LayerNorm,
}

impl Fuser {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let conv = store.add(format!("{name}.conv"), uniform(rng, &[cfg.kernel, d], 0.5));
        Self {
            dim: d,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d),
            conv,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, d, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), d, d, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    /// `v_hat` is `[B, T, d]`, `q` is `[B, L, d]`; returns `[B, T, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v_hat: Var, q: Var, keep: &[bool]) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, v_hat)?;
        let k = self.key.forward(tape, store, q)?;
        let v = self.value.forward(tape, store, q)?;
        let scores = tape.bmm(h, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.masked_softmax(scores, keep)?;
        let ctx = tape.bmm(attn, v, false)?;
        let x = tape.add(v_hat, ctx)?;

        let h = self.ln_conv.forward(tape, store, x)?;
        let w = tape.param(store, self.conv);
        let c = tape.temporal_conv(h, w)?;
        let x = tape.add(x, c)?;

        let f = self.ff_in.forward(tape, store, x)?;
        let f = tape.gelu(f);
        let f = self.ff_out.forward(tape, store, f)?;
        let x = tape.add(x, f)?;
        self.ln_out.forward(tape, store, x)
    }
}

/// Softmax over frames of per-frame start and end logits.
#[derive(Clone, Debug)]
pub struct SpanPredictor {
    mlp: Mlp,
}

impl SpanPredictor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, cfg.hidden, cfg.mlp, 2, rng),
        }
    }

    /// `f` is `[B, T, d]`; returns `(P_s, P_e)`, each `[B, T]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(f).to_vec();
        let (b, t) = (shape[0], shape[1]);
        if t < 2 {
            return Err(HeroError::Contract(format!("span prediction needs T >= 2, got {t}")));
        }
        let logits = self.mlp.forward(tape, store, f)?;
        let mut out = [None, None];
        for (k, slot) in out.iter_mut().enumerate() {
            let l = tape.slice_last(logits, k, 1)?;
            let l = tape.reshape(l, &[b, t])?;
            *slot = Some(tape.softmax(l, 1)?);
        }
        Ok((out[0].unwrap(), out[1].unwrap()))
    }
}

/// Per-frame relevance in (0, 1).
#[derive(Clone, Debug)]
pub struct RelevancePredictor {
    mlp: Mlp,
}

impl RelevancePredictor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, cfg.hidden, cfg.mlp, 1, rng),
        }
    }

    /// `f` is `[B, T, d]`; returns `[B, T]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        let logits = self.mlp.forward(tape, store, f)?;
        let logits = tape.reshape(logits, &shape[..2])?;
        Ok(tape.sigmoid(logits))
    }
}

/// Fuser plus both predictors for one level.
#[derive(Clone, Debug)]
pub struct LevelHead {
    pub fuser: Fuser,
    pub span: SpanPredictor,
    pub relevance: RelevancePredictor,
}

impl LevelHead {
    pub fn new(store: &mut ParamStore, level: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = format!("head{level}");
        Self {
            fuser: Fuser::new(store, &format!("{p}.fuser"), cfg, rng),
            span: SpanPredictor::new(store, &format!("{p}.span"), cfg, rng),
            relevance: RelevancePredictor::new(store, &format!("{p}.relevance"), cfg, rng),
        }
    }

    /// Full output for the clean branch, with relevance from the masked
    /// branch when `masked` is supplied as `(v_hat_m, q_m)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v_hat: Var,
        q: Var,
        masked: Option<(Var, Var)>,
        keep: &[bool],
    ) -> Result<BranchOutput> {
        let f = self.fuser.forward(tape, store, v_hat, q, keep)?;
        let (p_s, p_e) = self.span.forward(tape, store, f)?;
        let rs = self.relevance.forward(tape, store, f)?;
        let rs_m = match masked {
            Some((vm, qm)) => {
                let fm = self.fuser.forward(tape, store, vm, qm, keep)?;
                Some(self.relevance.forward(tape, store, fm)?)
            }
            None => None,
        };
        Ok(BranchOutput { p_s, p_e, rs, rs_m })
    }
}

/// Trainable seeds `T_i` scored by a shared MLP; softmax gives the level
/// weights.
#[derive(Clone, Debug)]
pub struct AggregationWeights {
    seeds: ParamId,
    mlp: Mlp,
    levels: usize,
}

impl AggregationWeights {
    pub fn new(store: &mut ParamStore, levels: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let seeds = store.add("agg.seeds", uniform(rng, &[levels, cfg.hidden], 1.0));
        Self {
            seeds,
            mlp: Mlp::new(store, "agg.mlp", cfg.hidden, cfg.agg_hidden, 1, rng),
            levels,
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Normalised weights `[N]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let seeds = tape.param(store, self.seeds);
        let raw = self.mlp.forward(tape, store, seeds)?;
        let raw = tape.reshape(raw, &[self.levels])?;
        Ok(tape.softmax(raw, 0)?)
    }
}

/// Convex combination of branch outputs with weights `w` (`[N]`).
pub fn aggregate(tape: &mut Tape, branches: &[BranchOutput], w: Var) -> Result<BranchOutput> {
    let n = branches.len();
    if n == 0 || tape.shape(w) != [n] {
        return Err(hero_tensor::TensorError::shape("aggregate", &[n], tape.shape(w)).into());
    }
    let shape = tape.shape(branches[0].p_s).to_vec();
    for br in branches {
        let mut vars = vec![br.p_s, br.p_e, br.rs];
        vars.extend(br.rs_m);
        for v in vars {
            if tape.shape(v) != shape.as_slice() {
                return Err(hero_tensor::TensorError::shape("aggregate", &shape, tape.shape(v)).into());
            }
        }
    }
    if branches.iter().any(|b| b.rs_m.is_some() != branches[0].rs_m.is_some()) {
        return Err(HeroError::Contract("aggregate: branches disagree on masked scores".into()));
    }
    if n == 1 {
        return Ok(branches[0]);
    }
    let weights: Vec<Var> = (0..n).map(|i| tape.gather(w, &[i])).collect::<hero_tensor::Result<_>>()?;
    let combine = |tape: &mut Tape, pick: &dyn Fn(&BranchOutput) -> Var| -> Result<Var> {
        let mut acc = tape.scale_by(pick(&branches[0]), weights[0])?;
        for i in 1..n {
            let term = tape.scale_by(pick(&branches[i]), weights[i])?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    };
    let p_s = combine(tape, &|b| b.p_s)?;
    let p_e = combine(tape, &|b| b.p_e)?;
    let rs = combine(tape, &|b| b.rs)?;
    let rs_m = match branches[0].rs_m {
        Some(_) => Some(combine(tape, &|b| b.rs_m.unwrap())?),
        None => None,
    };
    Ok(BranchOutput { p_s, p_e, rs, rs_m })
}

/// Best pair `s <= e` by `P_s(s) · P_e(e)`, ties to smaller `s` then `e`.
pub fn decode_span(p_s: &[f64], p_e: &[f64]) -> Span {
    assert_eq!(p_s.len(), p_e.len(), "decode_span: length mismatch");
    assert!(!p_s.is_empty(), "decode_span: empty distributions");
    let mut best_prefix = 0;
    let mut best = Span::new(0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for e in 0..p_e.len() {
        if p_s[e] > p_s[best_prefix] {
            best_prefix = e;
        }
        // a zero end probability makes every start equal, so the smallest wins
        let s = if p_e[e] == 0.0 { 0 } else { best_prefix };
        let score = p_s[s] * p_e[e];
        if score > best_score {
            best_score = score;
            best = Span::new(s, e);
        } else if score == best_score && s < best.s {
            best = Span::new(s, e);
        }
    }
    best
}

/// Decodes every batch item of `[B, T]` distributions.
pub fn decode_batch(p_s: &Tensor, p_e: &Tensor) -> Vec<Span> {
    let t = p_s.last_dim();
    p_s.data()
        .chunks(t)
        .zip(p_e.data().chunks(t))
        .map(|(s, e)| decode_span(s, e))
        .collect()
}
