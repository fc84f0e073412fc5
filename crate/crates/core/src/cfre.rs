//! Cross-modal filtering: video projection, the semantic-guided visual
//! filter, and the clean/masked branch pairing.

use hero_tensor::{ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::nn::Linear;
use crate::{HeroError, Result};

/// Frame features for one clip, `[T, d_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    features: Tensor,
}

impl VideoFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 {
            return Err(HeroError::Contract(format!("video features must be 2-d, got {s:?}")));
        }
        if s[0] < 2 {
            return Err(HeroError::Contract(format!("video needs at least 2 frames, got {}", s[0])));
        }
        if let Some(i) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(HeroError::Contract(format!("non-finite video feature at flat index {i}")));
        }
        Ok(Self { features })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }
}

/// Linear map `d_v -> d` followed by GELU, shared by every level.
#[derive(Clone, Debug)]
pub struct VideoProjection {
    linear: Linear,
}

impl VideoProjection {
    pub fn new(store: &mut ParamStore, d_v: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, "video.proj", d_v, d, rng),
        }
    }

    /// `v` is `[B, T, d_v]`; returns `[B, T, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        let h = self.linear.forward(tape, store, v)?;
        Ok(tape.gelu(h))
    }
}

/// Output of one filter application.
#[derive(Clone, Copy, Debug)]
pub struct FilteredVisual {
    /// Gated visual features `[B, T, d]`.
    pub v_hat: Var,
    /// Sigmoid gate `[B, T, d]`.
    pub gate: Var,
    /// Frame-to-token attention `[B, T, L]`.
    pub attention: Var,
}

/// Optional learned query/key/value maps for the filter attention.
#[derive(Clone, Debug)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Semantic-guided visual filter. Without projections it has no
/// parameters: scores are `V Qᵀ / √d` over the unpadded tokens.
#[derive(Clone, Debug)]
pub struct Sgvf {
    dim: usize,
    proj: Option<Projections>,
}

impl Sgvf {
    pub fn new(dim: usize) -> Self {
        Self { dim, proj: None }
    }

    pub fn with_projections(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Projections {
            q: Linear::new(store, "sgvf.q", dim, dim, rng),
            k: Linear::new(store, "sgvf.k", dim, dim, rng),
            v: Linear::new(store, "sgvf.v", dim, dim, rng),
        };
        Self { dim, proj: Some(proj) }
    }

    pub fn has_projections(&self) -> bool {
        self.proj.is_some()
    }

    /// `v_proj` is `[B, T, d]`, `q` is `[B, L, d]`, `keep[b * L + j]` marks
    /// real tokens.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v_proj: Var, q: Var, keep: &[bool]) -> Result<FilteredVisual> {
        let sv = tape.shape(v_proj).to_vec();
        let sq = tape.shape(q).to_vec();
        if sv.len() != 3 || sq.len() != 3 || sv[0] != sq[0] || sv[2] != self.dim || sq[2] != self.dim {
            return Err(hero_tensor::TensorError::shape("sgvf", &sv, &sq).into());
        }
        let (b, l) = (sq[0], sq[1]);
        if keep.len() != b * l {
            return Err(hero_tensor::TensorError::shape("sgvf", &sq, &[keep.len()]).into());
        }
        if let Some(item) = (0..b).find(|&i| !keep[i * l..(i + 1) * l].iter().any(|&k| k)) {
            return Err(HeroError::Contract(format!("sgvf: query {item} has no non-PAD tokens")));
        }
        let (query, key, value) = match &self.proj {
            Some(p) => (
                p.q.forward(tape, store, v_proj)?,
                p.k.forward(tape, store, q)?,
                p.v.forward(tape, store, q)?,
            ),
            None => (v_proj, q, q),
        };
        let scores = tape.bmm(query, key, true)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attention = tape.masked_softmax(scores, keep)?;
        let attended = tape.bmm(attention, value, false)?;
        let gate = tape.sigmoid(attended);
        let v_hat = tape.mul(v_proj, gate)?;
        Ok(FilteredVisual { v_hat, gate, attention })
    }
}

/// Applies the filter to the clean level and, when present, the masked
/// level with the same parameters.
pub fn cfre_branch(
    sgvf: &Sgvf,
    tape: &mut Tape,
    store: &ParamStore,
    v_proj: Var,
    q: Var,
    q_masked: Option<Var>,
    keep: &[bool],
) -> Result<(FilteredVisual, Option<FilteredVisual>)> {
    let clean = sgvf.forward(tape, store, v_proj, q, keep)?;
    let masked = match q_masked {
        Some(qm) => {
            if tape.shape(qm) != tape.shape(q) {
                return Err(hero_tensor::TensorError::shape("cfre_branch", tape.shape(q), tape.shape(qm)).into());
            }
            Some(sgvf.forward(tape, store, v_proj, qm, keep)?)
        }
        None => None,
    };
    Ok((clean, masked))
}
