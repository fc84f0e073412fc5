//! The full grounding model: embedding, hierarchy, per-level filtering and
//! heads, and the weighted aggregation across levels.

use hero_tensor::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfre::{cfre_branch, FilteredVisual, Sgvf, VideoProjection};
use crate::embedding::{random_mask, EmbeddingLayer, EmbeddingTable, Query, Vocabulary, MASK};
use crate::head::{aggregate, AggregationWeights, BranchOutput, HeadConfig, LevelHead, Span};
use crate::hem::{Hem, HemConfig, HierarchicalTextSet};
use crate::synth::Sample;
use crate::{HeroError, Result};

/// How the masked text levels are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Replace tokens by MASK and re-run the hierarchy.
    #[default]
    Input,
    /// Zero the masked positions of every clean level.
    FeatureZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub taps: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub head_mlp: usize,
    pub fuser_kernel: usize,
    pub agg_hidden: usize,
    pub sgvf_projections: bool,
    pub freeze_embeddings: bool,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub disable_hem: bool,
    pub disable_sgvf: bool,
    pub disable_cmtr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            taps: 4,
            heads: 4,
            ff: 512,
            max_len: 16,
            head_mlp: 64,
            fuser_kernel: 3,
            agg_hidden: 32,
            sgvf_projections: false,
            freeze_embeddings: true,
            mask_ratio: 0.15,
            mask_mode: MaskMode::Input,
            disable_hem: false,
            disable_sgvf: false,
            disable_cmtr: false,
        }
    }
}

impl ModelConfig {
    pub fn hem(&self) -> HemConfig {
        HemConfig {
            taps: self.taps,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
            max_len: self.max_len,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            hidden: self.hidden,
            mlp: self.head_mlp,
            kernel: self.fuser_kernel,
            agg_hidden: self.agg_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hem().validate()?;
        if self.head_mlp == 0 || self.agg_hidden == 0 {
            return Err(HeroError::config("head_mlp", "head widths must be positive"));
        }
        if self.fuser_kernel % 2 == 0 {
            return Err(HeroError::config("fuser_kernel", "must be odd"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(HeroError::config("mask_ratio", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Indices of the hierarchy levels that feed a branch.
    pub fn active_levels(&self) -> Vec<usize> {
        if self.disable_hem {
            vec![self.taps - 1]
        } else {
            (0..self.taps).collect()
        }
    }
}

/// A padded mini-batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
    /// `[B, T, d_v]`.
    pub video: Tensor,
    pub spans: Vec<Span>,
    pub queries: Vec<Query>,
    pub len: usize,
}

impl Batch {
    pub fn new(samples: &[&Sample], vocab: &Vocabulary) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| HeroError::Contract("empty batch".into()))?;
        let (t, d_v) = (first.frames(), first.video.shape()[1]);
        let len = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(1);
        let mut video = Vec::with_capacity(samples.len() * t * d_v);
        let mut queries = Vec::with_capacity(samples.len());
        for s in samples {
            if s.video.shape() != [t, d_v] {
                return Err(HeroError::Contract(format!(
                    "sample {} has video {:?}, batch expects [{t}, {d_v}]",
                    s.id,
                    s.video.shape()
                )));
            }
            video.extend_from_slice(s.video.data());
            queries.push(Query::encode(vocab, &s.tokens, len)?);
        }
        let ids: Vec<usize> = queries.iter().flat_map(|q| q.ids.iter().copied()).collect();
        let keep = queries.iter().flat_map(|q| q.padding_mask()).map(|pad| !pad).collect();
        Ok(Self {
            ids,
            keep,
            video: Tensor::new(vec![samples.len(), t, d_v], video)?,
            spans: samples.iter().map(|s| s.span).collect(),
            queries,
            len,
        })
    }

    pub fn size(&self) -> usize {
        self.queries.len()
    }

    pub fn frames(&self) -> usize {
        self.video.shape()[1]
    }

    /// Masked ids, one draw per sample from `seeds`.
    pub fn masked_ids(&self, ratio: f64, seeds: &[u64]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(self.ids.len());
        for (q, &seed) in self.queries.iter().zip(seeds) {
            ids.extend(random_mask(q, ratio, seed)?.ids);
        }
        Ok(ids)
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub aggregated: BranchOutput,
    pub branches: Vec<BranchOutput>,
    pub filtered: Vec<FilteredVisual>,
    pub text: HierarchicalTextSet,
    pub weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct HeroModel {
    cfg: ModelConfig,
    d_v: usize,
    embed: EmbeddingLayer,
    hem: Hem,
    video: VideoProjection,
    sgvf: Option<Sgvf>,
    heads: Vec<LevelHead>,
    agg: Option<AggregationWeights>,
}

impl HeroModel {
    /// Registers every used parameter in `store`, initialised from `seed`.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, table: &EmbeddingTable, d_v: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if table.dim() != cfg.hidden {
            return Err(HeroError::config(
                "hidden",
                format!("embedding dim {} differs from hidden size {}", table.dim(), cfg.hidden),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbeddingLayer::new(store, table, cfg.freeze_embeddings)?;
        let hem = Hem::new(store, cfg.hem(), &mut rng)?;
        let video = VideoProjection::new(store, d_v, cfg.hidden, &mut rng);
        let sgvf = match (cfg.disable_sgvf, cfg.sgvf_projections) {
            (true, _) => None,
            (false, false) => Some(Sgvf::new(cfg.hidden)),
            (false, true) => Some(Sgvf::with_projections(store, cfg.hidden, &mut rng)),
        };
        let head_cfg = cfg.head();
        let levels = cfg.active_levels();
        let heads = (0..levels.len())
            .map(|j| LevelHead::new(store, j, &head_cfg, &mut rng))
            .collect();
        let agg = (levels.len() > 1).then(|| AggregationWeights::new(store, levels.len(), &head_cfg, &mut rng));
        Ok(Self {
            cfg,
            d_v,
            embed,
            hem,
            video,
            sgvf,
            heads,
            agg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn uses_masking(&self) -> bool {
        !self.cfg.disable_cmtr
    }

    fn embed_levels(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], batch: &Batch) -> Result<HierarchicalTextSet> {
        let q = self.embed.forward(tape, store, ids)?;
        let q0 = tape.reshape(q, &[batch.size(), batch.len, self.cfg.hidden])?;
        self.hem.encode(tape, store, q0, &batch.keep)
    }

    /// Runs the model on `batch`. `masked_ids` (same layout as `batch.ids`)
    /// enables the masked branch; pass `None` for inference.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, masked_ids: Option<&[usize]>) -> Result<ModelOutput> {
        if batch.video.shape()[2] != self.d_v {
            return Err(hero_tensor::TensorError::shape("model.forward", batch.video.shape(), &[self.d_v]).into());
        }
        let masked_ids = if self.cfg.disable_cmtr { None } else { masked_ids };
        let text = self.embed_levels(tape, store, &batch.ids, batch)?;
        let levels = self.cfg.active_levels();
        let masked_levels: Option<Vec<Var>> = match (masked_ids, self.cfg.mask_mode) {
            (None, _) => None,
            (Some(ids), MaskMode::Input) => {
                let m = self.embed_levels(tape, store, ids, batch)?;
                Some(levels.iter().map(|&i| m.levels[i]).collect())
            }
            (Some(ids), MaskMode::FeatureZero) => {
                let d = self.cfg.hidden;
                let mut factor = Tensor::zeros(&[batch.size(), batch.len, d]);
                for (r, &id) in ids.iter().enumerate() {
                    if id != MASK {
                        factor.data_mut()[r * d..(r + 1) * d].fill(1.0);
                    }
                }
                let mut out = Vec::with_capacity(levels.len());
                for &i in &levels {
                    out.push(tape.mul_const(text.levels[i], &factor)?);
                }
                Some(out)
            }
        };

        let v = tape.constant(batch.video.clone());
        let vp = self.video.forward(tape, store, v)?;
        let mut branches = Vec::with_capacity(levels.len());
        let mut filtered = Vec::new();
        for (j, &i) in levels.iter().enumerate() {
            let q = text.levels[i];
            let qm = masked_levels.as_ref().map(|m| m[j]);
            let (v_hat, v_hat_m) = match &self.sgvf {
                Some(sgvf) => {
                    let (clean, masked) = cfre_branch(sgvf, tape, store, vp, q, qm, &batch.keep)?;
                    filtered.push(clean);
                    (clean.v_hat, masked.map(|m| m.v_hat))
                }
                None => (vp, qm.map(|_| vp)),
            };
            let masked = v_hat_m.zip(qm);
            branches.push(self.heads[j].forward(tape, store, v_hat, q, masked, &batch.keep)?);
        }
        let (aggregated, weights) = match &self.agg {
            Some(agg) => {
                let w = agg.weights(tape, store)?;
                (aggregate(tape, &branches, w)?, Some(w))
            }
            None => (branches[0], None),
        };
        Ok(ModelOutput {
            aggregated,
            branches,
            filtered,
            text,
            weights,
        })
    }

    /// Inference-mode spans for a batch.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<Span>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, batch, None)?;
        let p_s = tape.tensor(out.aggregated.p_s);
        let p_e = tape.tensor(out.aggregated.p_e);
        Ok(crate::head::decode_batch(&p_s, &p_e))
    }
}
