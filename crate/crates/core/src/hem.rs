//! Hierarchical embedding module: a pre-norm transformer encoder over the
//! query embeddings, tapped at the input and after every second layer.

use hero_tensor::{ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform, LayerNorm, Linear};
use crate::{HeroError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HemConfig {
    /// Number of emitted levels N (input plus N−1 taps).
    pub taps: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    /// Longest query the positional table covers.
    pub max_len: usize,
}

impl Default for HemConfig {
    fn default() -> Self {
        Self {
            taps: 4,
            hidden: 128,
            heads: 4,
            ff: 512,
            max_len: 16,
        }
    }
}

impl HemConfig {
    /// Encoder layers: one tap every two layers.
    pub fn depth(&self) -> usize {
        2 * (self.taps - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps < 2 {
            return Err(HeroError::config("taps", "need at least 2 levels"));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(HeroError::config("heads", "hidden size must be divisible by heads"));
        }
        if self.ff == 0 || self.max_len == 0 {
            return Err(HeroError::config("ff", "widths must be positive"));
        }
        Ok(())
    }
}

/// Levels `Q_0..Q_{N−1}`, each `[B, L, d]`, plus the shared key mask
/// (`keep[b * L + j]` is false at PAD positions).
#[derive(Clone, Debug)]
pub struct HierarchicalTextSet {
    pub levels: Vec<Var>,
    pub keep: Vec<bool>,
    /// Attention probabilities `[B, L, L]` per layer and head.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Hem {
    cfg: HemConfig,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
}

impl Hem {
    pub fn new(store: &mut ParamStore, cfg: HemConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let pos = store.add("hem.pos", uniform(rng, &[cfg.max_len, d], 0.02));
        let layers = (0..cfg.depth())
            .map(|i| {
                let p = format!("hem.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), d, cfg.ff, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), cfg.ff, d, rng),
                }
            })
            .collect();
        Ok(Self { cfg, pos, layers })
    }

    pub fn config(&self) -> &HemConfig {
        &self.cfg
    }

    /// `q0` is `[B, L, d]`. Returns `N` levels with `Q_0` being `q0` itself.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, q0: Var, keep: &[bool]) -> Result<HierarchicalTextSet> {
        let shape = tape.shape(q0).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.hidden || keep.len() != shape[0] * shape[1] {
            return Err(hero_tensor::TensorError::shape("hem.encode", &shape, &[keep.len(), self.cfg.hidden]).into());
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if l > self.cfg.max_len {
            return Err(HeroError::Contract(format!(
                "query length {l} exceeds positional table of {}",
                self.cfg.max_len
            )));
        }
        // positions are added to the encoder stream only; level 0 stays the raw input
        let pos = tape.param(store, self.pos);
        let pos = tape.narrow0(pos, 0, l)?;
        let pos = tape.reshape(pos, &[l * d])?;
        let flat = tape.reshape(q0, &[b, l * d])?;
        let x = tape.add_bias(flat, pos)?;
        let mut x = tape.reshape(x, &[b, l, d])?;

        let mut levels = vec![q0];
        let mut attention = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.block(tape, store, layer, x, keep, &mut attention)?;
            if (i + 1) % 2 == 0 {
                levels.push(x);
            }
        }
        debug_assert_eq!(levels.len(), self.cfg.taps);
        Ok(HierarchicalTextSet {
            levels,
            keep: keep.to_vec(),
            attention,
        })
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &EncoderLayer,
        x: Var,
        keep: &[bool],
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let d = self.cfg.hidden;
        let dh = d / self.cfg.heads;
        let h = layer.ln_attn.forward(tape, store, x)?;
        let q = layer.q.forward(tape, store, h)?;
        let k = layer.k.forward(tape, store, h)?;
        let v = layer.v.forward(tape, store, h)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let qh = tape.slice_last(q, hd * dh, dh)?;
            let kh = tape.slice_last(k, hd * dh, dh)?;
            let vh = tape.slice_last(v, hd * dh, dh)?;
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.masked_softmax(scores, keep)?;
            attention.push(attn);
            heads.push(tape.bmm(attn, vh, false)?);
        }
        let cat = tape.concat_last(&heads)?;
        let o = layer.o.forward(tape, store, cat)?;
        let x = tape.add(x, o)?;
        let h = layer.ln_ff.forward(tape, store, x)?;
        let f = layer.ff_in.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = layer.ff_out.forward(tape, store, f)?;
        Ok(tape.add(x, f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hero_tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn small(taps: usize) -> (ParamStore, Hem) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HemConfig {
            taps,
            hidden: 8,
            heads: 2,
            ff: 16,
            max_len: 6,
        };
        let hem = Hem::new(&mut store, cfg, &mut rng).unwrap();
        (store, hem)
    }

    fn input(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize, keep: &[bool]) -> Tensor {
        let mut t = Tensor::zeros(&[b, l, d]);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for c in 0..d {
                    t.data_mut()[r * d + c] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        t
    }

    #[test]
    fn emits_one_level_per_tap() {
        for taps in [2, 4, 8] {
            let (store, hem) = small(taps);
            assert_eq!(hem.layers.len(), 2 * (taps - 1));
            let mut tape = Tape::new();
            let keep = vec![true, true, false, true, true, true];
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let q0 = tape.constant(input(&mut rng, 2, 3, 8, &keep));
            let out = hem.encode(&mut tape, &store, q0, &keep).unwrap();
            assert_eq!(out.levels.len(), taps);
            assert_eq!(out.levels[0], q0);
            for &lv in &out.levels {
                assert_eq!(tape.shape(lv), &[2, 3, 8]);
            }
        }
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(HemConfig {
            taps: 1,
            ..HemConfig::default()
        }
        .validate()
        .is_err());
        let (store, hem) = small(2);
        let mut tape = Tape::new();
        let q0 = tape.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(hem.encode(&mut tape, &store, q0, &[true; 3]).is_err());
    }
}
