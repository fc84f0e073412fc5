//! Vocabulary, frozen token embeddings, padding, and random token masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use hero_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{HeroError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

/// Token ↔ id map. Ids 0..3 are reserved (PAD, MASK, UNK); ordinary tokens
/// start at 3 in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    /// Adds `token` if new and returns its id.
    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() + RESERVED.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED.len() {
            return Some(RESERVED[id]);
        }
        self.tokens.get(id - RESERVED.len()).map(String::as_str)
    }

    /// Ordinary tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Total row count including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        let v = Self::from_tokens(f.tokens.iter().cloned());
        if v.len() != f.tokens.len() {
            return Err(HeroError::Contract("vocab.json contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| HeroError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| HeroError::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `|vocab| × d` embedding matrix. Row PAD is always zero; row MASK is the
/// starting value of the learned mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingManifest {
    rows: usize,
    dim: usize,
    dtype: String,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.shape()[0] < RESERVED.len() {
            return Err(HeroError::Contract(format!(
                "embedding table must be a matrix with at least {} rows, got {:?}",
                RESERVED.len(),
                matrix.shape()
            )));
        }
        if matrix.row(PAD).iter().any(|&x| x != 0.0) {
            return Err(HeroError::Contract("PAD embedding row must be zero".into()));
        }
        Ok(Self { matrix })
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    /// Writes `embeddings.bin` (little-endian f32, row-major) and its
    /// `{rows, dim}` manifest. Values must already be f32-representable for
    /// the roundtrip to be exact.
    pub fn write(&self, bin: &Path, manifest: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.matrix.numel() * 4);
        for &x in self.matrix.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        fs::write(bin, bytes).map_err(|e| HeroError::io(bin, e))?;
        let m = EmbeddingManifest {
            rows: self.rows(),
            dim: self.dim(),
            dtype: "f32".into(),
        };
        fs::write(manifest, serde_json::to_string_pretty(&m)?).map_err(|e| HeroError::io(manifest, e))
    }

    pub fn read(bin: &Path, manifest: &Path) -> Result<Self> {
        let m: EmbeddingManifest = serde_json::from_str(
            &fs::read_to_string(manifest).map_err(|e| HeroError::io(manifest, e))?,
        )?;
        let bytes = fs::read(bin).map_err(|e| HeroError::io(bin, e))?;
        if m.dtype != "f32" || bytes.len() != m.rows * m.dim * 4 {
            return Err(HeroError::Contract(format!(
                "{}: expected {}x{} f32 values, found {} bytes",
                bin.display(),
                m.rows,
                m.dim,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        Self::new(Tensor::new(vec![m.rows, m.dim], data)?)
    }
}

/// A padded token-id sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

impl Query {
    /// Looks up `tokens` and right-pads with PAD to `len`.
    pub fn encode(vocab: &Vocabulary, tokens: &[String], len: usize) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > len {
            return Err(HeroError::Contract(format!(
                "query of {} tokens does not fit length {len}",
                tokens.len()
            )));
        }
        let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        ids.resize(len, PAD);
        Ok(Self {
            ids,
            tokens: tokens.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` exactly at PAD positions.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i == PAD).collect()
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }
}

/// Number of positions [`random_mask`] replaces for `non_pad` real tokens.
pub fn mask_count(non_pad: usize, ratio: f64) -> usize {
    ((ratio * non_pad as f64).ceil() as usize).clamp(1, non_pad)
}

/// Replaces `max(1, ⌈ratio · n⌉)` of the `n` non-PAD positions with MASK,
/// chosen uniformly without replacement from a generator seeded by `seed`.
pub fn random_mask(query: &Query, ratio: f64, seed: u64) -> Result<Query> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HeroError::Contract(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let positions: Vec<usize> = (0..query.ids.len()).filter(|&i| query.ids[i] != PAD).collect();
    if positions.is_empty() {
        return Err(HeroError::Contract("cannot mask a query with no tokens".into()));
    }
    let k = mask_count(positions.len(), ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = query.clone();
    for i in sample(&mut rng, positions.len(), k) {
        masked.ids[positions[i]] = MASK;
    }
    Ok(masked)
}

/// Looks up rows of the frozen table; PAD rows come out as zeros.
pub fn embed(query: &Query, table: &EmbeddingTable) -> Result<Tensor> {
    let d = table.dim();
    let mut data = Vec::with_capacity(query.len() * d);
    for &id in &query.ids {
        if id >= table.rows() {
            return Err(HeroError::Contract(format!(
                "token id {id} out of range for {} embedding rows",
                table.rows()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::new(vec![query.len(), d], data)?)
}

/// The model-side embedding: the frozen table on the tape as a constant
/// with the MASK row replaced by a trainable parameter (or the whole table
/// trainable when not frozen).
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    frozen_rest: Option<Tensor>,
    pub mask_row: ParamId,
    pub table: Option<ParamId>,
    dim: usize,
}

impl EmbeddingLayer {
    pub fn new(store: &mut ParamStore, table: &EmbeddingTable, frozen: bool) -> Result<Self> {
        let d = table.dim();
        let mask_row = store.add("embed.mask", Tensor::new(vec![1, d], table.row(MASK).to_vec())?);
        if frozen {
            let rest = table.matrix().data()[(MASK + 1) * d..].to_vec();
            Ok(Self {
                frozen_rest: Some(Tensor::new(vec![table.rows() - MASK - 1, d], rest)?),
                mask_row,
                table: None,
                dim: d,
            })
        } else {
            let mut rest = table.matrix().clone();
            rest.data_mut()[..(MASK + 1) * d].fill(0.0);
            let id = store.add("embed.table", rest);
            Ok(Self {
                frozen_rest: None,
                mask_row,
                table: Some(id),
                dim: d,
            })
        }
    }

    /// Assembles a layer from parameters already present in `store`
    /// (checkpoint load), taking the frozen rows from `table`.
    pub fn attach(store: &ParamStore, table: &EmbeddingTable) -> Result<Self> {
        let d = table.dim();
        let mask_row = store
            .id("embed.mask")
            .ok_or_else(|| HeroError::Contract("checkpoint lacks embed.mask".into()))?;
        match store.id("embed.table") {
            Some(id) => Ok(Self {
                frozen_rest: None,
                mask_row,
                table: Some(id),
                dim: d,
            }),
            None => {
                let rest = table.matrix().data()[(MASK + 1) * d..].to_vec();
                Ok(Self {
                    frozen_rest: Some(Tensor::new(vec![table.rows() - MASK - 1, d], rest)?),
                    mask_row,
                    table: None,
                    dim: d,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embeds a flat list of ids into `[ids.len(), d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let pad = tape.constant(Tensor::zeros(&[1, self.dim]));
        let mask = tape.param(store, self.mask_row);
        let full = match (&self.frozen_rest, self.table) {
            (Some(rest), _) => {
                let rest = tape.constant(rest.clone());
                tape.concat0(&[pad, mask, rest])?
            }
            (None, Some(id)) => {
                let t = tape.param(store, id);
                let rows = tape.shape(t)[0];
                let rest = tape.narrow0(t, MASK + 1, rows - MASK - 1)?;
                tape.concat0(&[pad, mask, rest])?
            }
            (None, None) => unreachable!("embedding layer has a table"),
        };
        Ok(tape.gather_rows(full, ids)?)
    }
}
