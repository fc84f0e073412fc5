//! Planted-signal concept worlds and grounding datasets with a controlled
//! vocabulary shift between training and the open-vocabulary test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use hero_tensor::Tensor;
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, Vocabulary, MASK, UNK};
use crate::head::Span;
use crate::{HeroError, Result};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestIid,
    TestOv,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestIid, Split::TestOv];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIid => "test_iid",
            Split::TestOv => "test_ov",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::TestIid => 3,
            Split::TestOv => 4,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = HeroError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = Split::ALL.iter().map(|s| s.as_str()).collect();
            HeroError::config("split", format!("unknown split `{s}`; valid splits: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub concepts: usize,
    pub d_v: usize,
    pub embed_dim: usize,
    pub seen_per_concept: usize,
    pub unseen_per_concept: usize,
    pub sigma_syn: f64,
    pub frames: usize,
    pub sigma_v: f64,
    pub train: usize,
    pub val: usize,
    pub test_iid: usize,
    pub test_ov: usize,
    /// Relative frequency of test_ov queries with 1, 2 and 3 unseen tokens.
    pub ov_buckets: [u32; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concepts: 20,
            d_v: 32,
            embed_dim: 128,
            seen_per_concept: 2,
            unseen_per_concept: 2,
            sigma_syn: 0.1,
            frames: 32,
            sigma_v: 0.05,
            train: 2000,
            val: 200,
            test_iid: 400,
            test_ov: 400,
            ov_buckets: [982, 1338, 1044],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 3 {
            return Err(HeroError::config("concepts", "need at least 3 concepts"));
        }
        if self.d_v == 0 {
            return Err(HeroError::config("d_v", "must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(HeroError::config("embed_dim", "must be positive"));
        }
        if self.seen_per_concept == 0 {
            return Err(HeroError::config("seen_per_concept", "must be at least 1"));
        }
        if self.unseen_per_concept == 0 {
            return Err(HeroError::config("unseen_per_concept", "must be at least 1"));
        }
        if !(self.sigma_syn >= 0.0 && self.sigma_syn.is_finite()) {
            return Err(HeroError::config("sigma_syn", "must be a finite value >= 0"));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return Err(HeroError::config("sigma_v", "must be a finite value >= 0"));
        }
        if self.frames < 2 {
            return Err(HeroError::config("frames", "need at least 2 frames"));
        }
        if self.ov_buckets.iter().all(|&w| w == 0) {
            return Err(HeroError::config("ov_buckets", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::TestIid => self.test_iid,
            Split::TestOv => self.test_ov,
        }
    }

    /// Inclusive span length bounds `[T/8, T/2]`, at least one frame.
    pub fn span_bounds(&self) -> (usize, usize) {
        let lo = self.frames.div_ceil(8).max(1);
        let hi = (self.frames / 2).max(lo);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    /// Unit-norm visual signature in `R^{d_v}`.
    pub signature: Vec<f64>,
    /// Unit-norm centre of the concept's token embeddings.
    pub base: Vec<f64>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptWorld {
    pub concepts: Vec<Concept>,
    pub d_v: usize,
    pub sigma_syn: f64,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    token_concept: HashMap<String, usize>,
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| round32(x / norm)).collect();
        }
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(C[rng.gen_range(0..C.len())] as char);
        w.push(V[rng.gen_range(0..V.len())] as char);
    }
    w
}

/// Builds a world of `cfg.concepts` concepts. Token embeddings sit within
/// `sigma_syn` of their concept base.
pub fn build_world(cfg: &SynthConfig) -> Result<ConceptWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embed_dim;
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let mut concepts = Vec::with_capacity(cfg.concepts);
    for _ in 0..cfg.concepts {
        let signature = unit(&mut rng, cfg.d_v);
        let base = unit(&mut rng, d);
        let seen = (0..cfg.seen_per_concept).map(|_| fresh(&mut rng)).collect();
        let unseen = (0..cfg.unseen_per_concept).map(|_| fresh(&mut rng)).collect();
        concepts.push(Concept {
            signature,
            base,
            seen,
            unseen,
        });
    }

    let order: Vec<(usize, String)> = concepts
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.seen.iter().map(move |t| (k, t.clone())))
        .chain(
            concepts
                .iter()
                .enumerate()
                .flat_map(|(k, c)| c.unseen.iter().map(move |t| (k, t.clone()))),
        )
        .collect();
    let vocab = Vocabulary::from_tokens(order.iter().map(|(_, t)| t.as_str()));
    let mut matrix = Tensor::zeros(&[vocab.size(), d]);
    for reserved in [MASK, UNK] {
        let v = unit(&mut rng, d);
        matrix.data_mut()[reserved * d..(reserved + 1) * d].copy_from_slice(&v);
    }
    for (k, token) in &order {
        let mut noise = gaussian(&mut rng, d, cfg.sigma_syn / (d as f64).sqrt());
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        // keep the synonym inside the proximity ball despite f32 rounding
        let cap = cfg.sigma_syn * (1.0 - 1e-4);
        if norm > cap {
            noise.iter_mut().for_each(|x| *x *= cap / norm);
        }
        let row = vocab.id(token);
        for (j, n) in noise.iter().enumerate() {
            matrix.data_mut()[row * d + j] = round32(concepts[*k].base[j] + n);
        }
    }
    let table = EmbeddingTable::new(matrix)?;
    let token_concept = order.into_iter().map(|(k, t)| (t, k)).collect();
    Ok(ConceptWorld {
        concepts,
        d_v: cfg.d_v,
        sigma_syn: cfg.sigma_syn,
        seed: cfg.seed,
        vocab,
        table,
        token_concept,
    })
}

impl ConceptWorld {
    pub fn concept_of(&self, token: &str) -> Option<usize> {
        self.token_concept.get(token).copied()
    }

    pub fn seen_tokens(&self) -> BTreeSet<&str> {
        self.concepts.iter().flat_map(|c| c.seen.iter().map(String::as_str)).collect()
    }

    pub fn unseen_tokens(&self) -> BTreeSet<&str> {
        self.concepts.iter().flat_map(|c| c.unseen.iter().map(String::as_str)).collect()
    }

    /// Mean signature of the concepts named by `tokens`.
    pub fn query_signature(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.d_v];
        for t in tokens {
            let k = self
                .concept_of(t)
                .ok_or_else(|| HeroError::Contract(format!("token `{t}` names no concept")))?;
            acc.iter_mut().zip(&self.concepts[k].signature).for_each(|(a, s)| *a += s);
        }
        let n = tokens.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    fn from_parts(file: WorldFile, vocab: Vocabulary, table: EmbeddingTable) -> Result<Self> {
        let mut token_concept = HashMap::new();
        for (k, c) in file.concepts.iter().enumerate() {
            for t in c.seen.iter().chain(&c.unseen) {
                token_concept.insert(t.clone(), k);
            }
        }
        Ok(Self {
            concepts: file.concepts,
            d_v: file.d_v,
            sigma_syn: file.sigma_syn,
            seed: file.seed,
            vocab,
            table,
            token_concept,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T, d_v]` frame features.
    pub video: Tensor,
    pub tokens: Vec<String>,
    pub span: Span,
    pub split: Split,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }
}

fn choose_distinct(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    pool.choose_multiple(rng, n).copied().collect()
}

fn mixture(world: &ConceptWorld, ks: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; world.d_v];
    for &k in ks {
        v.iter_mut().zip(&world.concepts[k].signature).for_each(|(a, s)| *a += s);
    }
    v.iter().map(|a| a / ks.len() as f64).collect()
}

/// Cuts `[lo, hi)` into one or two contiguous segments.
fn segments(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<(usize, usize)> {
    if hi <= lo {
        return Vec::new();
    }
    if hi - lo >= 2 && rng.gen_bool(0.5) {
        let cut = rng.gen_range(lo + 1..hi);
        vec![(lo, cut), (cut, hi)]
    } else {
        vec![(lo, hi)]
    }
}

/// Draws `count` samples for `split`. Queries name 2–4 concepts; in-span
/// frames show their mean signature, the rest show mixtures of other
/// concepts. test_ov queries use at least one unseen synonym.
pub fn generate_split(world: &ConceptWorld, cfg: &SynthConfig, split: Split, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(HeroError::Contract(format!("{split}: sample count must be positive")));
    }
    let k_all = world.concepts.len();
    let t_len = cfg.frames;
    let (min_len, max_len) = cfg.span_bounds();
    let max_concepts = 4.min(k_all - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream());
    let buckets = WeightedIndex::new(cfg.ov_buckets).map_err(|e| HeroError::config("ov_buckets", e.to_string()))?;
    let pool: Vec<usize> = (0..k_all).collect();

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let unseen_n = match split {
            Split::TestOv => (buckets.sample(&mut rng) + 1).min(max_concepts),
            _ => 0,
        };
        let c = rng.gen_range(unseen_n.max(2)..=max_concepts);
        let chosen = choose_distinct(&mut rng, &pool, c);
        let unseen_slots = choose_distinct(&mut rng, &(0..c).collect::<Vec<_>>(), unseen_n);
        let mut tokens: Vec<String> = chosen
            .iter()
            .enumerate()
            .map(|(slot, &k)| {
                let list = if unseen_slots.contains(&slot) {
                    &world.concepts[k].unseen
                } else {
                    &world.concepts[k].seen
                };
                list[rng.gen_range(0..list.len())].clone()
            })
            .collect();
        tokens.shuffle(&mut rng);

        let len = rng.gen_range(min_len..=max_len.min(t_len));
        let s = rng.gen_range(0..=t_len - len);
        let span = Span::new(s, s + len - 1);

        let rest: Vec<usize> = pool.iter().copied().filter(|k| !chosen.contains(k)).collect();
        let mut frame_means = vec![Vec::new(); t_len];
        let inside = mixture(world, &chosen);
        for m in frame_means.iter_mut().take(span.e + 1).skip(span.s) {
            *m = inside.clone();
        }
        let mut segs = segments(&mut rng, 0, span.s);
        segs.extend(segments(&mut rng, span.e + 1, t_len));
        for (a, b) in segs {
            let lo = 2.min(rest.len());
            let m = rng.gen_range(lo..=4.min(rest.len()));
            let mix = mixture(world, &choose_distinct(&mut rng, &rest, m));
            for fm in frame_means.iter_mut().take(b).skip(a) {
                *fm = mix.clone();
            }
        }
        let mut data = Vec::with_capacity(t_len * world.d_v);
        for mean in &frame_means {
            for &mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(round32(mu + cfg.sigma_v * z));
            }
        }
        out.push(Sample {
            id: format!("{split}-{i:05}"),
            video: Tensor::new(vec![t_len, world.d_v], data)?,
            tokens,
            span,
            split,
        });
    }
    Ok(out)
}

/// Nearest-signature oracle: the longest run of frames whose cosine to
/// the query's mean signature equals the per-video maximum.
pub fn oracle_span(video: &Tensor, query_signature: &[f64]) -> Span {
    let qn = query_signature.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = (0..video.shape()[0])
        .map(|t| {
            let row = video.row(t);
            let dot: f64 = row.iter().zip(query_signature).map(|(a, b)| a * b).sum();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || qn == 0.0 {
                0.0
            } else {
                dot / (n * qn)
            }
        })
        .collect();
    let best = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut top: Option<Span> = None;
    let mut run_start = None;
    for (t, &c) in cos.iter().enumerate() {
        if c == best {
            let s = *run_start.get_or_insert(t);
            if top.map_or(true, |sp| t + 1 - s > sp.len()) {
                top = Some(Span::new(s, t));
            }
        } else {
            run_start = None;
        }
    }
    top.unwrap_or(Span::new(0, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: ConceptWorld,
    pub splits: BTreeMap<Split, Vec<Sample>>,
    pub frames: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Result<&[Sample]> {
        match self.splits.get(&split) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(HeroError::Contract(format!("dataset has no `{split}` samples"))),
        }
    }
}

/// World plus all four splits.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let world = build_world(cfg)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let n = cfg.count(split);
        let samples = if n == 0 {
            Vec::new()
        } else {
            generate_split(&world, cfg, split, n)?
        };
        splits.insert(split, samples);
    }
    Ok(Dataset {
        world,
        splits,
        frames: cfg.frames,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u64,
    d_v: usize,
    #[serde(rename = "T")]
    frames: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    video: Vec<Vec<f32>>,
    tokens: Vec<String>,
    span: [usize; 2],
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    seed: u64,
    d_v: usize,
    sigma_syn: f64,
    concepts: Vec<Concept>,
}

pub const DATASET_FILES: [&str; 8] = [
    "train.jsonl",
    "val.jsonl",
    "test_iid.jsonl",
    "test_ov.jsonl",
    "vocab.json",
    "embeddings.bin",
    "embeddings.json",
    "world.json",
];

/// Writes one split as JSON Lines with a schema header.
pub fn write_split(path: &Path, samples: &[Sample], d_v: usize, frames: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HeroError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HeroError::io(path, e);
    let header = Header {
        schema: SCHEMA_VERSION,
        d_v,
        frames,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for s in samples {
        let rec = Record {
            id: s.id.clone(),
            video: (0..s.frames()).map(|t| s.video.row(t).iter().map(|&x| x as f32).collect()).collect(),
            tokens: s.tokens.clone(),
            span: [s.span.s, s.span.e],
            split: s.split,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a split file. An empty file yields no samples.
pub fn read_split(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| HeroError::io(path, e))?;
    let mut out = Vec::new();
    let mut header: Option<Header> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HeroError::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| HeroError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if value.get("schema").is_some() {
            let h: Header = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
            if h.schema != SCHEMA_VERSION {
                return Err(HeroError::Version {
                    path: path.to_path_buf(),
                    found: h.schema,
                    expected: SCHEMA_VERSION,
                });
            }
            header = Some(h);
            continue;
        }
        let rec: Record = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        let frames = rec.video.len();
        let d_v = rec.video.first().map_or(0, Vec::len);
        if let Some(h) = &header {
            if h.frames != frames || h.d_v != d_v {
                return Err(parse(format!(
                    "video is {frames}x{d_v}, header declares {}x{}",
                    h.frames, h.d_v
                )));
            }
        }
        if rec.video.iter().any(|r| r.len() != d_v) || frames == 0 {
            return Err(parse("ragged or empty video".into()));
        }
        let span = Span::new(rec.span[0], rec.span[1]);
        span.validate(frames).map_err(|e| parse(e.to_string()))?;
        let data = rec.video.iter().flatten().map(|&x| x as f64).collect();
        out.push(Sample {
            id: rec.id,
            video: Tensor::new(vec![frames, d_v], data)?,
            tokens: rec.tokens,
            span,
            split: rec.split,
        });
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HeroError::io(dir, e))?;
    for split in Split::ALL {
        let samples = ds.splits.get(&split).map(Vec::as_slice).unwrap_or(&[]);
        write_split(&dir.join(format!("{split}.jsonl")), samples, ds.world.d_v, ds.frames)?;
    }
    ds.world.vocab.write(&dir.join("vocab.json"))?;
    ds.world
        .table
        .write(&dir.join("embeddings.bin"), &dir.join("embeddings.json"))?;
    let wf = WorldFile {
        seed: ds.world.seed,
        d_v: ds.world.d_v,
        sigma_syn: ds.world.sigma_syn,
        concepts: ds.world.concepts.clone(),
    };
    let path = dir.join("world.json");
    fs::write(&path, serde_json::to_string_pretty(&wf)? + "\n").map_err(|e| HeroError::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::read(&dir.join("vocab.json"))?;
    let table = EmbeddingTable::read(&dir.join("embeddings.bin"), &dir.join("embeddings.json"))?;
    if table.rows() != vocab.size() {
        return Err(HeroError::Contract(format!(
            "embedding table has {} rows for a vocabulary of {}",
            table.rows(),
            vocab.size()
        )));
    }
    let path = dir.join("world.json");
    let text = fs::read_to_string(&path).map_err(|e| HeroError::io(&path, e))?;
    let wf: WorldFile = serde_json::from_str(&text)?;
    let world = ConceptWorld::from_parts(wf, vocab, table)?;
    let mut splits = BTreeMap::new();
    let mut frames = 0;
    for split in Split::ALL {
        let samples = read_split(&dir.join(format!("{split}.jsonl")))?;
        if let Some(s) = samples.first() {
            frames = s.frames();
        }
        splits.insert(split, samples);
    }
    Ok(Dataset { world, splits, frames })
}
