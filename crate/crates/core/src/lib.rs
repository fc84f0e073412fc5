//! Open-vocabulary temporal sentence grounding: hierarchical text
//! embeddings, semantic-guided visual filtering, masked-text contrastive
//! refinement, plus the synthetic benchmark, metrics and corpus analyzer
//! used to exercise them.

pub mod analyzer;
pub mod cfre;
pub mod embedding;
mod error;
pub mod head;
pub mod hem;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use embedding::{embed, mask_count, random_mask, EmbeddingLayer, EmbeddingTable, Query, Vocabulary, MASK, PAD, UNK};
pub use error::{HeroError, Result};
pub use hem::{Hem, HemConfig, HierarchicalTextSet};
pub use cfre::{cfre_branch, FilteredVisual, Sgvf, VideoFeatures, VideoProjection};
pub use head::{aggregate, decode_batch, decode_span, AggregationWeights, BranchOutput, HeadConfig, LevelHead, Span};
pub use losses::{loss_cl, loss_rs, loss_tsgv, total_loss, ClDivergence, LossBreakdown, LossConfig};
pub use metrics::{evaluate, iou, HitRule, MetricsReport, THRESHOLDS};
pub use synth::{
    build_world, generate_dataset, generate_split, oracle_span, read_dataset, read_split, write_dataset, write_split,
    ConceptWorld, Dataset, Sample, Split, SynthConfig,
};
pub use analyzer::{assert_ov_split, build_vocab, novelty_report, ov_split_violations, read_corpus, tokenize, NoveltyReport, TermCount};
pub use model::{Batch, HeroModel, MaskMode, ModelConfig, ModelOutput};
pub use trainer::{
    build_model, evaluate_model, load_model, predict, save_model, train, train_observed, train_step, Decay, EpochLog,
    StepLog, TrainConfig, TrainLog, TrainObserver, Trained,
};
