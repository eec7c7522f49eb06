//! # dialab
//!
//! A desk-scale laboratory for pre-training based dialogue transformers.
//!
//! The crate implements the four classic fine-tuning frameworks
//! (encoder-decoder, decoder-only, masked-LM and auto-regressive decoders with
//! a bidirectional source side) together with two corrected variants: PF-free,
//! which applies bidirectional attention over the generated prefix at fixed
//! step intervals, and FG-free, which trains on a parallel stream of `[MASK]`
//! slots so that training contexts equal generation contexts. Around the
//! models sit constrained beam-search decoding, a BLEU/CIDEr/Distinct metric
//! suite with Welch t-tests, synthetic corpora, and bit-exact checkpointing.
//!
//! The primary interface is the `examples/` directory — one runnable program
//! per capability:
//!
//! ```text
//! cargo run --example show_masks            # attention masks for every framework
//! cargo run --example gradient_check        # finite differences vs backward
//! cargo run --example decode_constraints    # unigram blocking and min-length
//! cargo run --example metrics_report        # metric fixtures and t-tests
//! cargo run --example discrepancy_witness   # FG-free vs MLM generation contexts
//! cargo run --example train_reverse         # end-to-end pipeline on one framework
//! cargo run --example compare_frameworks    # small-data comparison table
//! ```
//!
//! A thin `dialab` binary wires the same pipeline as subcommands
//! (`synth`, `vocab`, `pretrain`, `finetune`, `calibrate`, `generate`,
//! `evaluate`, `compare`).

pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod objectives;
pub mod transformer;

pub use error::{Error, Result};
pub use layout::{AttentionMask, Framework, SequenceLayout};
pub use numcore::{Real, Tensor};
pub use transformer::ModelConfig;
