//! Zero-shot keyword spotting in lip video and speech audio.
//!
//! A phonetic keyword embedding and a per-frame speech feature sequence are
//! combined into a similarity map; a small CNN reads keyword occurrences off
//! that map. The crate contains every piece needed to train and evaluate the
//! model at desk scale on synthetic corpora:
//!
//! - [`gradcore`]: reverse-mode differentiation engine and optimizer
//! - [`pronlex`]: pronouncing-dictionary parsing and vocabulary splits
//! - [`encoders`]: audio/visual front-ends, sequence BiLSTM, keyword encoder
//! - [`kwsnet`]: similarity map, detector, loss, fusion and spotting
//! - [`synthcorpus`]: synthetic viseme/phoneme corpora with planted keywords
//! - [`trainer`]: batching, schedules, noise augmentation, checkpoints
//! - [`evalharness`]: retrieval protocol and R@N / mAP / EER metrics

pub mod encoders;
pub mod evalharness;
pub mod error;
pub mod gradcore;
pub mod kwsnet;
pub mod par;
pub mod pronlex;
pub mod synthcorpus;
pub mod trainer;

pub use error::{KwsError, Result};
