//! Property-ratio inference against fine-tuned text models.
//!
//! Given access to a model fine-tuned on a private dataset, these attacks
//! estimate the fraction of that dataset carrying a binary property:
//!
//! * [`gen_attack`]: black-box. Prompt the model, label its generations, and
//!   average the per-prompt positive fractions. Also the direct-ask baseline.
//! * [`shadow`]: grey-box. Train shadow models at known ratios, featurize them
//!   by word containment frequencies ([`features`]) or hold-out perplexity,
//!   and regress ratio on features with boosted trees ([`gbt`]).
//!
//! [`synth`] provides unigram stand-ins for fine-tuned models whose
//! containment probabilities and token log-probabilities are known in closed
//! form, so every estimator here can be checked against an exact oracle.
//!
//! The crate is `no_std` (with `alloc`). File formats, HTTP endpoints and the
//! command line live in the `propinfer` crate.
#![no_std]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod exec;
pub mod features;
pub mod gbt;
pub mod gen_attack;
pub mod model;
pub mod report;
pub mod rng;
pub mod shadow;
pub mod synth;
pub mod text;

pub use corpus::{
    keyword_label, true_ratio, KeywordLabeler, LabelValue, LabeledDataset, Labeler, PropertySpec, Sample,
    TargetSide,
};
pub use error::{Error, Result};
pub use gbt::{GbtParams, MetaRegressor};
pub use model::{sequence_perplexity, DecodeParams, GenerationSet, TextModel};
pub use report::{mae, AttackKind, AttackReport};
pub use synth::{build_generator, FineTuneMode, Side, SyntheticModel, VocabSpec};
