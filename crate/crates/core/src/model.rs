//! The text-model contract shared by remote endpoints and the synthetic lab.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelValue, Labeler};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_tokens: usize,
    /// 0 means greedy.
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_tokens: 256,
            temperature: 1.0,
            stop_sequences: Vec::new(),
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidArgument("temperature must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Outputs collected from one model under one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub model_id: String,
    pub prompt: String,
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelValue>>,
}

impl GenerationSet {
    pub fn new(model_id: &str, prompt: &str, texts: Vec<String>) -> GenerationSet {
        GenerationSet {
            model_id: model_id.to_string(),
            prompt: prompt.to_string(),
            texts,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn set_labels(&mut self, labels: Vec<LabelValue>) -> Result<()> {
        if labels.len() != self.texts.len() {
            return Err(Error::LengthMismatch {
                left: self.texts.len(),
                right: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Labels every text. Empty completions are labeled like any other text.
    pub fn label_with<L: Labeler + ?Sized>(&mut self, labeler: &L) -> Result<&[LabelValue]> {
        let labels = self
            .texts
            .iter()
            .map(|t| labeler.label(t))
            .collect::<Result<Vec<_>>>()?;
        self.labels = Some(labels);
        Ok(self.labels.as_deref().unwrap_or_default())
    }
}

/// A generative model that can be sampled and, optionally, scored.
pub trait TextModel {
    fn model_id(&self) -> String;

    /// Exactly `n` completions of `prompt`. Implementations that can honour a
    /// seed must be deterministic under it.
    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet>;

    /// One natural-log probability per token of the model's own tokenization.
    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>>;
}

impl<T: TextModel + ?Sized> TextModel for &T {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet> {
        (**self).generate_batch(prompt, n, seed)
    }
    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        (**self).score_logprobs(text)
    }
}

impl<T: TextModel + ?Sized> TextModel for alloc::boxed::Box<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn generate_batch(&self, prompt: &str, n: usize, seed: u64) -> Result<GenerationSet> {
        (**self).generate_batch(prompt, n, seed)
    }
    fn score_logprobs(&self, text: &str) -> Result<Vec<f64>> {
        (**self).score_logprobs(text)
    }
}

/// exp of the negative mean token log-probability.
pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(libm::exp(-mean))
}

pub fn sequence_perplexity<M: TextModel + ?Sized>(model: &M, text: &str) -> Result<f64> {
    perplexity_from_logprobs(&model.score_logprobs(text)?)
}
